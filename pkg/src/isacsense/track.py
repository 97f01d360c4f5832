"""Extended Kalman filter tracking of bistatic detections.

State per track is ``[x, y, vx, vy, ax, ay]`` under a constant-acceleration
model driven by white jerk.  Measurements are ``(delay, aoa, doppler)`` (or
``(delay, aoa)`` with the Doppler switch off), related to the state through
the bistatic geometry.

Lifecycle per frame: predict, associate, update, coast unassigned tracks,
spawn tentative tracks from unassigned points, confirm on M hits within the
last N frames, delete after ``max_misses`` consecutive misses.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2

from .detect import BistaticGeometry, DegenerateGeometryError, DetectionPoint
from .scene import SPEED_OF_LIGHT


class TrackingError(ValueError):
    pass


class NumericalConditioningError(TrackingError):
    pass


class Status(str, enum.Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DELETED = "deleted"


@dataclass(frozen=True)
class TrackerConfig:
    """Tracker parameters.

    ``gate_threshold`` is in metres for the Euclidean metric and a chi-square
    value for the Mahalanobis metric; ``None`` picks 1.5 m or the 99 %
    quantile for the measurement dimension.
    """

    gate_threshold: Optional[float] = None
    confirm_m_of_n: tuple[int, int] = (3, 5)
    max_misses: int = 5
    process_noise_psd: float = 100.0  # (m/s^3)^2
    measurement_noise: tuple[float, float, float] = ((5e-9) ** 2, 0.05**2, 0.5**2)  # s^2, rad^2, Hz^2
    association_metric: str = "mahalanobis"
    use_doppler: bool = True
    snr_weight: float = 1.0
    init_std: tuple[float, float, float] = (0.5, 1.0, 1.0)  # position, velocity, acceleration
    init_windows: int = 3
    cluster_radius: float = 0.75  # m, about one delay bin of bistatic range at 20 MHz

    def __post_init__(self):
        m, n = self.confirm_m_of_n
        if not 1 <= m <= n:
            raise TrackingError("confirm_m_of_n needs 1 <= M <= N")
        if self.max_misses < 1:
            raise TrackingError("max_misses must be >= 1")
        if self.association_metric not in ("euclidean", "mahalanobis"):
            raise TrackingError(f"unknown association metric {self.association_metric!r}")
        if self.process_noise_psd < 0 or min(self.measurement_noise) <= 0:
            raise TrackingError("noise parameters must be positive")

    @property
    def meas_dim(self) -> int:
        return 3 if self.use_doppler else 2

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.measurement_noise[: self.meas_dim])

    @property
    def gate(self) -> float:
        if self.gate_threshold is not None:
            return self.gate_threshold
        return 1.5 if self.association_metric == "euclidean" else float(chi2.ppf(0.99, self.meas_dim))


@dataclass
class Track:
    id: int
    state: np.ndarray  # (6,)
    covariance: np.ndarray  # (6, 6)
    status: Status = Status.TENTATIVE
    hits: int = 1
    misses: int = 0  # consecutive
    hit_log: list = field(default_factory=lambda: [True])
    history: list = field(default_factory=list)  # (timestamp, state)

    @property
    def position(self) -> np.ndarray:
        return self.state[:2]

    @property
    def alive(self) -> bool:
        return self.status is not Status.DELETED

    def copy(self) -> "Track":
        return replace(
            self, state=self.state.copy(), covariance=self.covariance.copy(),
            hit_log=list(self.hit_log), history=list(self.history),
        )


# ---------------------------------------------------------------------------
# motion and measurement models
# ---------------------------------------------------------------------------


def transition(dt: float) -> np.ndarray:
    f = np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    return np.kron(f, np.eye(2))


def process_noise(dt: float, psd: float) -> np.ndarray:
    """Discretised white-jerk covariance."""
    q = psd * np.array(
        [
            [dt**5 / 20, dt**4 / 8, dt**3 / 6],
            [dt**4 / 8, dt**3 / 3, dt**2 / 2],
            [dt**3 / 6, dt**2 / 2, dt],
        ]
    )
    return np.kron(q, np.eye(2))


def _condition(P: np.ndarray) -> np.ndarray:
    """Symmetrise and clamp tiny negative eigenvalues; raise if still invalid."""
    P = 0.5 * (P + P.T)
    if not np.all(np.isfinite(P)):
        raise NumericalConditioningError("covariance is not finite")
    w, V = np.linalg.eigh(P)
    floor = 1e-12 * max(float(np.max(np.abs(w))), 1e-300)
    if w.min() < -1e-6 * max(float(w.max()), 1e-300):
        raise NumericalConditioningError(f"covariance not positive definite (min eig {w.min():.3g})")
    if w.min() < floor:
        P = (V * np.maximum(w, floor)) @ V.T
        P = 0.5 * (P + P.T)
    return P


def ekf_predict(track: Track, dt: float, psd: float) -> Track:
    if dt <= 0:
        raise TrackingError("prediction step must be positive")
    if not track.alive:
        raise TrackingError(f"track {track.id} is deleted")
    F = transition(dt)
    out = track.copy()
    out.state = F @ track.state
    out.covariance = _condition(F @ track.covariance @ F.T + process_noise(dt, psd))
    return out


def _wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def measurement_model(state: np.ndarray, geom: BistaticGeometry, use_doppler: bool = True) -> np.ndarray:
    """h(state) = (excess delay, aoa from broadside, bistatic Doppler)."""
    p, v = state[:2], state[2:4]
    tx, rx = np.asarray(geom.tx, float), np.asarray(geom.rx, float)
    d1, d2 = p - tx, p - rx
    r1, r2 = np.hypot(*d1), np.hypot(*d2)
    tau = (r1 + r2 - geom.baseline) / SPEED_OF_LIGHT
    theta = _wrap(np.arctan2(d2[1], d2[0]) - geom.rx_normal)
    if not use_doppler:
        return np.array([tau, theta])
    fd = -((d1 / r1 + d2 / r2) @ v) / geom.wavelength
    return np.array([tau, theta, fd])


def jacobian(state: np.ndarray, geom: BistaticGeometry, use_doppler: bool = True) -> np.ndarray:
    """Analytic Jacobian of :func:`measurement_model`, shape (m, 6)."""
    p, v = state[:2], state[2:4]
    tx, rx = np.asarray(geom.tx, float), np.asarray(geom.rx, float)
    d1, d2 = p - tx, p - rx
    r1, r2 = np.hypot(*d1), np.hypot(*d2)
    if r1 == 0 or r2 == 0:
        raise DegenerateGeometryError("state coincides with an antenna")
    u1, u2 = d1 / r1, d2 / r2
    H = np.zeros((3 if use_doppler else 2, 6))
    H[0, :2] = (u1 + u2) / SPEED_OF_LIGHT
    H[1, :2] = np.array([-d2[1], d2[0]]) / r2**2
    if use_doppler:
        # d(u.v)/dp = (v - (u.v) u) / r
        g1 = (v - (u1 @ v) * u1) / r1
        g2 = (v - (u2 @ v) * u2) / r2
        H[2, :2] = -(g1 + g2) / geom.wavelength
        H[2, 2:4] = -(u1 + u2) / geom.wavelength
    return H


def point_measurement(point: DetectionPoint, use_doppler: bool = True) -> np.ndarray:
    z = [point.delay, point.aoa, point.doppler]
    return np.array(z[: 3 if use_doppler else 2])


def innovation(track: Track, point: DetectionPoint, geom: BistaticGeometry, cfg: TrackerConfig):
    """Innovation, its covariance and the measurement Jacobian."""
    z = point_measurement(point, cfg.use_doppler)
    H = jacobian(track.state, geom, cfg.use_doppler)
    nu = z - measurement_model(track.state, geom, cfg.use_doppler)
    nu[1] = _wrap(nu[1])
    S = H @ track.covariance @ H.T + cfg.R
    return nu, S, H


def ekf_update(track: Track, point: DetectionPoint, geom: BistaticGeometry, cfg: TrackerConfig) -> Optional[Track]:
    """Standard EKF update; returns None if the innovation covariance is singular."""
    nu, S, H = innovation(track, point, geom, cfg)
    try:
        # scale rows/cols so delay (~1e-8) and Doppler (~1) are comparable
        d = 1.0 / np.sqrt(np.diag(S))
        Sn = S * np.outer(d, d)
        if np.linalg.cond(Sn) > 1e12:
            return None
        K = track.covariance @ H.T @ (np.linalg.inv(Sn) * np.outer(d, d))
    except (np.linalg.LinAlgError, FloatingPointError):
        return None
    out = track.copy()
    out.state = track.state + K @ nu
    I_KH = np.eye(6) - K @ H
    # Joseph form keeps the covariance symmetric positive definite
    out.covariance = _condition(I_KH @ track.covariance @ I_KH.T + K @ cfg.R @ K.T)
    return out


# ---------------------------------------------------------------------------
# association
# ---------------------------------------------------------------------------


def distance_matrix(
    tracks: Sequence[Track], points: Sequence[DetectionPoint], geom: BistaticGeometry, cfg: TrackerConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Gating distance and ranking cost per (track, point).

    Euclidean: distance between the predicted position and the point's
    Cartesian position.  Mahalanobis: squared innovation distance over
    (delay, aoa, doppler); the ranking cost adds ``snr_weight * 10**(-snr/10)``
    so stronger points win close calls.
    """
    D = np.full((len(tracks), len(points)), np.inf)
    C = np.full_like(D, np.inf)
    if not len(tracks) or not len(points):
        return D, C
    if cfg.association_metric == "euclidean":
        pos = np.array([_point_position(p, geom) for p in points])
        for i, t in enumerate(tracks):
            D[i] = np.hypot(*(pos - t.position).T)
        return D, D.copy()
    for i, t in enumerate(tracks):
        for j, p in enumerate(points):
            nu, S, _ = innovation(t, p, geom, cfg)
            try:
                D[i, j] = float(nu @ np.linalg.solve(S, nu))
            except np.linalg.LinAlgError:
                continue
            C[i, j] = D[i, j] + cfg.snr_weight * 10 ** (-p.snr / 10)
    return D, C


def _point_position(p: DetectionPoint, geom: BistaticGeometry) -> np.ndarray:
    try:
        return geom.to_cartesian(p.delay, p.aoa)
    except DegenerateGeometryError:
        return np.full(2, np.nan)


@dataclass
class Association:
    pairs: list  # (track index, point index)
    unassigned_points: list
    unassigned_tracks: list


def associate(distance: np.ndarray, cost: np.ndarray, gate: float) -> Association:
    """Greedy global-nearest assignment inside the gate.

    Pairs are taken in increasing cost; ties break on (track index, point
    index), so the result is deterministic.
    """
    n_t, n_p = distance.shape
    ti, pi = np.nonzero(distance <= gate)
    order = np.lexsort((pi, ti, cost[ti, pi]))
    used_t, used_p, pairs = set(), set(), []
    for k in order:
        t, p = int(ti[k]), int(pi[k])
        if t in used_t or p in used_p:
            continue
        pairs.append((t, p))
        used_t.add(t)
        used_p.add(p)
    return Association(
        sorted(pairs),
        [p for p in range(n_p) if p not in used_p],
        [t for t in range(n_t) if t not in used_t],
    )


# ---------------------------------------------------------------------------
# lifecycle
# ---------------------------------------------------------------------------


@dataclass
class TrackerState:
    tracks: list = field(default_factory=list)  # every track ever created, deleted ones included
    next_id: int = 1
    time: float = 0.0
    frame: int = 0
    recent: deque = field(default_factory=deque)  # unassigned points of the last windows

    @property
    def active(self) -> list:
        return [t for t in self.tracks if t.alive]

    @property
    def motion_presence(self) -> bool:
        return bool(self.active)


def initial_track(
    track_id: int, points: Sequence[DetectionPoint], positions: np.ndarray, geom: BistaticGeometry,
    cfg: TrackerConfig, timestamp: float,
) -> Track:
    """SNR-weighted position over clustered points; velocity from the newest Doppler.

    The newest point's Doppler constrains only the velocity component along
    the bistatic gradient ``u1 + u2``; the orthogonal component starts at 0.
    """
    w = np.array([10 ** (p.snr / 10) for p in points])
    pos = (w[:, None] * positions).sum(0) / w.sum()
    tx, rx = np.asarray(geom.tx, float), np.asarray(geom.rx, float)
    g = (pos - tx) / np.hypot(*(pos - tx)) + (pos - rx) / np.hypot(*(pos - rx))
    gg = g @ g
    vel = -geom.wavelength * points[-1].doppler * g / gg if gg > 1e-12 else np.zeros(2)
    sp, sv, sa = cfg.init_std
    P = np.diag([sp**2, sp**2, sv**2, sv**2, sa**2, sa**2])
    state = np.concatenate([pos, vel, np.zeros(2)])
    return Track(track_id, state, P, history=[(timestamp, state.copy())])


def step_tracker(
    state: TrackerState,
    points: Sequence[DetectionPoint],
    dt: float,
    geom: BistaticGeometry,
    cfg: TrackerConfig = TrackerConfig(),
    timestamp: Optional[float] = None,
) -> TrackerState:
    """Advance the tracker by one frame; returns a new state."""
    ts = state.time + dt if timestamp is None else float(timestamp)
    m, n = cfg.confirm_m_of_n
    tracks = [t.copy() for t in state.tracks]
    live = [i for i, t in enumerate(tracks) if t.alive]
    for i in live:
        tracks[i] = ekf_predict(tracks[i], dt, cfg.process_noise_psd)
    points = list(points)
    D, C = distance_matrix([tracks[i] for i in live], points, geom, cfg)
    assoc = associate(D, C, cfg.gate)

    missed = [live[k] for k in assoc.unassigned_tracks]
    for k, p in assoc.pairs:
        i = live[k]
        upd = ekf_update(tracks[i], points[p], geom, cfg)
        if upd is None:
            missed.append(i)
            continue
        upd.hits += 1
        upd.misses = 0
        upd.hit_log.append(True)
        tracks[i] = upd
    for i in missed:
        tracks[i].misses += 1
        tracks[i].hit_log.append(False)

    for i in live:
        t = tracks[i]
        t.hit_log = t.hit_log[-n:]
        if t.misses >= cfg.max_misses:
            t.status = Status.DELETED
        elif t.status is Status.TENTATIVE:
            if sum(t.hit_log) >= m:
                t.status = Status.CONFIRMED
            elif len(t.hit_log) >= n:
                t.status = Status.DELETED  # failed M-of-N
        t.history.append((ts, t.state.copy()))

    # spawn from unassigned points, clustering with recent unassigned points
    recent = deque(state.recent, maxlen=max(cfg.init_windows - 1, 0) or None)
    pool = [q for frame in recent for q in frame]
    fresh = []
    next_id = state.next_id
    for j in assoc.unassigned_points:
        p = points[j]
        pos = _point_position(p, geom)
        if not np.all(np.isfinite(pos)):
            continue
        fresh.append((p, pos))
        near = [(q, qp) for q, qp in pool if np.hypot(*(qp - pos)) <= cfg.cluster_radius]
        members = near + [(p, pos)]
        tracks.append(
            initial_track(
                next_id, [q for q, _ in members], np.array([qp for _, qp in members]), geom, cfg, ts
            )
        )
        next_id += 1
    if cfg.init_windows > 1:
        recent.append(fresh)
    return TrackerState(tracks, next_id, ts, state.frame + 1, recent)


def run_tracker(
    frames: Sequence[Sequence[DetectionPoint]],
    timestamps: Sequence[float],
    geom: BistaticGeometry,
    cfg: TrackerConfig = TrackerConfig(),
) -> tuple[TrackerState, list]:
    """Track over a frame sequence; returns the final state and per-frame motion presence."""
    st = TrackerState(time=float(timestamps[0]) if len(timestamps) else 0.0)
    presence = []
    prev = None
    for pts, ts in zip(frames, timestamps):
        dt = ts - prev if prev is not None else 1e-3
        if dt <= 0:
            raise TrackingError("timestamps must increase")
        st = step_tracker(st, pts, dt, geom, cfg, ts)
        presence.append(st.motion_presence)
        prev = ts
    return st, presence
