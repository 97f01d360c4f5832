"""Ground-truth multipath scenes and synthesis of impaired OFDM channel responses.

The channel model is the usual multi-antenna OFDM CFR: a per-symbol random
prefactor (AGC gain, timing offset, CFO, hardware phase) multiplying a sum of
propagation paths, each carrying a delay, Doppler, AoA and AoD phase factor.
Geometry is planar.  Angles are measured from the array broadside, positive
counter-clockwise in the world frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class SceneError(ValueError):
    """Invalid scene or configuration."""


# ---------------------------------------------------------------------------
# configuration types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WaveformConfig:
    """OFDM numerology.

    ``symbol_interval`` is the spacing between consecutive CSI snapshots
    (the ``k T_s`` clock of the channel model); subcarrier offsets are centred
    on the carrier.
    """

    carrier_frequency: float = 3.1e9
    num_subcarriers: int = 100
    subcarrier_spacing: float = 200e3
    symbol_interval: float = 1e-3
    propagation_speed: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if not self.carrier_frequency > 0:
            raise SceneError("carrier_frequency must be positive")
        if not self.subcarrier_spacing > 0:
            raise SceneError("subcarrier_spacing must be positive")
        if not self.symbol_interval > 0:
            raise SceneError("symbol_interval must be positive")
        if self.num_subcarriers < 2:
            raise SceneError("num_subcarriers must be >= 2")

    @property
    def frames_per_second(self) -> float:
        return 1.0 / self.symbol_interval

    @property
    def wavelength(self) -> float:
        return self.propagation_speed / self.carrier_frequency

    @property
    def bandwidth(self) -> float:
        return self.num_subcarriers * self.subcarrier_spacing

    @property
    def subcarrier_offsets(self) -> np.ndarray:
        """Baseband frequency of each subcarrier (Hz), centred on zero."""
        j = np.arange(self.num_subcarriers) - (self.num_subcarriers - 1) / 2.0
        return j * self.subcarrier_spacing


@dataclass(frozen=True)
class ArrayConfig:
    num_tx: int = 1
    num_rx: int = 3
    tx_spacing: Optional[float] = None  # None -> half wavelength
    rx_spacing: Optional[float] = None

    def __post_init__(self):
        if self.num_tx < 1 or self.num_rx < 1:
            raise SceneError("array needs at least one element per side")
        for s in (self.tx_spacing, self.rx_spacing):
            if s is not None and not s > 0:
                raise SceneError("antenna spacing must be positive")

    def spacings(self, waveform: WaveformConfig) -> tuple[float, float]:
        half = waveform.wavelength / 2.0
        return (self.tx_spacing or half, self.rx_spacing or half)


@dataclass(frozen=True)
class PathComponent:
    delay: float  # s, excess over the earliest (LOS) path
    doppler: float  # Hz
    aoa: float  # rad from rx broadside
    aod: float  # rad from tx broadside
    gain: complex = 1.0

    def __post_init__(self):
        vals = (self.delay, self.doppler, self.aoa, self.aod, abs(self.gain))
        if not all(math.isfinite(v) for v in vals):
            raise SceneError(f"non-finite path parameter in {self}")
        if self.delay < 0:
            raise SceneError("path delay must be >= 0")
        if abs(self.aoa) > math.pi / 2 + 1e-12 or abs(self.aod) > math.pi / 2 + 1e-12:
            raise SceneError("AoA/AoD must lie within +-pi/2")


@dataclass(frozen=True)
class ImpairmentConfig:
    """How clock-asynchrony and AGC impairments are drawn.

    ``hw_phase_spread`` is the per-antenna spread (rad) of the hardware
    phase on top of a common random offset; 0 models a calibrated array.
    """

    enabled: bool = True
    cfo_hz: float = 50.0
    agc_step_std: float = 0.01
    agc_bounds: tuple[float, float] = (0.5, 2.0)
    timing_offset: bool = True
    hw_phase_spread: float = 0.0
    seed: int = 0


@dataclass
class ImpairmentState:
    agc_gain: np.ndarray  # (K,)
    timing_offset: np.ndarray  # (K,) seconds
    cfo: float  # Hz
    hw_phase: np.ndarray  # (n_tx, n_rx) rad
    rng_seed: Optional[int] = None

    def __post_init__(self):
        if np.any(self.agc_gain <= 0):
            raise SceneError("AGC gain must be positive")

    @classmethod
    def disabled(cls, array: ArrayConfig, num_symbols: int) -> "ImpairmentState":
        return cls(
            agc_gain=np.ones(num_symbols),
            timing_offset=np.zeros(num_symbols),
            cfo=0.0,
            hw_phase=np.zeros((array.num_tx, array.num_rx)),
        )


def draw_impairments(
    cfg: ImpairmentConfig,
    waveform: WaveformConfig,
    array: ArrayConfig,
    num_symbols: int,
) -> ImpairmentState:
    """Draw one reproducible impairment realisation."""
    if not cfg.enabled:
        return ImpairmentState.disabled(array, num_symbols)
    rng = np.random.default_rng([cfg.seed, 0])
    lo, hi = cfg.agc_bounds
    steps = rng.normal(0.0, cfg.agc_step_std, num_symbols)
    steps[0] = 0.0
    # multiplicative random walk in log domain, clamped
    agc = np.clip(np.exp(np.cumsum(steps)), lo, hi)
    half = 0.5 / (waveform.num_subcarriers * waveform.subcarrier_spacing)
    if cfg.timing_offset:
        to = rng.uniform(-half, half, num_symbols)
    else:
        to = np.zeros(num_symbols)
    common = rng.uniform(-np.pi, np.pi)
    spread = rng.uniform(-0.5, 0.5, (array.num_tx, array.num_rx)) * cfg.hw_phase_spread
    return ImpairmentState(
        agc_gain=agc,
        timing_offset=to,
        cfo=float(cfg.cfo_hz),
        hw_phase=common + spread,
        rng_seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VitalModel:
    resp_amplitude: float = 0.005  # m
    resp_rate: float = 22 / 60  # Hz
    heart_amplitude: float = 0.0003
    heart_rate: float = 75 / 60

    def __post_init__(self):
        if self.resp_amplitude < 0 or self.heart_amplitude < 0:
            raise SceneError("vital amplitudes must be >= 0")

    @property
    def physiological(self) -> bool:
        return 0.1 <= self.resp_rate <= 0.5 and 0.8 <= self.heart_rate <= 2.0

    def displacement(self, t):
        t = np.asarray(t, dtype=float)
        return self.resp_amplitude * np.sin(2 * np.pi * self.resp_rate * t) + (
            self.heart_amplitude * np.sin(2 * np.pi * self.heart_rate * t)
        )

    def displacement_rate(self, t):
        t = np.asarray(t, dtype=float)
        wr, wh = 2 * np.pi * self.resp_rate, 2 * np.pi * self.heart_rate
        return self.resp_amplitude * wr * np.cos(wr * t) + self.heart_amplitude * wh * np.cos(wh * t)


@dataclass(frozen=True)
class Trajectory:
    """Constant-speed walk along a polyline of waypoints (closed if ``loop``)."""

    waypoints: tuple
    speed: float
    loop: bool = True

    def __post_init__(self):
        if len(self.waypoints) < 2 or not self.speed > 0:
            raise SceneError("trajectory needs >= 2 waypoints and positive speed")

    def _segments(self):
        pts = np.asarray(self.waypoints, dtype=float)
        if self.loop:
            pts = np.vstack([pts, pts[:1]])
        seg = np.diff(pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        return pts, seg, lengths

    def state(self, t):
        """Position and velocity arrays of shape (N, 2) at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        pts, seg, lengths = self._segments()
        total = lengths.sum()
        s = self.speed * t
        s = np.mod(s, total) if self.loop else np.clip(s, 0.0, total)
        edges = np.concatenate([[0.0], np.cumsum(lengths)])
        idx = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, len(lengths) - 1)
        frac = (s - edges[idx]) / lengths[idx]
        pos = pts[idx] + frac[:, None] * seg[idx]
        vel = self.speed * seg[idx] / lengths[idx, None]
        if not self.loop:
            vel[self.speed * t >= total] = 0.0
        return pos, vel


@dataclass(frozen=True)
class TargetState:
    position: tuple = (0.0, 1.0)
    velocity: tuple = (0.0, 0.0)
    acceleration: tuple = (0.0, 0.0)
    reflect_gain: complex = 0.3
    vital: Optional[VitalModel] = None
    trajectory: Optional[Trajectory] = None

    def __post_init__(self):
        for v in (self.position, self.velocity, self.acceleration):
            if not np.all(np.isfinite(np.asarray(v, dtype=float))):
                raise SceneError("non-finite target kinematics")

    def kinematics(self, t):
        """(position, velocity) arrays of shape (N, 2), before vital motion."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.trajectory is not None:
            return self.trajectory.state(t)
        p0 = np.asarray(self.position, float)
        v0 = np.asarray(self.velocity, float)
        a0 = np.asarray(self.acceleration, float)
        tt = t[:, None]
        return p0 + v0 * tt + 0.5 * a0 * tt**2, v0 + a0 * tt


@dataclass(frozen=True)
class StaticScatterer:
    position: tuple
    gain: complex = 0.2


@dataclass(frozen=True)
class Scene:
    tx_position: tuple = (0.0, 0.0)
    rx_position: tuple = (2.2, 0.0)
    targets: tuple = ()
    static_scatterers: tuple = ()
    duration: float = 10.0
    rx_normal: float = math.pi / 2  # broadside direction (rad, world frame)
    tx_normal: float = math.pi / 2
    los_gain: complex = 1.0

    def __post_init__(self):
        if np.allclose(self.tx_position, self.rx_position):
            raise SceneError("tx and rx positions coincide")
        if not self.duration > 0:
            raise SceneError("duration must be positive")

    @property
    def baseline(self) -> float:
        return float(np.hypot(*np.subtract(self.rx_position, self.tx_position)))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def _fold_angle(angle):
    # linear arrays only see sin(theta); fold back-lobe directions into [-pi/2, pi/2]
    return np.arcsin(np.clip(np.sin(angle), -1.0, 1.0))


def arrival_angle(points, rx, rx_normal):
    """AoA at the rx broadside for points of shape (N, 2)."""
    d = np.atleast_2d(points) - np.asarray(rx, float)
    return _fold_angle(np.arctan2(d[:, 1], d[:, 0]) - rx_normal)


def bistatic_range(points, tx, rx):
    """|tx - p| + |p - rx| for points of shape (N, 2)."""
    p = np.atleast_2d(points)
    return np.hypot(*(p - np.asarray(tx, float)).T) + np.hypot(*(p - np.asarray(rx, float)).T)


def bisector(points, tx, rx):
    """Unit vector along the sum of the directions from p toward tx and rx."""
    p = np.atleast_2d(points)
    u1 = np.asarray(tx, float) - p
    u2 = np.asarray(rx, float) - p
    u = u1 / np.hypot(*u1.T)[:, None] + u2 / np.hypot(*u2.T)[:, None]
    n = np.hypot(*u.T)[:, None]
    return np.where(n > 0, u / np.where(n > 0, n, 1.0), 0.0)


def apply_vitals(target: TargetState, t, tx, rx):
    """Chest-displaced position(s) of ``target`` at time(s) ``t``.

    The displacement acts along the bistatic bisector of the undisplaced point.
    """
    pos, _ = target.kinematics(t)
    if target.vital is None:
        return pos
    disp = target.vital.displacement(np.atleast_1d(t))
    return pos + disp[:, None] * bisector(pos, tx, rx)


def _target_tracks(scene: Scene, target: TargetState, t, wavelength):
    """Per-time delay, doppler, aoa, aod and bistatic range of a target path."""
    tx = np.asarray(scene.tx_position, float)
    rx = np.asarray(scene.rx_position, float)
    pos, vel = target.kinematics(t)
    if target.vital is not None:
        b = bisector(pos, tx, rx)
        pos = pos + target.vital.displacement(np.atleast_1d(t))[:, None] * b
        vel = vel + target.vital.displacement_rate(np.atleast_1d(t))[:, None] * b
    d1 = np.hypot(*(pos - tx).T)
    d2 = np.hypot(*(pos - rx).T)
    if np.any(d1 < 1e-9) or np.any(d2 < 1e-9):
        raise SceneError("target coincides with tx or rx")
    u1 = (pos - tx) / d1[:, None]
    u2 = (pos - rx) / d2[:, None]
    rate = np.sum((u1 + u2) * vel, axis=1)
    dist = d1 + d2
    delay = (dist - scene.baseline) / SPEED_OF_LIGHT
    doppler = -rate / wavelength
    aoa = arrival_angle(pos, rx, scene.rx_normal)
    aod = arrival_angle(pos, tx, scene.tx_normal)
    return delay, doppler, aoa, aod, dist


def _los_angles(scene: Scene):
    aoa = arrival_angle(np.asarray(scene.tx_position, float), scene.rx_position, scene.rx_normal)[0]
    aod = arrival_angle(np.asarray(scene.rx_position, float), scene.tx_position, scene.tx_normal)[0]
    return float(aoa), float(aod)


def _path_gain(reflect_gain, dist, baseline):
    # amplitude falls with bistatic range relative to the LOS leg
    return complex(reflect_gain) * baseline / dist


def scene_to_paths(scene: Scene, t: float, waveform: WaveformConfig = WaveformConfig()) -> list[PathComponent]:
    """Instantaneous propagation paths: LOS first, then targets, then scatterers."""
    if not 0.0 <= t <= scene.duration:
        raise SceneError(f"t={t} outside scene duration")
    aoa, aod = _los_angles(scene)
    paths = [PathComponent(0.0, 0.0, aoa, aod, complex(scene.los_gain))]
    for tgt in scene.targets:
        delay, dop, aa, ad, dist = _target_tracks(scene, tgt, t, waveform.wavelength)
        paths.append(
            PathComponent(
                float(max(delay[0], 0.0)), float(dop[0]), float(aa[0]), float(ad[0]),
                _path_gain(tgt.reflect_gain, dist[0], scene.baseline),
            )
        )
    paths.extend(_static_path(scene, sc) for sc in scene.static_scatterers)
    return paths


def _static_path(scene: Scene, sc: StaticScatterer) -> PathComponent:
    p = np.asarray(sc.position, float)[None]
    dist = bistatic_range(p, scene.tx_position, scene.rx_position)[0]
    return PathComponent(
        float(max((dist - scene.baseline) / SPEED_OF_LIGHT, 0.0)), 0.0,
        float(arrival_angle(p, scene.rx_position, scene.rx_normal)[0]),
        float(arrival_angle(p, scene.tx_position, scene.tx_normal)[0]),
        _path_gain(sc.gain, dist, scene.baseline),
    )


@dataclass
class GroundTruth:
    """Per-target time series of path parameters."""

    times: np.ndarray
    delay: np.ndarray  # (n_targets, N)
    doppler: np.ndarray
    aoa: np.ndarray
    position: np.ndarray  # (n_targets, N, 2)
    velocity: np.ndarray
    amplitude: np.ndarray  # (n_targets, N) path amplitude |rho|

    def dominant(self, target: int, doppler_axis, weights=None):
        """Energy-dominant Doppler bin of ``target`` and its mean delay/AoA.

        Every sample votes for the Doppler bin nearest its instantaneous
        Doppler with weight ``weights * amplitude**2``.  Delay and AoA are
        averaged over the samples within one bin of the winner, so a window
        that straddles an abrupt turn is judged against the segment that
        dominates its energy.

        Returns
        -------
        doppler, delay, aoa : float
        """
        ax = np.asarray(doppler_axis, float)
        w = np.ones(len(self.times)) if weights is None else np.asarray(weights, float)
        w = w * self.amplitude[target] ** 2
        idx = np.abs(ax[:, None] - self.doppler[target][None]).argmin(axis=0)
        b = int(np.bincount(idx, weights=w, minlength=len(ax)).argmax())
        sel = np.abs(idx - b) <= 1
        aoa = np.arcsin(np.average(np.sin(self.aoa[target][sel]), weights=w[sel]))
        return float(ax[b]), float(np.average(self.delay[target][sel], weights=w[sel])), float(aoa)


def ground_truth(scene: Scene, times, waveform: WaveformConfig = WaveformConfig()) -> GroundTruth:
    times = np.atleast_1d(np.asarray(times, dtype=float))
    n = len(scene.targets)
    out = {k: np.zeros((n, len(times))) for k in ("delay", "doppler", "aoa")}
    pos = np.zeros((n, len(times), 2))
    vel = np.zeros((n, len(times), 2))
    amp = np.zeros((n, len(times)))
    for i, tgt in enumerate(scene.targets):
        d, f, a, _, dist = _target_tracks(scene, tgt, times, waveform.wavelength)
        out["delay"][i], out["doppler"][i], out["aoa"][i] = d, f, a
        pos[i], vel[i] = tgt.kinematics(times)
        amp[i] = np.abs(tgt.reflect_gain) * scene.baseline / dist
    return GroundTruth(times, out["delay"], out["doppler"], out["aoa"], pos, vel, amp)


# ---------------------------------------------------------------------------
# CFR synthesis
# ---------------------------------------------------------------------------


@dataclass
class CfrTensor:
    """Complex CFR indexed (tx antenna, rx antenna, subcarrier, symbol)."""

    values: np.ndarray
    waveform: WaveformConfig
    array: ArrayConfig
    seed: Optional[int] = None
    start_time: float = 0.0

    @property
    def shape(self):
        return self.values.shape

    @property
    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.values.shape[-1]) * self.waveform.symbol_interval


def _prefactor(imp: ImpairmentState, waveform: WaveformConfig, k0: int, k1: int):
    """Common phase-offset prefactor, shape (n_tx, n_rx, J, k1-k0)."""
    df = waveform.subcarrier_offsets
    k = np.arange(k0, k1)
    phase = 2 * np.pi * (
        df[:, None] * imp.timing_offset[None, k0:k1] + imp.cfo * k[None, :] * waveform.symbol_interval
    )
    common = imp.agc_gain[None, k0:k1] * np.exp(-1j * phase)
    return common[None, None] * np.exp(-1j * imp.hw_phase)[:, :, None, None]


def _synthesize(delays, dop_cycles, aoas, aods, gains, waveform, array, imp, chunk=2048):
    """Evaluate the channel model for per-symbol path parameters of shape (K, L)."""
    K, _ = delays.shape
    J = waveform.num_subcarriers
    df = waveform.subcarrier_offsets
    dt_sp, dr_sp = array.spacings(waveform)
    kwave = waveform.carrier_frequency / waveform.propagation_speed
    i_r = np.arange(array.num_rx)
    i_t = np.arange(array.num_tx)
    out = np.empty((array.num_tx, array.num_rx, J, K), dtype=complex)
    for k0 in range(0, K, chunk):
        k1 = min(K, k0 + chunk)
        sl = slice(k0, k1)
        base = gains[sl] * np.exp(-2j * np.pi * dop_cycles[sl])  # (k, L)
        aoa_f = np.exp(-2j * np.pi * kwave * dr_sp * i_r[:, None, None] * np.sin(aoas[sl])[None])  # (r,k,L)
        aod_f = np.exp(-2j * np.pi * kwave * dt_sp * i_t[:, None, None] * np.sin(aods[sl])[None])  # (t,k,L)
        delay_f = np.exp(-2j * np.pi * df[:, None, None] * delays[sl][None])  # (J,k,L)
        paths = np.einsum("kl,rkl,tkl,jkl->trjk", base, aoa_f, aod_f, delay_f, optimize=True)
        out[..., sl] = paths * _prefactor(imp, waveform, k0, k1)
    return out


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(np.asarray(a))):
            raise SceneError("NaN or Inf in synthesis parameters")


def synthesize_cfr(
    paths: Sequence[PathComponent],
    waveform: WaveformConfig,
    array: ArrayConfig,
    impairments: Optional[ImpairmentState] = None,
    num_symbols: int = 1,
) -> CfrTensor:
    """CFR for fixed (constant-Doppler) paths over ``num_symbols`` snapshots."""
    if not paths:
        raise SceneError("at least one path is required")
    if num_symbols < 1:
        raise SceneError("num_symbols must be >= 1")
    if impairments is None:
        impairments = ImpairmentState.disabled(array, num_symbols)
    _check_finite(impairments.agc_gain, impairments.timing_offset, impairments.cfo, impairments.hw_phase)
    k = np.arange(num_symbols)[:, None]
    delays = np.array([p.delay for p in paths])[None].repeat(num_symbols, 0)
    dop = np.array([p.doppler for p in paths])[None] * k * waveform.symbol_interval
    aoas = np.array([p.aoa for p in paths])[None].repeat(num_symbols, 0)
    aods = np.array([p.aod for p in paths])[None].repeat(num_symbols, 0)
    gains = np.array([p.gain for p in paths], dtype=complex)[None].repeat(num_symbols, 0)
    _check_finite(delays, dop, aoas, aods, gains)
    values = _synthesize(delays, dop, aoas, aods, gains, waveform, array, impairments)
    return CfrTensor(values, waveform, array, seed=impairments.rng_seed)


def simulate(
    scene: Scene,
    waveform: WaveformConfig,
    array: ArrayConfig,
    impairments: ImpairmentConfig = ImpairmentConfig(),
    snr_db: Optional[float] = None,
    num_symbols: Optional[int] = None,
) -> CfrTensor:
    """Synthesize the CFR of a time-varying scene.

    Paths are re-evaluated at every snapshot; the Doppler phase of each path
    is the exact integral of its instantaneous Doppler, so range migration and
    chest motion are reproduced.  ``snr_db`` adds complex white noise relative
    to the mean CFR power.
    """
    if num_symbols is None:
        num_symbols = int(round(scene.duration / waveform.symbol_interval))
    t = np.arange(num_symbols) * waveform.symbol_interval
    lam = waveform.wavelength
    L = 1 + len(scene.targets) + len(scene.static_scatterers)
    delays = np.zeros((num_symbols, L))
    cycles = np.zeros((num_symbols, L))
    aoas = np.zeros((num_symbols, L))
    aods = np.zeros((num_symbols, L))
    gains = np.zeros((num_symbols, L), dtype=complex)
    aoas[:, 0], aods[:, 0] = _los_angles(scene)
    gains[:, 0] = complex(scene.los_gain)
    for i, tgt in enumerate(scene.targets, start=1):
        d, _, a, ad, dist = _target_tracks(scene, tgt, t, lam)
        delays[:, i] = np.maximum(d, 0.0)
        cycles[:, i] = -(dist - dist[0]) / lam
        aoas[:, i], aods[:, i] = a, ad
        gains[:, i] = _path_gain(tgt.reflect_gain, dist, scene.baseline)
    for i, sc in enumerate(scene.static_scatterers, start=1 + len(scene.targets)):
        path = _static_path(scene, sc)
        delays[:, i], aoas[:, i], aods[:, i], gains[:, i] = path.delay, path.aoa, path.aod, path.gain
    imp = draw_impairments(impairments, waveform, array, num_symbols)
    values = _synthesize(delays, cycles, aoas, aods, gains, waveform, array, imp)
    if snr_db is not None:
        values = add_noise(values, snr_db, np.random.default_rng([impairments.seed, 1]))
    return CfrTensor(values, waveform, array, seed=impairments.seed)


def add_noise(values: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    power = np.vdot(values, values).real / values.size
    sigma = np.sqrt(power / 10 ** (snr_db / 10) / 2)
    # one draw of interleaved (re, im) pairs viewed as complex
    noise = rng.standard_normal(values.shape + (2,)).view(np.complex128)[..., 0]
    noise *= sigma
    return values + noise
