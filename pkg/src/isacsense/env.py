"""Environmental inference from link-level metrics.

* rain: power-law specific attenuation ``A = a R**b`` and its inverse;
* soil: excess phase through a dielectric layer and normal-incidence
  reflectivity;
* water level: ordinary least squares on per-carrier RSRP;
* RSSI scatter shift between two snapshots of the same cells.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import linalg

from .scene import SPEED_OF_LIGHT


class EnvError(ValueError):
    pass


class DomainError(EnvError):
    pass


class CollinearityError(EnvError):
    def __init__(self, carriers: Sequence[str]):
        self.carriers = list(carriers)
        super().__init__(f"design matrix rank-deficient; collinear carriers: {', '.join(self.carriers)}")


class MaskedFeatureError(EnvError):
    pass


# ---------------------------------------------------------------------------
# rain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RainModel:
    a: float  # dB/km per (mm/h)**b
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and np.isfinite(self.a) and np.isfinite(self.b)):
            raise DomainError("rain model needs a > 0 and b > 0")


def rain_attenuation(rate_mm_h, model: RainModel):
    """Specific attenuation in dB/km."""
    R = np.asarray(rate_mm_h, float)
    if np.any(R < 0) or np.any(np.isnan(R)):
        raise DomainError("rain rate must be non-negative")
    out = model.a * np.power(R, model.b)
    return float(out) if out.ndim == 0 else out


def rain_rate(attenuation_db_km, model: RainModel):
    """Inverse power law, mm/h."""
    A = np.asarray(attenuation_db_km, float)
    if np.any(A < 0) or np.any(np.isnan(A)):
        raise DomainError("attenuation must be non-negative")
    out = np.power(A / model.a, 1.0 / model.b)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# soil
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SoilModel:
    permittivity: float

    def __post_init__(self):
        _check_permittivity(self.permittivity)


def _check_permittivity(eps):
    e = np.asarray(eps, float)
    if np.any(~(e >= 1)):
        raise DomainError("relative permittivity must be >= 1")
    return e


def soil_phase_shift(permittivity, path_length_m: float, frequency_hz: float):
    """Excess phase over vacuum, ``2 pi f L (sqrt(eps) - 1) / c`` radians."""
    e = _check_permittivity(permittivity)
    if path_length_m <= 0 or frequency_hz <= 0:
        raise DomainError("path length and frequency must be positive")
    out = 2 * np.pi * frequency_hz * path_length_m * (np.sqrt(e) - 1.0) / SPEED_OF_LIGHT
    return float(out) if out.ndim == 0 else out


def soil_reflectivity(permittivity):
    """Normal-incidence power reflectivity ``((sqrt(eps) - 1) / (sqrt(eps) + 1))**2``."""
    n = np.sqrt(_check_permittivity(permittivity))
    out = ((n - 1.0) / (n + 1.0)) ** 2
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# link logs and water level
# ---------------------------------------------------------------------------


@dataclass
class LinkLog:
    """Per-carrier link metrics on a common time base; NaN marks a missing sample."""

    timestamps: np.ndarray  # s (POSIX)
    features: np.ndarray  # (N, C) dBm
    carriers: list
    level_cm: Optional[np.ndarray] = None
    rain_mm_h: Optional[np.ndarray] = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, float)
        self.features = np.atleast_2d(np.asarray(self.features, float))
        if self.features.shape != (len(self.timestamps), len(self.carriers)):
            raise EnvError(
                f"feature matrix {self.features.shape} does not match "
                f"{len(self.timestamps)} rows x {len(self.carriers)} carriers"
            )
        if np.any(np.diff(self.timestamps) <= 0):
            raise EnvError("timestamps must be strictly increasing")
        for name in ("level_cm", "rain_mm_h"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, float)
                if v.shape != self.timestamps.shape:
                    raise EnvError(f"{name} length mismatch")
                setattr(self, name, v)

    def __len__(self):
        return len(self.timestamps)

    @property
    def mask(self) -> np.ndarray:
        """True where a feature sample is missing."""
        return np.isnan(self.features)

    def subset(self, rows) -> "LinkLog":
        pick = lambda v: None if v is None else v[rows]
        return LinkLog(self.timestamps[rows], self.features[rows], list(self.carriers),
                       pick(self.level_cm), pick(self.rain_mm_h))


def forward_fill(log: LinkLog, max_gap: int = 3) -> LinkLog:
    """Carry each carrier's last value over at most ``max_gap`` missing intervals.

    Longer gaps stay NaN, which masks the affected rows downstream.
    """
    X = log.features.copy()
    for c in range(X.shape[1]):
        last, run = np.nan, 0
        for i in range(X.shape[0]):
            if np.isnan(X[i, c]):
                run += 1
                if run <= max_gap and not np.isnan(last):
                    X[i, c] = last
            else:
                last, run = X[i, c], 0
    return LinkLog(log.timestamps, X, list(log.carriers), log.level_cm, log.rain_mm_h)


@dataclass
class WaterModel:
    weights: np.ndarray
    bias: float  # cm
    carriers: list
    training_window: tuple  # (start, end) s
    training_rmse: float = float("nan")
    feature_mean: Optional[np.ndarray] = None  # set when fitted on z-scored features
    feature_std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, float)
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)):
            raise EnvError("water model coefficients must be finite")

    def to_json(self) -> str:
        d = asdict(self)
        for k in ("weights", "feature_mean", "feature_std"):
            if d[k] is not None:
                d[k] = np.asarray(d[k]).tolist()
        d["training_window"] = list(self.training_window)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "WaterModel":
        d = json.loads(text)
        d["training_window"] = tuple(d["training_window"])
        for k in ("feature_mean", "feature_std"):
            if d.get(k) is not None:
                d[k] = np.asarray(d[k], float)
        return cls(**d)


def _check_rank(A: np.ndarray, names: Sequence[str]):
    """Raise naming the columns a pivoted QR leaves outside the numerical rank."""
    _, R, piv = linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(A.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < A.shape[1]:
        raise CollinearityError([names[i] for i in sorted(piv[rank:])])


def fit_water_level(
    log: LinkLog,
    training_span: Optional[tuple] = None,
    standardize: bool = False,
) -> WaterModel:
    """OLS of water level on ``[features | 1]``.

    ``training_span`` is ``(start, end)`` in log seconds (end exclusive);
    ``None`` uses every row.  Rows with a missing feature or level are skipped.
    """
    if log.level_cm is None:
        raise EnvError("log has no water-level ground truth")
    t = log.timestamps
    lo, hi = (t[0], t[-1] + 1.0) if training_span is None else training_span
    rows = (t >= lo) & (t < hi) & ~log.mask.any(axis=1) & np.isfinite(log.level_cm)
    X, y = log.features[rows], log.level_cm[rows]
    if len(y) < X.shape[1] + 1:
        raise EnvError(f"{len(y)} usable training rows for {X.shape[1]} features")
    mu = sd = None
    if standardize:
        mu, sd = X.mean(axis=0), X.std(axis=0)
        if np.any(sd == 0):
            raise CollinearityError([c for c, s in zip(log.carriers, sd) if s == 0])
        X = (X - mu) / sd
    A = np.column_stack([X, np.ones(len(y))])
    _check_rank(A, list(log.carriers) + ["bias"])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    rmse = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return WaterModel(coef[:-1], float(coef[-1]), list(log.carriers), (float(lo), float(hi)), rmse, mu, sd)


def predict_water_level(model: WaterModel, features, impute: Optional[str] = None) -> np.ndarray:
    """Water level (cm) for a feature matrix or a :class:`LinkLog`.

    ``impute="ffill"`` forward-fills short gaps of a LinkLog first; any
    remaining NaN raises :class:`MaskedFeatureError`.
    """
    if isinstance(features, LinkLog):
        if list(features.carriers) != list(model.carriers):
            raise EnvError("log carriers differ from the model's")
        if impute == "ffill":
            features = forward_fill(features)
        X = features.features
    else:
        X = np.atleast_2d(np.asarray(features, float))
    if X.shape[1] != len(model.weights):
        raise EnvError(f"{X.shape[1]} features given, model expects {len(model.weights)}")
    if np.any(np.isnan(X)):
        raise MaskedFeatureError("masked feature samples and no imputation policy")
    if model.feature_mean is not None:
        X = (X - model.feature_mean) / model.feature_std
    return X @ model.weights + model.bias


def rmse(pred, truth) -> float:
    d = np.asarray(pred, float) - np.asarray(truth, float)
    return float(np.sqrt(np.mean(d**2)))


def noise_floor(sensitivity, noise_std, level_std: Optional[float] = None) -> float:
    """RMSE of the best linear level estimate from features ``m * level + noise``.

    With ``level_std`` the prior variance of the level is included (Wiener
    form), which is what a regression fitted on representative data targets.
    """
    m = np.asarray(sensitivity, float)
    s = np.broadcast_to(np.asarray(noise_std, float), m.shape)
    info = np.sum(m**2 / s**2)
    if level_std:
        info += 1.0 / level_std**2
    return float(1.0 / np.sqrt(info))


DEFAULT_CARRIERS = ["B1_C1", "B1_C2", "B3_C1", "B3_C2", "B5_C1", "B28_C1", "B28_C2"]


def synthetic_tide_log(
    hours: float = 24.0,
    cadence_s: float = 600.0,
    carriers: Sequence[str] = DEFAULT_CARRIERS,
    amplitude_cm: float = 60.0,
    period_h: float = 12.0,
    mean_level_cm: float = 150.0,
    sensitivity=None,
    offsets_dbm=None,
    noise_db: float = 1.0,
    seed: int = 0,
    start: float = 0.0,
) -> tuple[LinkLog, np.ndarray]:
    """Sinusoidal tide with RSRP features linear in the level plus white noise.

    Returns the log and the per-carrier sensitivities (dB/cm) used.
    """
    rng = np.random.default_rng(seed)
    n = int(round(hours * 3600 / cadence_s))
    t = start + np.arange(n) * cadence_s
    level = mean_level_cm + amplitude_cm * np.sin(2 * np.pi * (t - start) / (period_h * 3600))
    C = len(carriers)
    m = rng.uniform(0.05, 0.15, C) * rng.choice([-1, 1], C) if sensitivity is None else np.asarray(sensitivity, float)
    off = rng.uniform(-110, -80, C) if offsets_dbm is None else np.asarray(offsets_dbm, float)
    X = off + np.outer(level - mean_level_cm, m) + noise_db * rng.standard_normal((n, C))
    return LinkLog(t, X, list(carriers), level), m


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat().replace("+00:00", "Z")


def _parse_iso(text: str) -> float:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


def write_link_log(log: LinkLog, path) -> None:
    extra = [k for k in ("level_cm", "rain_mm_h") if getattr(log, k) is not None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *log.carriers, *extra])
        for i, ts in enumerate(log.timestamps):
            row = [_iso(ts)] + [_fmt(v) for v in log.features[i]]
            row += [_fmt(getattr(log, k)[i]) for k in extra]
            w.writerow(row)


def read_link_log(path) -> LinkLog:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "timestamp":
        raise EnvError(f"{path}: first column must be 'timestamp'")
    header = rows[0]
    extra = {k: header.index(k) for k in ("level_cm", "rain_mm_h") if k in header}
    fcols = [i for i, h in enumerate(header[1:], start=1) if i not in extra.values()]
    body = rows[1:]
    ncol = len(header)
    ts = np.empty(len(body))
    vals = np.full((len(body), ncol), np.nan)
    for r, row in enumerate(body, start=2):
        if len(row) != ncol:
            raise EnvError(f"{path}: row {r} has {len(row)} columns, header has {ncol}")
        try:
            ts[r - 2] = _parse_iso(row[0])
        except ValueError as exc:
            raise EnvError(f"{path}: row {r} column 'timestamp': {exc}") from None
        for c in range(1, ncol):
            if row[c].strip():
                try:
                    vals[r - 2, c] = float(row[c])
                except ValueError:
                    raise EnvError(f"{path}: row {r} column {header[c]!r}: not a number: {row[c]!r}") from None
    try:
        return LinkLog(ts, vals[:, fcols], [header[i] for i in fcols],
                       vals[:, extra["level_cm"]] if "level_cm" in extra else None,
                       vals[:, extra["rain_mm_h"]] if "rain_mm_h" in extra else None)
    except EnvError as exc:
        raise EnvError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# RSSI scatter shift
# ---------------------------------------------------------------------------


@dataclass
class ShiftReport:
    displacement: dict  # cell -> b - a (dB)
    mean: float
    rms: float
    max_abs: float
    table: list = field(default_factory=list)  # (cell, a, b, displacement)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def rssi_shift(snapshot_a: Mapping, snapshot_b: Mapping) -> ShiftReport:
    """Per-cell displacement from the diagonal between two RSSI snapshots.

    Values may be scalars or sample arrays; arrays are reduced to their median.
    """
    a_cells, b_cells = set(snapshot_a), set(snapshot_b)
    if a_cells != b_cells:
        raise EnvError(
            "cell sets differ: only in a: %s; only in b: %s"
            % (sorted(map(str, a_cells - b_cells)), sorted(map(str, b_cells - a_cells)))
        )
    if not a_cells:
        raise EnvError("empty snapshots")
    table = []
    for cell in sorted(a_cells, key=str):
        a = float(np.median(np.asarray(snapshot_a[cell], float)))
        b = float(np.median(np.asarray(snapshot_b[cell], float)))
        table.append((cell, a, b, b - a))
    d = np.array([r[3] for r in table])
    return ShiftReport(
        {r[0]: r[3] for r in table}, float(d.mean()), float(np.sqrt(np.mean(d**2))),
        float(np.abs(d).max()), table,
    )
