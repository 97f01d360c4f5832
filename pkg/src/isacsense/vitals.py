"""Respiration and heartbeat rates from the residual phase at a static bin.

Processing chain:

1. pick the strongest low-Doppler (delay, aoa) bin away from the direct path;
2. beamform the cleaned series onto that bin and decimate to ~20 Hz;
3. remove the arc centre (the cleaned residual is offset by the subject's
   removed mean) and unwrap the phase;
4. difference, band-pass with a 512-tap linear-phase FIR, estimate the rate
   by FFT peak or MUSIC.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .clean import CleanedSeries
from .features import FeatureCube, delay_steering

RESP_BAND = (0.1, 0.5)
HEART_BAND = (0.8, 2.0)


class VitalError(ValueError):
    pass


class NoSubjectError(VitalError):
    pass


class BandError(VitalError):
    pass


@dataclass
class PhaseSeries:
    phase: np.ndarray  # rad, unwrapped
    sample_rate: float
    source_bin: tuple = ()  # (doppler, delay, aoa) indices; doppler may be None
    start_time: float = 0.0

    def __post_init__(self):
        self.phase = np.asarray(self.phase, float)
        if self.phase.ndim != 1 or not np.all(np.isfinite(self.phase)):
            raise VitalError("phase must be a finite 1-D series")
        if self.sample_rate <= 0:
            raise VitalError("sample_rate must be positive")

    @property
    def times(self) -> np.ndarray:
        return self.start_time + np.arange(len(self.phase)) / self.sample_rate

    @classmethod
    def from_complex(
        cls, z: np.ndarray, sample_rate: float, centre: str = "fit", **kw
    ) -> "PhaseSeries":
        """Unwrapped phase of ``z`` about a centre.

        ``centre`` is ``"fit"`` (algebraic circle fit), ``"mean"`` or ``"none"``.
        """
        z = np.asarray(z, complex)
        if centre == "fit":
            z = z - circle_centre(z)
        elif centre == "mean":
            z = z - z.mean()
        elif centre != "none":
            raise VitalError(f"unknown centre mode {centre!r}")
        return cls(np.unwrap(np.angle(z)), sample_rate, **kw)


@dataclass
class FilteredSeries:
    values: np.ndarray
    sample_rate: float
    group_delay: float  # s
    valid_from: int  # first sample past the filter transient
    band: tuple

    @property
    def valid(self) -> np.ndarray:
        return self.values[self.valid_from:]


@dataclass
class RateEstimate:
    rate: float  # per minute
    confidence: float  # dB, peak over in-band median
    low_confidence: bool
    method: str


@dataclass
class VitalEstimate:
    resp: RateEstimate
    heart: RateEstimate
    resp_waveform: FilteredSeries
    heart_waveform: FilteredSeries
    source_bin: tuple = ()
    flags: list = field(default_factory=list)

    @property
    def resp_rate(self) -> float:
        return self.resp.rate

    @property
    def heart_rate(self) -> float:
        return self.heart.rate


def circle_centre(z: np.ndarray) -> complex:
    """Least-squares (Kasa) circle centre of points ``z`` in the complex plane."""
    x, y = z.real, z.imag
    A = np.column_stack([x, y, np.ones_like(x)])
    b = -(x**2 + y**2)
    (D, E, _), *_ = np.linalg.lstsq(A, b, rcond=None)
    return complex(-D / 2, -E / 2)


# ---------------------------------------------------------------------------
# bin selection and extraction
# ---------------------------------------------------------------------------


def select_static_bin(
    cubes: Sequence[FeatureCube],
    low_cutoff: float = 0.5,
    min_delay: Optional[float] = None,
    min_snr_db: float = 10.0,
    noise_cutoff: float = 2.0,
) -> tuple[int, int]:
    """(delay, aoa) bin of the strongest low-velocity reflection.

    Power is summed over cubes and over Doppler bins with ``|f| <= low_cutoff``.
    Delays below ``min_delay`` (default: one delay-grid step, i.e. the direct
    path bin) are excluded.  The candidate must exceed the noise floor,
    estimated as the median over ``|f| >= noise_cutoff`` Doppler bins of the
    per-bin maximum, by ``min_snr_db``.
    """
    cubes = list(cubes)
    if not cubes:
        raise NoSubjectError("no cubes given")
    ax = cubes[0].doppler_axis
    low = np.abs(ax) <= low_cutoff
    high = np.abs(ax) >= noise_cutoff
    if not low.any() or not high.any():
        raise VitalError("Doppler axis too narrow for static-bin selection")
    P = sum(c.power for c in cubes) / len(cubes)
    delays = cubes[0].delay_axis
    if min_delay is None:
        min_delay = delays[1] - delays[0] if len(delays) > 1 else 0.0
    cand = P[low].sum(axis=0)  # (delay, aoa)
    cand[delays < min_delay] = 0.0
    g, a = np.unravel_index(np.argmax(cand), cand.shape)
    floor = np.median(P[high].max(axis=(1, 2))) * low.sum()
    if not cand[g, a] > floor * 10 ** (min_snr_db / 10):
        raise NoSubjectError("no low-velocity reflection above the noise floor")
    return int(g), int(a)


def bin_series(
    cleaned: CleanedSeries, delay: float, aoa: float, decimate_to: float = 20.0
) -> tuple[np.ndarray, float]:
    """Complex time series at (delay, aoa), decimated to about ``decimate_to`` Hz.

    Delay uses the matched steering vector; AoA the same spatial steering as
    the cube's AoA transform.  Returns the series and its sample rate.
    """
    wf = cleaned.waveform
    a = delay_steering(wf.subcarrier_offsets, np.array([delay]))[:, 0]
    x = np.einsum("j,cjk->ck", a.conj(), cleaned.values) / len(a)
    pos = cleaned.channel_positions
    if pos is not None and len(pos) > 1:
        _, spacing = cleaned.array.spacings(wf)
        steer = np.exp(2j * np.pi * (spacing / wf.wavelength) * np.asarray(pos, float) * np.sin(aoa))
        x = steer @ x / len(pos)
    else:
        x = x.sum(axis=0)
    fs = 1.0 / wf.symbol_interval
    q = max(1, int(round(fs / decimate_to)))
    if q > 1:
        x = signal.resample_poly(x, 1, q)
    return x, fs / q


def refine_bin(
    cleaned: CleanedSeries, cube: FeatureCube, delay_idx: int, aoa_idx: int, span: tuple = (2, 1)
) -> tuple[int, int]:
    """Re-pick the bin among neighbours by the variance of its beamformed series.

    Interpretation of an extra per-dimension reselection: each neighbour's
    residual series is formed independently and the most energetic wins.
    """
    best, arg = -1.0, (delay_idx, aoa_idx)
    G, A = len(cube.delay_axis), len(cube.aoa_axis)
    for g in range(max(0, delay_idx - span[0]), min(G, delay_idx + span[0] + 1)):
        for a in range(max(0, aoa_idx - span[1]), min(A, aoa_idx + span[1] + 1)):
            z, _ = bin_series(cleaned, cube.delay_axis[g], cube.aoa_axis[a])
            v = float(np.var(z))
            if v > best:
                best, arg = v, (g, a)
    return arg


# ---------------------------------------------------------------------------
# filtering and rate estimation
# ---------------------------------------------------------------------------


def phase_difference(series: PhaseSeries) -> PhaseSeries:
    """First difference of the unwrapped phase (length preserved, first sample 0)."""
    if len(series.phase) < 2:
        raise VitalError("phase differencing needs >= 2 samples")
    d = np.diff(np.unwrap(series.phase), prepend=series.phase[0])
    return PhaseSeries(d, series.sample_rate, series.source_bin, series.start_time)


def design_bandpass(low: float, high: float, fs: float, numtaps: int = 512) -> np.ndarray:
    if not (0 <= low < high < fs / 2):
        raise BandError(f"band ({low}, {high}) Hz outside (0, {fs / 2}) Hz")
    if low == 0:
        return signal.firwin(numtaps, high, fs=fs)
    return signal.firwin(numtaps, (low, high), pass_zero=False, fs=fs)


def bandpass(
    series: PhaseSeries | np.ndarray, low: float, high: float, fs: Optional[float] = None, numtaps: int = 512
) -> FilteredSeries:
    """Forward-only linear-phase FIR band-pass (low-pass when ``low == 0``)."""
    if isinstance(series, PhaseSeries):
        x, fs = series.phase, series.sample_rate
    else:
        x = np.asarray(series, float)
        if fs is None:
            raise BandError("sample rate required for raw arrays")
    h = design_bandpass(low, high, fs, numtaps)
    y = signal.lfilter(h, 1.0, x)
    return FilteredSeries(y, fs, (numtaps - 1) / 2 / fs, numtaps - 1, (low, high))


def smooth(series: FilteredSeries, seconds: float = 0.25) -> FilteredSeries:
    """Causal moving average; extends the transient by the window length."""
    n = max(1, int(round(seconds * series.sample_rate)))
    y = signal.lfilter(np.ones(n) / n, 1.0, series.values)
    return FilteredSeries(
        y, series.sample_rate, series.group_delay + (n - 1) / 2 / series.sample_rate,
        series.valid_from + n - 1, series.band,
    )


def _confidence(spec: np.ndarray) -> float:
    med = np.median(spec)
    return float(10 * np.log10(spec.max() / med)) if med > 0 else np.inf


def music_spectrum(x: np.ndarray, freqs: np.ndarray, fs: float, order: int = 2, m: Optional[int] = None) -> np.ndarray:
    """MUSIC pseudospectrum of a real series from its forward-backward covariance."""
    x = np.asarray(x, float) - np.mean(x)
    n = len(x)
    if m is None:
        m = min(n // 3, max(4 * order, int(round(4 * fs / max(freqs.min(), 1e-3)))), 256)
    if m <= order:
        raise VitalError("series too short for MUSIC")
    X = np.lib.stride_tricks.sliding_window_view(x, m)
    R = X.T @ X / len(X)
    J = np.eye(m)[::-1]
    R = 0.5 * (R + J @ R @ J)
    _, V = np.linalg.eigh(R)  # ascending
    En = V[:, : m - order]
    k = np.arange(m)
    A = np.exp(2j * np.pi * np.outer(k, freqs) / fs)
    return 1.0 / np.sum(np.abs(En.T @ A) ** 2, axis=0)


def estimate_rate(
    series: FilteredSeries | np.ndarray,
    band: tuple,
    method: str = "fft",
    fs: Optional[float] = None,
    pad: int = 16,
    min_confidence_db: float = 6.0,
) -> RateEstimate:
    """Dominant in-band frequency, per minute."""
    if isinstance(series, FilteredSeries):
        x, fs = series.valid, series.sample_rate
    else:
        x = np.asarray(series, float)
        if fs is None:
            raise BandError("sample rate required for raw arrays")
    lo, hi = band
    if len(x) / fs < 3.0 / max(lo, 1e-9) and lo > 0:
        raise VitalError(f"series of {len(x) / fs:.1f} s shorter than three periods of {lo} Hz")
    if method == "fft":
        n = int(2 ** np.ceil(np.log2(len(x) * pad)))
        w = signal.windows.hann(len(x), sym=False)
        S = np.abs(np.fft.rfft((x - x.mean()) * w, n)) ** 2
        f = np.fft.rfftfreq(n, 1 / fs)
    elif method == "music":
        f = np.linspace(lo, hi, 2000)
        S = music_spectrum(x, f, fs)
    else:
        raise VitalError(f"unknown rate method {method!r}")
    sel = (f >= lo) & (f <= hi)
    fb, Sb = f[sel], S[sel]
    conf = _confidence(Sb)
    return RateEstimate(float(fb[np.argmax(Sb)] * 60.0), conf, conf < min_confidence_db, method)


def estimate_vitals(
    z: np.ndarray,
    fs: float,
    resp_band: tuple = RESP_BAND,
    heart_band: tuple = HEART_BAND,
    method: str = "fft",
    numtaps: int = 512,
    heart_smoothing: float = 0.25,
    source_bin: tuple = (),
) -> VitalEstimate:
    """Rates from a complex bin series sampled at ``fs``."""
    ph = PhaseSeries.from_complex(z, fs, source_bin=source_bin)
    d = phase_difference(ph)
    resp_w = bandpass(d, *resp_band, numtaps=numtaps)
    heart_w = smooth(bandpass(d, *heart_band, numtaps=numtaps), heart_smoothing)
    resp = estimate_rate(resp_w, resp_band, method)
    heart = estimate_rate(heart_w, heart_band, method)
    flags = [name for name, r in (("resp", resp), ("heart", heart)) if r.low_confidence]
    return VitalEstimate(resp, heart, resp_w, heart_w, source_bin, flags)
