"""Doppler-Delay-AoA feature cubes from cleaned CSI.

Per window the processing order is fixed: static removal, Doppler FFT along
time, delay-domain MVDR across subcarriers (antenna channels are the
snapshots), then an AoA transform of the beamformed channel outputs.

Doppler sign convention: a component varying as ``exp(-j 2 pi f t)`` (the
Doppler factor of the channel model) lands at ``+f``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.signal import windows as sig_windows

from .clean import CleanedSeries


class FeatureError(ValueError):
    pass


class ResampleRequiredError(FeatureError):
    pass


class MvdrSingularError(FeatureError):
    pass


class NonlinearInputError(FeatureError):
    """Delay/AoA processing was asked of a nonlinear (ratio) cleaning output."""


MVDR_TOLERANCE = 1e-9


@dataclass(frozen=True)
class WindowConfig:
    length: float = 2.0
    step: float = 0.1
    doppler_bins: Optional[int] = None  # centred bins kept; None keeps all
    delay_grid: tuple = (0.0, 2e-6, 256)
    aoa_bins: int = 16
    loading: float = 1.0

    def __post_init__(self):
        if not 0 < self.step <= self.length:
            raise FeatureError("window step must be in (0, length]")
        if self.delay_grid[2] < 1 or self.aoa_bins < 1:
            raise FeatureError("grids must be non-empty")
        if self.doppler_bins is not None and self.doppler_bins < 1:
            raise FeatureError("doppler_bins must be positive")

    @property
    def doppler_resolution(self) -> float:
        return 1.0 / self.length

    def delay_axis(self) -> np.ndarray:
        lo, hi, n = self.delay_grid
        return np.linspace(lo, hi, int(n))


@dataclass
class FeatureCube:
    power: np.ndarray  # (doppler, delay, aoa)
    residual: np.ndarray  # complex beamformed value per bin
    doppler_axis: np.ndarray  # Hz
    delay_axis: np.ndarray  # s
    aoa_axis: np.ndarray  # rad
    window_timestamp: float
    delay_spectrum: Optional[np.ndarray] = None  # (doppler, delay) MVDR spectrum
    mvdr_error: float = 0.0  # max |w^H a - 1| over the grid

    @property
    def sin_axis(self) -> np.ndarray:
        return np.sin(self.aoa_axis)

    def heatmap(self) -> np.ndarray:
        """Doppler-AoA projection (max over delay)."""
        return self.power.max(axis=1)

    def argmax(self) -> tuple[int, int, int]:
        return tuple(int(i) for i in np.unravel_index(np.argmax(self.power), self.power.shape))

    def argmax_values(self) -> tuple[float, float, float]:
        d, g, a = self.argmax()
        return self.doppler_axis[d], self.delay_axis[g], self.aoa_axis[a]


@dataclass
class MicroDopplerGram:
    matrix: np.ndarray  # (doppler, window)
    doppler_axis: np.ndarray
    times: np.ndarray
    delay_index: np.ndarray  # per window
    aoa_index: np.ndarray


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def remove_static(x: np.ndarray) -> np.ndarray:
    """Subtract the temporal (last-axis) mean."""
    if x.shape[-1] < 2:
        raise FeatureError("static removal needs >= 2 symbols")
    return x - x.mean(axis=-1, keepdims=True)


def doppler_axis(n: int, interval: float) -> np.ndarray:
    return np.fft.fftshift(np.fft.fftfreq(n, interval))


def doppler_transform(
    x: np.ndarray,
    interval: float,
    keep: Optional[int] = None,
    timestamps: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Hann-tapered Doppler spectrum along the last axis.

    Scaled so that ``sum |X|^2 == sum |x w|^2 / mean(w^2)``.  Returns the
    spectrum (Doppler on the last axis, zero frequency centred) and the axis.
    """
    if timestamps is not None:
        dt = np.diff(np.asarray(timestamps, float))
        if dt.size and not np.allclose(dt, dt[0], rtol=1e-6, atol=0):
            raise ResampleRequiredError("non-uniform timestamps; resample before the Doppler FFT")
        interval = float(dt[0]) if dt.size else interval
    n = x.shape[-1]
    w = sig_windows.hann(n, sym=False) if n > 2 else np.ones(n)
    scale = np.sqrt(n * np.mean(w**2))
    X = np.fft.fftshift(np.fft.ifft(x * w, axis=-1), axes=-1) * (n / scale)
    axis = doppler_axis(n, interval)
    if keep is not None and keep < n:
        c = n // 2
        lo = c - keep // 2
        X = X[..., lo:lo + keep]
        axis = axis[lo:lo + keep]
    return X, axis


def delay_steering(subcarrier_offsets: np.ndarray, delays: np.ndarray) -> np.ndarray:
    """a_j(tau) = exp(-j 2 pi df_j tau), shape (J, G)."""
    return np.exp(-2j * np.pi * np.outer(subcarrier_offsets, delays))


def delay_mvdr(
    snapshots: np.ndarray,
    delays: np.ndarray,
    subcarrier_offsets: np.ndarray,
    loading: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, float]:
    """MVDR delay spectrum from channel snapshots.

    Parameters
    ----------
    snapshots : (..., C, J) complex
        Subcarrier vectors, one per channel (leading axes are batched).
    delays : (G,) candidate delays in seconds.

    Returns
    -------
    spectrum : (..., G)   1 / (a^H R^-1 a)
    weights : (..., J, G) R^-1 a / (a^H R^-1 a)
    max_error : float     max |w^H a - 1| over all grid points
    """
    Y = np.asarray(snapshots)
    batch = Y.shape[:-2]
    C, J = Y.shape[-2:]
    Y = Y.reshape(-1, C, J)
    A = delay_steering(subcarrier_offsets, delays)
    # R = B B^H + delta I with B = Y^T / sqrt(C); invert via Woodbury (rank C)
    B = np.swapaxes(Y, 1, 2) / np.sqrt(C)  # (N, J, C)
    trace = np.sum(np.abs(B) ** 2, axis=(1, 2))
    delta = loading * trace / J
    delta = np.where(delta > 0, delta, 1.0)
    if not np.all(np.isfinite(delta)):
        raise MvdrSingularError("non-finite covariance")
    BhB = np.einsum("njc,njd->ncd", B.conj(), B)
    inner = BhB + delta[:, None, None] * np.eye(C)[None]
    BhA = np.einsum("njc,jg->ncg", B.conj(), A)
    try:
        T = np.linalg.solve(inner, BhA)
    except np.linalg.LinAlgError as exc:
        raise MvdrSingularError(str(exc)) from exc
    Q = (A[None] - B @ T) / delta[:, None, None]  # R^-1 a, (N, J, G)
    denom = np.einsum("jg,njg->ng", A.conj(), Q)
    W = Q / denom[:, None, :]
    err = float(np.max(np.abs(np.einsum("njg,jg->ng", W.conj(), A) - 1.0))) if W.size else 0.0
    if err > MVDR_TOLERANCE:
        raise MvdrSingularError(f"distortionless constraint violated: {err:.3g}")
    spectrum = 1.0 / denom.real
    return spectrum.reshape(*batch, len(delays)), W.reshape(*batch, J, len(delays)), err


def aoa_grid(n: int) -> np.ndarray:
    """Uniform sin(theta) grid on [-1, 1]."""
    return np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)


def aoa_transform(
    beamformed: np.ndarray,
    positions: Optional[np.ndarray],
    spacing: float,
    wavelength: float,
    aoa_bins: int,
    linear: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Transform channel outputs (channel on axis -2) to an AoA spectrum.

    Returns the transformed values with the AoA axis last, and the AoA axis
    in radians.  Channel ``c`` sits at element index ``positions[c]``.
    """
    if not linear:
        raise NonlinearInputError("AoA estimation refused for a nonlinear (CSI ratio) input")
    if positions is None:
        raise NonlinearInputError("cleaned series declares no spatial channel map")
    positions = np.asarray(positions, float)
    if len(positions) < 2:
        s = np.zeros(1)
        return beamformed.sum(axis=-2)[..., None], s
    s = aoa_grid(aoa_bins)
    steer = np.exp(2j * np.pi * (spacing / wavelength) * np.outer(positions, s)) / len(positions)
    out = np.einsum("...cg,ca->...ga", beamformed, steer)
    return out, np.arcsin(s)


# ---------------------------------------------------------------------------
# cube assembly
# ---------------------------------------------------------------------------


def window_starts(num_symbols: int, interval: float, cfg: WindowConfig) -> np.ndarray:
    L = int(round(cfg.length / interval))
    S = int(round(cfg.step / interval))
    if num_symbols < L:
        raise FeatureError(f"series of {num_symbols} symbols shorter than one window ({L})")
    return np.arange(0, num_symbols - L + 1, S)


def cube_from_window(data: np.ndarray, cleaned: CleanedSeries, cfg: WindowConfig, timestamp: float) -> FeatureCube:
    """One cube from window data of shape (C, J, L)."""
    if not cleaned.linear:
        raise NonlinearInputError("delay/AoA processing refused for a nonlinear (CSI ratio) input")
    wf = cleaned.waveform
    x = remove_static(data)
    X, dop = doppler_transform(x, wf.symbol_interval, cfg.doppler_bins)  # (C, J, D)
    snaps = np.moveaxis(X, -1, 0)  # (D, C, J)
    delays = cfg.delay_axis()
    if delays.max() >= 1.0 / wf.subcarrier_spacing:
        raise FeatureError(
            f"delay grid reaches {delays.max():.3g} s, beyond the unambiguous {1 / wf.subcarrier_spacing:.3g} s"
        )
    spec, W, err = delay_mvdr(snaps, delays, wf.subcarrier_offsets, cfg.loading)
    beam = np.einsum("djg,dcj->dcg", W.conj(), snaps)  # (D, C, G)
    _, spacing = cleaned.array.spacings(wf)
    resid, aoa = aoa_transform(beam, cleaned.channel_positions, spacing, wf.wavelength, cfg.aoa_bins)
    return FeatureCube(
        power=np.abs(resid) ** 2,
        residual=resid,
        doppler_axis=dop,
        delay_axis=delays,
        aoa_axis=aoa,
        window_timestamp=timestamp,
        delay_spectrum=spec,
        mvdr_error=err,
    )


def iter_cubes(cleaned: CleanedSeries, cfg: WindowConfig, workers: int = 1) -> Iterator[FeatureCube]:
    """Lazily yield one cube per window position, in time order."""
    interval = cleaned.waveform.symbol_interval
    L = int(round(cfg.length / interval))
    starts = window_starts(cleaned.values.shape[-1], interval, cfg)

    def one(k0):
        ts = cleaned.start_time + (k0 + L / 2) * interval
        return cube_from_window(cleaned.values[..., k0:k0 + L], cleaned, cfg, ts)

    if workers <= 1:
        for k0 in starts:
            yield one(k0)
        return
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(workers) as pool:
        # map preserves order, so output is independent of the worker count
        yield from pool.map(one, starts)


def build_cube(cleaned: CleanedSeries, cfg: WindowConfig, workers: int = 1) -> list[FeatureCube]:
    return list(iter_cubes(cleaned, cfg, workers))


Selector = Union[tuple, Callable[[FeatureCube], tuple]]


def micro_doppler(cubes: Sequence[FeatureCube], selector: Selector) -> MicroDopplerGram:
    """Stack the Doppler profile at the selected (delay, aoa) bin of each cube."""
    cubes = list(cubes)
    if not cubes:
        raise FeatureError("micro_doppler needs at least one cube")
    cols, di, ai = [], [], []
    for cube in cubes:
        d, a = selector(cube) if callable(selector) else selector
        G, A = cube.power.shape[1:]
        if not (0 <= d < G and 0 <= a < A):
            raise FeatureError(f"selector bin ({d}, {a}) outside cube ({G}, {A})")
        cols.append(cube.power[:, d, a])
        di.append(d)
        ai.append(a)
    return MicroDopplerGram(
        np.stack(cols, axis=1), cubes[0].doppler_axis,
        np.array([c.window_timestamp for c in cubes]), np.array(di), np.array(ai),
    )


def peak_selector(cube: FeatureCube) -> tuple[int, int]:
    """(delay, aoa) bin of the strongest cell in the cube."""
    _, g, a = cube.argmax()
    return g, a
