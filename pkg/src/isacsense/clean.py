"""Random phase removal for bistatic CSI.

Four cleaners, all returning a :class:`CleanedSeries` indexed
(channel, subcarrier, symbol):

* ``cacc_raw`` - conjugate product with a reference antenna.
* ``cacc_variant`` - differential terms built from per-antenna static
  components, followed by a linear recombination that removes the Doppler
  mirror while keeping the output linear in the path components.
* ``casr`` - ratio of two antennas (nonlinear; not usable for delay/AoA).
* ``single_antenna_clean`` - reference phasor taken from the dominant
  delay tap of one antenna.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .scene import ArrayConfig, CfrTensor, WaveformConfig

log = logging.getLogger(__name__)

METHODS = ("cacc_raw", "cacc_variant", "casr", "single_antenna")


class CleaningError(ValueError):
    pass


class UnsupportedMethodError(CleaningError):
    """The array does not have enough antennas for the requested method."""


class DegradedReferenceError(CleaningError):
    pass


class UnreliableReferenceError(CleaningError):
    pass


@dataclass
class CsiSeries:
    values: np.ndarray  # (n_rx, J, K)
    waveform: WaveformConfig
    array: ArrayConfig
    start_time: float = 0.0

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or v.shape[0] != self.array.num_rx or v.shape[1] != self.waveform.num_subcarriers:
            raise CleaningError(f"CSI shape {v.shape} inconsistent with configs")

    @classmethod
    def from_cfr(cls, cfr: CfrTensor, tx: int = 0) -> "CsiSeries":
        return cls(cfr.values[tx], cfr.waveform, cfr.array, cfr.start_time)

    @property
    def num_rx(self) -> int:
        return self.values.shape[0]


@dataclass
class CleanedSeries:
    values: np.ndarray  # (C, J, K)
    method_tag: str
    reference_descriptor: str
    waveform: WaveformConfig
    array: ArrayConfig
    channel_positions: Optional[np.ndarray] = None  # antenna index per channel
    start_time: float = 0.0
    masked: int = 0

    def __post_init__(self):
        if self.method_tag not in METHODS:
            raise CleaningError(f"unknown method tag {self.method_tag!r}")
        if not np.all(np.isfinite(self.values)):
            raise CleaningError("cleaned series contains NaN/Inf")

    @property
    def linear(self) -> bool:
        """False for outputs that are nonlinear in the path components."""
        return self.method_tag != "casr"

    @property
    def num_channels(self) -> int:
        return self.values.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.values.shape[-1]) * self.waveform.symbol_interval

    def window(self, k0: int, k1: int) -> "CleanedSeries":
        t0 = self.start_time + k0 * self.waveform.symbol_interval
        return replace(self, values=self.values[..., k0:k1], start_time=t0)


def _require_rx(csi: CsiSeries, n: int, method: str):
    if csi.num_rx < n:
        raise UnsupportedMethodError(f"{method} needs at least {n} rx antennas, got {csi.num_rx}")


def cacc_raw(csi: CsiSeries, ref_antenna: int = 0) -> CleanedSeries:
    """Conjugate multiplication of every antenna with ``ref_antenna``.

    The common prefactor cancels exactly; mirror Doppler terms are kept.
    """
    _require_rx(csi, 2, "cacc_raw")
    if not 0 <= ref_antenna < csi.num_rx:
        raise CleaningError(f"invalid reference antenna {ref_antenna}")
    out = csi.values * np.conj(csi.values[ref_antenna])[None]
    return CleanedSeries(
        out, "cacc_raw", f"rx{ref_antenna}", csi.waveform, csi.array,
        np.arange(csi.num_rx), csi.start_time,
    )


def _variant_block(X, ref, min_static_fraction):
    """Mirror-free dynamic channels for one block of conjugate products X (C, J, K)."""
    C, J, K = X.shape
    M = X.mean(axis=2, keepdims=True)
    others = [i for i in range(C) if i != ref]
    frac = np.abs(M[others]).sum() / max(np.abs(X[others]).mean(axis=2).sum(), 1e-300)
    if frac < min_static_fraction:
        raise DegradedReferenceError(
            f"static component too weak (fraction {frac:.3g} < {min_static_fraction})"
        )
    alpha = M / M[ref]  # static spatial signature relative to the reference
    Y = X - M
    W = Y[others] - alpha[others] * Y[ref][None]  # first-order (D_i - alpha_i D_ref) S_ref*
    u = np.zeros((J, K), dtype=complex)
    for j in range(J):
        # fit 2 Re(sum_i g_i W_i) to the real reference channel
        Wj = W[:, j, :]
        A = np.concatenate([2 * Wj.real, -2 * Wj.imag]).T
        coef, *_ = np.linalg.lstsq(A, Y[ref, j].real, rcond=None)
        g = coef[: len(others)] + 1j * coef[len(others):]
        u[j] = g @ Wj
    Z = np.empty_like(X)
    Z[ref] = u
    Z[others] = W + alpha[others] * u[None]
    return Z


def cacc_variant(
    csi: CsiSeries,
    ref_antenna: int = 0,
    block: Optional[int] = None,
    min_static_fraction: float = 0.05,
    normalise: str = "global",
) -> CleanedSeries:
    """Mirror-suppressed cross-antenna cleaning (needs >= 3 rx antennas).

    Steps, per block of ``block`` symbols (whole series by default):

    1. conjugate products ``X_i = H_i conj(H_ref)`` (the AGC gain survives
       only as a common real amplitude factor);
    2. static signature ``alpha_i = S_i / S_ref`` from the temporal means;
    3. differential terms ``W_i = Y_i - alpha_i Y_ref`` on the mean-removed
       products, which carry no mirror to first order;
    4. a per-subcarrier least-squares fit of the real reference channel by
       ``2 Re(sum_i g_i W_i)`` recovers the positive-frequency reference term
       ``u``; channels are rebuilt as ``u`` (reference) and
       ``W_i + alpha_i u``.

    The output approximates ``(H_i - S_i) conj(S_ref)`` up to a per-block
    real scale, i.e. the dynamic part referenced to the static reference
    signal, with no mirror term.

    ``normalise`` scales the products by the reference power averaged over
    the whole series (``"global"``) or per symbol (``"symbol"``).  The
    per-symbol form cancels AGC exactly, which matters for phase tracking of
    a near-static subject, but a strong mover modulates the reference power
    and leaks a zero-delay ghost.
    """
    _require_rx(csi, 3, "cacc_variant")
    H = csi.values
    X = H * np.conj(H[ref_antenna])[None]
    # a global scale only: a per-symbol power normalisation would be modulated
    # by the movers themselves and leak a delay-0 ghost into the output
    if normalise == "global":
        g = np.mean(np.abs(H[ref_antenna]) ** 2)
        X = X / (g if g > 0 else 1.0)
    elif normalise == "symbol":
        g = np.mean(np.abs(H[ref_antenna]) ** 2, axis=0)
        X = X / np.where(g > 0, g, 1.0)[None, None]
    else:
        raise CleaningError(f"unknown normalisation {normalise!r}")
    K = X.shape[-1]
    block = K if block is None else int(block)
    Z = np.empty_like(X)
    for k0 in range(0, K, block):
        k1 = min(K, k0 + block)
        if k1 - k0 < 2:
            Z[..., k0:k1] = 0.0
            continue
        Z[..., k0:k1] = _variant_block(X[..., k0:k1], ref_antenna, min_static_fraction)
    return CleanedSeries(
        Z, "cacc_variant", f"rx{ref_antenna}-static", csi.waveform, csi.array,
        np.arange(csi.num_rx), csi.start_time,
    )


def casr(csi: CsiSeries, antenna_pair: tuple[int, int] = (1, 0), eps_rel: float = 1e-8) -> CleanedSeries:
    """CSI ratio ``H_a / H_b``.

    Samples where ``|H_b|`` falls below ``eps_rel`` times its median magnitude
    are masked and linearly interpolated in time; the count is kept in
    ``masked``.
    """
    _require_rx(csi, 2, "casr")
    a, b = antenna_pair
    Ha, Hb = csi.values[a], csi.values[b]
    mag = np.abs(Hb)
    eps = eps_rel * np.median(mag)
    bad = mag <= eps
    out = np.empty_like(Ha)
    np.divide(Ha, Hb, out=out, where=~bad)
    n_bad = int(bad.sum())
    if n_bad:
        log.warning("casr: %d near-zero denominators masked", n_bad)
        k = np.arange(Ha.shape[1])
        for j in np.flatnonzero(bad.any(axis=1)):
            good = ~bad[j]
            if not good.any():
                out[j] = 0.0
                continue
            out[j, ~good] = np.interp(k[~good], k[good], out[j, good].real) + 1j * np.interp(
                k[~good], k[good], out[j, good].imag
            )
    return CleanedSeries(
        out[None], "casr", f"rx{a}/rx{b}", csi.waveform, csi.array, None, csi.start_time, n_bad
    )


def estimate_timing_offsets(H: np.ndarray, waveform: WaveformConfig) -> np.ndarray:
    """Relative timing offset of every symbol w.r.t. symbol 0 (seconds).

    Uses the lag-one correlation across subcarriers; the static channel's own
    slope cancels in the ratio to the first symbol.
    """
    c = np.sum(H[1:] * np.conj(H[:-1]), axis=0)
    return -np.angle(c * np.conj(c[0])) / (2 * np.pi * waveform.subcarrier_spacing)


def single_antenna_clean(
    csi: CsiSeries,
    antenna: int = 0,
    ref_symbols: int = 10,
    min_snr_db: float = 6.0,
) -> CleanedSeries:
    """Single-antenna cleaning against a delay-domain reference.

    Per symbol the relative timing offset is estimated and removed, the
    strongest delay tap (chosen from the first ``ref_symbols`` symbols) gives
    the reference, and the CSI is multiplied by its conjugate normalised by
    the reference power.  TO, CFO and AGC are thereby removed up to a
    constant complex factor.
    """
    J = csi.waveform.num_subcarriers
    if J < 16:
        raise UnsupportedMethodError("single-antenna cleaning needs >= 16 subcarriers")
    H = csi.values[antenna]
    dtau = estimate_timing_offsets(H, csi.waveform)
    df = csi.waveform.subcarrier_offsets
    H = H * np.exp(2j * np.pi * df[:, None] * dtau[None, :])
    profile = np.fft.ifft(H, axis=0)
    tap_power = np.mean(np.abs(profile[:, :ref_symbols]) ** 2, axis=1)
    tap = int(np.argmax(tap_power))
    floor = np.median(tap_power)
    snr = 10 * np.log10(tap_power[tap] / floor) if floor > 0 else np.inf
    if not snr >= min_snr_db:
        raise UnreliableReferenceError(f"dominant tap SNR {snr:.1f} dB below {min_snr_db} dB")
    ref = profile[tap]
    power = np.abs(ref) ** 2
    # conjugate product normalised by the reference power: removes AGC and,
    # being a ratio to first order, leaves no Doppler mirror
    phasor = np.where(power > 0, ref / np.where(power > 0, power, 1.0), 0.0)
    out = H * np.conj(phasor)[None, :]
    return CleanedSeries(
        out[None], "single_antenna", f"rx{antenna}-tap{tap}", csi.waveform, csi.array,
        np.array([0]), csi.start_time,
    )


def clean(csi: CsiSeries, method: str, **kwargs) -> CleanedSeries:
    """Dispatch by method tag."""
    funcs = {
        "cacc_raw": cacc_raw,
        "cacc_variant": cacc_variant,
        "casr": casr,
        "single_antenna": single_antenna_clean,
    }
    if method not in funcs:
        raise CleaningError(f"unknown cleaning method {method!r}")
    return funcs[method](csi, **kwargs)


def min_rx_for(method: str) -> int:
    return {"cacc_raw": 2, "cacc_variant": 3, "casr": 2, "single_antenna": 1}[method]
