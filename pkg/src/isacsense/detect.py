"""Target detection on Doppler-AoA heatmaps and bistatic geometry.

A cell-averaging CFAR runs on the heatmap (cube power maximised over delay).
Connected hits are merged to their peak cell, which becomes one
:class:`DetectionPoint` carrying delay, AoA, Doppler and SNR.  Points are
lifted to Cartesian coordinates by intersecting the AoA ray from the
receiver with the bistatic range ellipse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .features import FeatureCube
from .scene import SPEED_OF_LIGHT, Scene, WaveformConfig


class CfarError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    """Delay/AoA pair has no unique position (point on the baseline)."""


@dataclass(frozen=True)
class CfarConfig:
    """Cell-averaging CFAR window, given as (doppler, aoa) half-widths."""

    guard_cells: tuple[int, int] = (2, 1)
    training_cells: tuple[int, int] = (8, 2)
    design_pfa: float = 1e-3
    min_power: float = 0.0  # absolute floor; 0 keeps the detector scale-invariant

    def __post_init__(self):
        if not 0.0 < self.design_pfa < 1.0:
            raise CfarError("design_pfa must lie in (0, 1)")
        if any(g < 0 for g in self.guard_cells) or any(t < 0 for t in self.training_cells):
            raise CfarError("guard/training counts must be non-negative")
        if self.min_power < 0:
            raise CfarError("min_power must be non-negative")
        if self.num_training < 4:
            raise CfarError(f"need >= 4 training cells, window has {self.num_training}")

    @property
    def outer(self) -> tuple[int, int]:
        return tuple(g + t for g, t in zip(self.guard_cells, self.training_cells))

    @property
    def num_training(self) -> int:
        o = [2 * x + 1 for x in self.outer]
        g = [2 * x + 1 for x in self.guard_cells]
        return o[0] * o[1] - g[0] * g[1]

    @staticmethod
    def alpha(n_train, pfa):
        """Threshold multiplier for exponential (square-law) noise."""
        n = np.asarray(n_train, float)
        return n * (pfa ** (-1.0 / n) - 1.0)


@dataclass
class CfarResult:
    mask: np.ndarray  # bool hits
    noise: np.ndarray  # training-cell mean per cell
    threshold: np.ndarray

    @property
    def hits(self) -> np.ndarray:
        """(n, 2) array of hit indices in row-major order."""
        return np.argwhere(self.mask)


def _box_sum(x: np.ndarray, half: tuple[int, int]) -> np.ndarray:
    """Sum of x over a (2h0+1, 2h1+1) box clipped at the borders."""
    h0, h1 = half
    n0, n1 = x.shape
    S = np.zeros((n0 + 1, n1 + 1))
    S[1:, 1:] = x.cumsum(0).cumsum(1)
    i = np.arange(n0)
    j = np.arange(n1)
    i0, i1 = np.clip(i - h0, 0, n0), np.clip(i + h0 + 1, 0, n0)
    j0, j1 = np.clip(j - h1, 0, n1), np.clip(j + h1 + 1, 0, n1)
    return S[i1][:, j1] - S[i0][:, j1] - S[i1][:, j0] + S[i0][:, j0]


def cfar_2d(heatmap: np.ndarray, cfg: CfarConfig = CfarConfig()) -> CfarResult:
    """Cell-averaging CFAR on a (doppler, aoa) power map.

    Near the borders the training window is shrunk to the cells that exist,
    and the multiplier is recomputed for the reduced training count so the
    design false-alarm rate holds everywhere.
    """
    P = np.asarray(heatmap, float)
    if P.ndim != 2:
        raise CfarError("heatmap must be 2-D")
    need = [2 * o + 1 for o in cfg.outer]
    if P.shape[0] < need[0] or P.shape[1] < need[1]:
        raise CfarError(f"heatmap {P.shape} smaller than CFAR window {tuple(need)}")
    if np.any(P < 0) or not np.all(np.isfinite(P)):
        raise CfarError("heatmap must be finite and non-negative")
    ones = np.ones_like(P)
    n_train = _box_sum(ones, cfg.outer) - _box_sum(ones, cfg.guard_cells)
    s_train = _box_sum(P, cfg.outer) - _box_sum(P, cfg.guard_cells)
    # cumulative sums leave ~1e-16 residue where the window is all zeros
    s_train = np.maximum(s_train, 0.0)
    noise = s_train / n_train
    threshold = CfarConfig.alpha(n_train, cfg.design_pfa) * noise
    mask = (P > threshold) & (P > cfg.min_power)
    return CfarResult(mask, noise, threshold)


@dataclass(frozen=True)
class DetectionPoint:
    delay: float  # s, excess over the direct path
    aoa: float  # rad, relative to rx broadside
    doppler: float  # Hz
    snr: float  # dB
    window_timestamp: float


def points_from_cube(cube: FeatureCube, result: CfarResult) -> list[DetectionPoint]:
    """One point per 8-connected group of CFAR hits, placed at its peak.

    Delay is the argmax of the cube along delay at the peak (doppler, aoa)
    cell; SNR is the peak power over the local CFAR noise estimate.
    """
    heat = cube.heatmap()
    if result.mask.shape != heat.shape:
        raise CfarError("CFAR result does not match the cube heatmap")
    labels, n = ndimage.label(result.mask, structure=np.ones((3, 3)))
    points = []
    for lab in range(1, n + 1):
        cells = np.argwhere(labels == lab)
        d, a = cells[np.argmax(heat[cells[:, 0], cells[:, 1]])]
        g = int(np.argmax(cube.power[d, :, a]))
        noise = result.noise[d, a]
        snr = 10 * np.log10(heat[d, a] / noise) if noise > 0 else 300.0
        points.append(
            DetectionPoint(
                float(cube.delay_axis[g]), float(cube.aoa_axis[a]), float(cube.doppler_axis[d]),
                float(snr), float(cube.window_timestamp),
            )
        )
    points.sort(key=lambda p: -p.snr)
    return points


@dataclass(frozen=True)
class BistaticGeometry:
    """Transmitter/receiver placement and carrier needed to invert measurements.

    ``rx_normal`` is the world angle of the receive array broadside; AoAs are
    measured from it, positive counter-clockwise.
    """

    tx: tuple = (0.0, 0.0)
    rx: tuple = (2.2, 0.0)
    rx_normal: float = np.pi / 2
    wavelength: float = WaveformConfig().wavelength

    @classmethod
    def from_scene(cls, scene: Scene, waveform: WaveformConfig = WaveformConfig()) -> "BistaticGeometry":
        return cls(tuple(scene.tx_position), tuple(scene.rx_position), scene.rx_normal, waveform.wavelength)

    @property
    def baseline(self) -> float:
        return float(np.hypot(*(np.subtract(self.tx, self.rx))))

    def to_cartesian(self, delay, aoa) -> np.ndarray:
        return bistatic_to_cartesian(delay, aoa, self.tx, self.rx, self.rx_normal)


def bistatic_to_cartesian(delay, aoa, tx_pos, rx_pos, rx_normal: float = 0.0) -> np.ndarray:
    """Position on the range ellipse seen at ``aoa`` from the receiver.

    Parameters
    ----------
    delay : float or array
        Excess delay over the direct tx-rx path, seconds.
    aoa : float or array
        Angle from the rx broadside; the ray direction in world coordinates
        is ``rx_normal + aoa``.

    Returns
    -------
    ndarray of shape (..., 2)

    Raises
    ------
    DegenerateGeometryError
        If the ray and ellipse do not meet at a unique positive range, as for
        zero excess delay (the ellipse collapses onto the baseline).
    """
    delay = np.asarray(delay, float)
    aoa = np.asarray(aoa, float)
    tx = np.asarray(tx_pos, float)
    rx = np.asarray(rx_pos, float)
    if np.any(delay < 0):
        raise DegenerateGeometryError("negative excess delay")
    L = float(np.hypot(*(tx - rx)))
    s = L + SPEED_OF_LIGHT * delay
    phi = rx_normal + aoa
    u = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    base = (tx - rx) / L if L > 0 else np.array([1.0, 0.0])
    cos_psi = u @ base
    denom = 2 * (s - L * cos_psi)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (s**2 - L**2) / denom
    if np.any(~np.isfinite(r)) or np.any(r <= 0) or np.any(denom <= 0):
        raise DegenerateGeometryError("delay/AoA pair lies on the baseline; position undefined")
    return rx + r[..., None] * u
