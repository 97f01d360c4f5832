"""Artifact I/O: raw binaries with JSON sidecars, CSV tables, PGM previews.

Binaries are little-endian; complex arrays are interleaved (re, im) float64.
Floats in CSV are written with ``repr`` so files are byte-reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_array(path, array: np.ndarray, meta: Optional[dict] = None) -> list[Path]:
    """Raw little-endian dump plus ``<stem>.json`` with shape, dtype and ``meta``."""
    path = Path(path)
    a = np.asarray(array)
    if np.iscomplexobj(a):
        dtype = "<c16"
    elif a.dtype == bool:
        dtype = "|u1"
    else:
        dtype = "<f8"
    np.ascontiguousarray(a, dtype=dtype).tofile(path)
    side = {"shape": list(a.shape), "dtype": dtype, "order": "C"}
    side.update(meta or {})
    write_json(_sidecar(path), side)
    return [path, _sidecar(path)]


def read_array(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    with open(_sidecar(path)) as fh:
        meta = json.load(fh)
    a = np.fromfile(path, dtype=meta["dtype"]).reshape(meta["shape"])
    return a, meta


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def write_matrix_csv(path, matrix: np.ndarray, row_axis: Sequence[float], col_axis: Sequence[float],
                     corner: str = "row\\col") -> None:
    """Matrix with its axis values as the first row and column."""
    M = np.asarray(matrix, float)
    if M.shape != (len(row_axis), len(col_axis)):
        raise ValueError(f"matrix {M.shape} does not match axes ({len(row_axis)}, {len(col_axis)})")
    rows = ([r, *M[i]] for i, r in enumerate(row_axis))
    write_csv(path, [corner, *[_cell(float(c)) for c in col_axis]], rows)


def read_matrix_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = np.array([float(c) for c in rows[0][1:]])
    body = np.array([[float(c) for c in r] for r in rows[1:]])
    return body[:, 1:], body[:, 0], cols


def to_gray(matrix: np.ndarray, dynamic_range_db: float = 40.0) -> np.ndarray:
    """Power matrix to 8-bit grey levels over the top ``dynamic_range_db``."""
    P = np.asarray(matrix, float)
    peak = P.max() if P.size else 0.0
    if peak <= 0:
        return np.zeros(P.shape, np.uint8)
    db = 10 * np.log10(np.maximum(P, peak * 1e-30) / peak)
    g = np.clip((db + dynamic_range_db) / dynamic_range_db, 0.0, 1.0)
    return np.round(g * 255).astype(np.uint8)


def write_pgm(path, matrix: np.ndarray, dynamic_range_db: float = 40.0) -> None:
    """Binary PGM (P5); the first matrix row is the top image row."""
    g = to_gray(matrix, dynamic_range_db)
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(g.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], np.uint8, count=w * h).reshape(h, w)


POINT_HEADER = ["window_timestamp", "delay_s", "aoa_rad", "doppler_hz", "snr_db"]
TRACK_HEADER = ["timestamp", "id", "status", "x", "y", "vx", "vy", "ax", "ay"]
VITALS_HEADER = ["timestamp", "resp_bpm", "heart_bpm", "resp_confidence", "heart_confidence"]


def write_points(path, points) -> None:
    write_csv(path, POINT_HEADER, (
        (p.window_timestamp, p.delay, p.aoa, p.doppler, p.snr) for p in points
    ))


def write_tracks(path, rows) -> None:
    """``rows``: (timestamp, id, status, state[6]) tuples."""
    write_csv(path, TRACK_HEADER, ((ts, i, st, *np.asarray(x, float)) for ts, i, st, x in rows))


def write_vitals(path, rows) -> None:
    write_csv(path, VITALS_HEADER, rows)
