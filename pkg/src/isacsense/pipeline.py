"""Reproducible end-to-end runs from a single JSON config.

Stages run in the fixed order simulate, clean, features, detect, track,
vitals; requesting a stage pulls in its prerequisites.  Every artifact goes
into one output directory and is listed, with its SHA-256, in
``manifest.json``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from . import io as aio
from .clean import METHODS, CsiSeries, clean, min_rx_for
from .detect import BistaticGeometry, CfarConfig, cfar_2d, points_from_cube
from .features import WindowConfig, iter_cubes, peak_selector, window_starts
from .scene import (
    ArrayConfig, ImpairmentConfig, Scene, StaticScatterer, TargetState, Trajectory, VitalModel,
    WaveformConfig, ground_truth, simulate,
)
from .track import Status, TrackerConfig, TrackerState, step_tracker
from .vitals import bin_series, estimate_vitals, refine_bin, select_static_bin

log = logging.getLogger(__name__)

STAGES = ("simulate", "clean", "features", "detect", "track", "vitals")
REQUIRES = {
    "simulate": (),
    "clean": ("simulate",),
    "features": ("clean",),
    "detect": ("features",),
    "track": ("detect",),
    "vitals": ("clean",),
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, window: Optional[int] = None):
        self.stage, self.window, self.cause = stage, window, cause
        where = f" (window {window})" if window is not None else ""
        super().__init__(f"stage {stage!r}{where} failed: {type(cause).__name__}: {cause}")


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def _build(cls, d: Optional[dict], what: str, **extra):
    try:
        return cls(**{**(d or {}), **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from None


def _tuples(d: dict, keys) -> dict:
    return {k: (tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v)
            if k in keys else v for k, v in d.items()}


def _vital(d: Optional[dict]) -> Optional[VitalModel]:
    if d is None:
        return None
    d = dict(d)
    for key, field_ in (("resp_per_min", "resp_rate"), ("heart_per_min", "heart_rate")):
        if key in d:
            d[field_] = d.pop(key) / 60.0
    return _build(VitalModel, d, "vital model")


def scene_from_dict(d: dict) -> Scene:
    d = dict(d)
    targets = []
    for t in d.pop("targets", []):
        t = dict(t)
        traj = t.pop("trajectory", None)
        if traj is not None:
            traj = _build(Trajectory, _tuples(traj, ("waypoints",)), "trajectory")
        vital = _vital(t.pop("vital", None))
        t = _tuples(t, ("position", "velocity", "acceleration"))
        targets.append(_build(TargetState, t, "target", trajectory=traj, vital=vital))
    scat = [_build(StaticScatterer, _tuples(s, ("position",)), "scatterer") for s in d.pop("static_scatterers", [])]
    for key in ("rx_normal", "tx_normal"):
        if key + "_deg" in d:
            d[key] = float(np.deg2rad(d.pop(key + "_deg")))
    d = _tuples(d, ("tx_position", "rx_position"))
    return _build(Scene, d, "scene", targets=tuple(targets), static_scatterers=tuple(scat))


@dataclass
class RunConfig:
    """Resolved run configuration; ``raw`` is the canonical JSON form."""

    raw: dict
    waveform: WaveformConfig
    array: ArrayConfig
    scene: Scene
    impairments: ImpairmentConfig
    snr_db: Optional[float]
    stages: tuple
    seed: int
    out: Path
    workers: int = 1
    clean: dict = field(default_factory=dict)
    window: WindowConfig = WindowConfig()
    cfar: CfarConfig = CfarConfig()
    tracker: TrackerConfig = TrackerConfig()
    vitals: dict = field(default_factory=dict)
    export: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    @property
    def execution(self) -> list:
        need = set()

        def add(s):
            if s not in need:
                need.add(s)
                for r in REQUIRES[s]:
                    add(r)

        for s in self.stages:
            add(s)
        return [s for s in STAGES if s in need]


DEFAULT_VITALS = {
    "window": {"length": 10.0, "step": 10.0, "doppler_bins": 201, "delay_grid": [0.0, 1e-6, 128]},
    "span": 60.0,
    "method": "fft",
    "resp_band": [0.1, 0.5],
    "heart_band": [0.8, 2.0],
    "refine": False,
    "low_cutoff": 0.5,
}


def load_config(path=None, overrides: Optional[dict] = None, data: Optional[dict] = None) -> RunConfig:
    """Parse and validate a run config (file or dict); raise :class:`ConfigError`."""
    base = Path(".")
    if data is None:
        if path is None:
            raise ConfigError("no config given")
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        base = path.parent
    data = json.loads(json.dumps(data))  # deep copy, JSON types only
    scen = data.get("scenario", {})
    if isinstance(scen, str):
        sp = (base / scen).resolve()
        if not sp.is_file():
            raise ConfigError(f"scenario file not found: {sp}")
        scen = json.loads(sp.read_text())
    data["scenario"] = scen
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    known = {"name", "scenario", "stages", "seed", "out", "workers", "clean", "window", "cfar",
             "tracker", "vitals", "export"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    seed = data.setdefault("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    stages = tuple(data.setdefault("stages", list(STAGES[:5])))
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stages {bad}; choose from {list(STAGES)}")
    # where and how fast a run executes must not change what it produces
    workers = data.pop("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError("workers must be a positive integer")

    wf = _build(WaveformConfig, scen.get("waveform"), "waveform")
    arr = _build(ArrayConfig, scen.get("array"), "array")
    sc = scene_from_dict(scen.get("scene", {}))
    imp = _build(ImpairmentConfig, _tuples(scen.get("impairments", {}), ("agc_bounds",)), "impairments", seed=seed)
    snr = scen.get("snr_db")

    cl = dict(data.setdefault("clean", {"method": "cacc_variant"}))
    method = cl.pop("method", "cacc_variant")
    if method not in METHODS:
        raise ConfigError(f"unknown cleaning method {method!r}")
    if arr.num_rx < min_rx_for(method):
        raise ConfigError(f"{method} needs >= {min_rx_for(method)} rx antennas, array has {arr.num_rx}")
    win = _build(WindowConfig, _tuples(data.get("window", {}), ("delay_grid",)), "window")
    cf = _build(CfarConfig, _tuples(data.get("cfar", {}), ("guard_cells", "training_cells")), "cfar")
    tr = _build(TrackerConfig, _tuples(data.get("tracker", {}), ("confirm_m_of_n", "measurement_noise", "init_std")),
                "tracker")
    vit = {**DEFAULT_VITALS, **data.get("vitals", {})}
    _build(WindowConfig, _tuples(vit["window"], ("delay_grid",)), "vitals window")
    if any(s in stages for s in ("features", "detect", "track")) and method == "casr":
        raise ConfigError("casr output is nonlinear; delay/AoA features need another cleaning method")
    out = Path(data.pop("out", None) or "out")
    return RunConfig(
        data, wf, arr, sc, imp, snr, stages, seed, out, workers,
        {"method": method, **cl}, win, cf, tr, vit, data.get("export", {}),
    )


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def array_digest(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a)
    h = hashlib.sha256(str((a.dtype.str, a.shape)).encode())
    h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class StageRecord:
    name: str
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)  # relative path -> sha256
    wall_clock_s: float = 0.0


@dataclass
class RunManifest:
    config_hash: str
    tool: str = "isacsense"
    version: str = __version__
    seed: int = 0
    stages: list = field(default_factory=list)
    files: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


class _Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.out
        self.manifest = RunManifest(cfg.config_hash, seed=cfg.seed)
        self.digests: dict[str, str] = {"config": cfg.config_hash}
        self.written: list[Path] = []

    def _emit(self, rec: StageRecord, paths):
        for p in paths:
            p = Path(p)
            rel = p.relative_to(self.out).as_posix()
            rec.outputs[rel] = aio.sha256(p)
            self.written.append(p)

    def stage(self, name, fn, inputs):
        rec = StageRecord(name, {k: self.digests[k] for k in inputs})
        t0 = time.perf_counter()
        try:
            paths = fn()
        except StageError:
            raise
        except Exception as exc:  # every failure leaves with its stage name
            raise StageError(name, exc) from exc
        self._emit(rec, paths)
        rec.wall_clock_s = time.perf_counter() - t0
        self.manifest.stages.append(rec)
        log.info("stage %s done in %.2f s", name, rec.wall_clock_s)


def run(cfg: RunConfig) -> RunManifest:
    """Execute the configured stages; returns the manifest (also written to disk)."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    r = _Run(cfg)
    out = cfg.out
    state: dict[str, Any] = {}
    export = {"binaries": True, "pgm": True, **cfg.export}

    def p(name):
        return out / name

    def do_config():
        aio.write_json(p("config.resolved.json"), cfg.raw)
        return [p("config.resolved.json")]

    r.stage("config", do_config, ["config"])

    def do_simulate():
        cfr = simulate(cfg.scene, cfg.waveform, cfg.array, cfg.impairments, cfg.snr_db)
        state["cfr"] = cfr
        r.digests["cfr"] = array_digest(cfr.values)
        files = []
        if export["binaries"]:
            files += aio.write_array(p("cfr.bin"), cfr.values, {
                "dims": ["tx", "rx", "subcarrier", "symbol"],
                "subcarrier_offsets_hz": cfg.waveform.subcarrier_offsets.tolist(),
                "symbol_interval_s": cfg.waveform.symbol_interval,
                "carrier_frequency_hz": cfg.waveform.carrier_frequency,
                "seed": cfg.seed,
            })
        if cfg.scene.targets:
            ts = np.arange(0.0, cfg.scene.duration + 1e-9, 0.1)
            gt = ground_truth(cfg.scene, ts, cfg.waveform)
            rows = []
            for i in range(len(cfg.scene.targets)):
                for k, t in enumerate(ts):
                    rows.append((t, i, gt.delay[i, k], gt.doppler[i, k], gt.aoa[i, k], *gt.position[i, k]))
            aio.write_csv(p("ground_truth.csv"), ["time_s", "target", "delay_s", "doppler_hz", "aoa_rad", "x", "y"], rows)
            files.append(p("ground_truth.csv"))
        return files

    def do_clean():
        kw = {k: v for k, v in cfg.clean.items() if k != "method"}
        c = clean(CsiSeries.from_cfr(state["cfr"]), cfg.clean["method"], **kw)
        state["cleaned"] = c
        r.digests["cleaned"] = array_digest(c.values)
        if not export["binaries"]:
            return []
        return aio.write_array(p("cleaned.bin"), c.values, {
            "dims": ["channel", "subcarrier", "symbol"], "method": c.method_tag,
            "reference": c.reference_descriptor, "masked": c.masked,
        })

    def do_features():
        # one pass over the windows: cubes are consumed as they are produced
        c = state["cleaned"]
        n_win = len(window_starts(c.values.shape[-1], c.waveform.symbol_interval, cfg.window))
        cols, heat_sum, first, mid, points = [], None, None, None, []
        want_detect = "detect" in cfg.execution
        for w, cube in enumerate(iter_cubes(c, cfg.window, cfg.workers)):
            try:
                g, a = peak_selector(cube)
                cols.append((cube.window_timestamp, cube.power[:, g, a]))
                hm = cube.heatmap()
                heat_sum = hm if heat_sum is None else heat_sum + hm
                if want_detect:
                    points.append((cube.window_timestamp, points_from_cube(cube, cfar_2d(hm, cfg.cfar))))
            except Exception as exc:
                raise StageError("features", exc, w) from exc
            first = cube if first is None else first
            if w == n_win // 2:
                mid = cube
        state["frames"] = points
        r.digests["features"] = hashlib.sha256(
            b"".join(np.ascontiguousarray(col).tobytes() for _, col in cols)
        ).hexdigest()
        times = [t for t, _ in cols]
        gram = np.stack([col for _, col in cols], axis=1)
        files = [p("doppler_time.csv"), p("doppler_aoa.csv")]
        aio.write_matrix_csv(files[0], gram, first.doppler_axis, times, "doppler_hz\\time_s")
        aio.write_matrix_csv(files[1], heat_sum / len(cols), first.doppler_axis, first.aoa_axis, "doppler_hz\\aoa_rad")
        if export["pgm"]:
            aio.write_pgm(p("doppler_time.pgm"), gram[::-1])
            aio.write_pgm(p("doppler_aoa.pgm"), (heat_sum / len(cols))[::-1])
            files += [p("doppler_time.pgm"), p("doppler_aoa.pgm")]
        if export["binaries"]:
            files += aio.write_array(p("cube_mid.bin"), mid.power, {
                "dims": ["doppler", "delay", "aoa"], "window_timestamp": mid.window_timestamp,
                "doppler_axis_hz": mid.doppler_axis.tolist(), "delay_axis_s": mid.delay_axis.tolist(),
                "aoa_axis_rad": mid.aoa_axis.tolist(), "mvdr_max_error": mid.mvdr_error,
            })
        return files

    def do_detect():
        flat = [pt for _, pts in state["frames"] for pt in pts]
        aio.write_points(p("points.csv"), flat)
        r.digests["points"] = aio.sha256(p("points.csv"))
        return [p("points.csv")]

    def do_track():
        geom = BistaticGeometry.from_scene(cfg.scene, cfg.waveform)
        st = TrackerState(time=state["frames"][0][0] if state["frames"] else 0.0)
        rows, presence, prev = [], [], None
        for w, (ts, pts) in enumerate(state["frames"]):
            dt = cfg.window.step if prev is None else ts - prev
            try:
                st = step_tracker(st, pts, dt, geom, cfg.tracker, ts)
            except Exception as exc:
                raise StageError("track", exc, w) from exc
            prev = ts
            presence.append({"timestamp": ts, "motion_presence": st.motion_presence})
            for t in st.tracks:
                last_ts, x = t.history[-1]
                if last_ts == ts:
                    rows.append((ts, t.id, t.status.value, x))
        aio.write_tracks(p("tracks.csv"), rows)
        confirmed = sorted({i for _, i, s, _ in rows if s == Status.CONFIRMED.value})
        aio.write_json(p("motion_presence.json"), {
            "frames": presence,
            "any_motion": any(f["motion_presence"] for f in presence),
            "tracks_created": st.next_id - 1,
            "confirmed_ids": confirmed,
        })
        return [p("tracks.csv"), p("motion_presence.json")]

    def do_vitals():
        c = state["cleaned"]
        v = cfg.vitals
        wcfg = _build(WindowConfig, _tuples(v["window"], ("delay_grid",)), "vitals window")
        fs_raw = 1.0 / cfg.waveform.symbol_interval
        span = int(round(v["span"] * fs_raw))
        K = c.values.shape[-1]
        if K < span:
            raise ValueError(f"series of {K / fs_raw:.1f} s shorter than the vitals span {v['span']} s")
        rows, wave_rows = [], []
        for k0 in range(0, K - span + 1, span):
            seg = c.window(k0, k0 + span)
            sel_len = int(round(wcfg.length * fs_raw))
            cubes = list(iter_cubes(seg.window(0, sel_len), wcfg))
            g, a = select_static_bin(cubes, low_cutoff=v["low_cutoff"])
            if v["refine"]:
                g, a = refine_bin(seg, cubes[0], g, a)
            z, fs = bin_series(seg, cubes[0].delay_axis[g], cubes[0].aoa_axis[a])
            est = estimate_vitals(z, fs, tuple(v["resp_band"]), tuple(v["heart_band"]), v["method"], source_bin=(g, a))
            t_mid = seg.start_time + v["span"] / 2
            rows.append((t_mid, est.resp_rate, est.heart_rate, est.resp.confidence, est.heart.confidence))
            rw, hw = est.resp_waveform, est.heart_waveform
            n0 = max(rw.valid_from, hw.valid_from)
            for i in range(n0, len(rw.values)):
                wave_rows.append((seg.start_time + i / fs, rw.values[i], hw.values[i]))
        aio.write_vitals(p("vitals.csv"), rows)
        aio.write_csv(p("vitals_waveform.csv"), ["time_s", "resp_filtered", "heart_filtered"], wave_rows)
        return [p("vitals.csv"), p("vitals_waveform.csv")]

    funcs = {
        "simulate": (do_simulate, ["config"]),
        "clean": (do_clean, ["cfr"]),
        "features": (do_features, ["cleaned"]),
        "detect": (do_detect, ["features"]),
        "track": (do_track, ["points"]),
        "vitals": (do_vitals, ["cleaned"]),
    }
    for s in cfg.execution:
        fn, inputs = funcs[s]
        r.stage(s, fn, inputs)

    r.manifest.files = {
        f.relative_to(out).as_posix(): aio.sha256(f) for f in sorted(set(r.written))
    }
    (out / "manifest.json").write_text(r.manifest.to_json())
    return r.manifest
