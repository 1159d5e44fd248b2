"""Search and exploration trials, performance curves, and seeded campaigns."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .calibration import CalibrationModel, train
from .policy import Policy, TrialExhausted, load_saliency, select_next
from .semantic_map import Cell, Detection, GridGeometry, SemanticMap, overlap_mask
from .simworld import (
    EmulatorConfig,
    SceneSpec,
    emulate_detections,
    generate_scene,
    generate_training_records,
    ground_truth_mask,
    load_detection_log,
    synthetic_saliency,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Campaign configuration is invalid; raised before any trial runs."""


class TrialError(RuntimeError):
    """A trial failed while running."""


def trial_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for stream ``key`` of campaign ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


@dataclass(frozen=True)
class TrialConfig:
    policy: Policy
    max_iterations: int = 30
    repetitions: int = 10
    seed: int = 0
    min_overlap: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


@dataclass
class SearchResult:
    found: bool
    found_at: int | None
    path: list[Cell]
    select_times: list[float] = field(default_factory=list)


@dataclass
class ExploreResult:
    """``success[s]`` is the success rate after ``s`` saccades (``s + 1`` fixations)."""

    success: list[float]
    prior_success: float
    path: list[Cell]
    select_times: list[float] = field(default_factory=list)


def initial_fixation(scene: SceneSpec, geometry: GridGeometry, rng: np.random.Generator) -> Cell:
    """Uniform random cell that contains no target instance."""
    eligible = np.flatnonzero(~ground_truth_mask(scene, geometry, scene.target).ravel())
    if eligible.size == 0:
        raise ValueError("every cell contains a target instance")
    return geometry.cell_of(eligible[rng.integers(eligible.size)])


class _Truth:
    """Per-scene lookup of which classes overlap each cell."""

    def __init__(self, scene: SceneSpec, geometry: GridGeometry, num_classes: int):
        self.classes = np.zeros((num_classes + 1,) + geometry.shape, dtype=bool)
        for obj in scene.objects:
            if obj.cls > num_classes:
                raise ValueError(f"scene has class {obj.cls} but the map has only {num_classes} classes")
            self.classes[obj.cls] |= overlap_mask(obj.box, geometry)
        self.occupied = self.classes.any(axis=0)


def _predicted_classes(smap: SemanticMap) -> np.ndarray:
    p = smap.posterior()
    top = p.max(axis=-1, keepdims=True)
    tied = (p >= top - 1e-12).sum(axis=-1) > 1
    return np.where(tied, 0, p.argmax(axis=-1))


def success_rate(smap: SemanticMap, scene: SceneSpec, truth: _Truth | None = None) -> float:
    """Fraction of object cells whose argmax class matches an overlapping object.

    Argmax ties count as background, so untouched cells are never correct.
    """
    if not scene.objects:
        raise ValueError("success rate is undefined for a scene without objects")
    truth = truth or _Truth(scene, smap.geometry, smap.num_classes)
    pred = _predicted_classes(smap)
    x, y = np.nonzero(truth.occupied)
    correct = truth.classes[pred[x, y], x, y]
    return float(correct.sum() / x.size)


class _Source:
    """Where a trial's detections come from: the emulator or a replayed log."""

    def __init__(self, scene, geometry, emulator: EmulatorConfig | None, log: dict | None, rng):
        if emulator is None and log is None:
            raise ValueError("need an emulator config or a detection log")
        self.scene, self.geometry, self.emulator, self.log, self.rng = scene, geometry, emulator, log, rng

    def __call__(self, fixation: Cell) -> list[Detection]:
        if self.log is not None:
            return self.log.get(fixation, [])
        return emulate_detections(self.scene, fixation, self.geometry, self.emulator, self.rng)


def _select(policy, smap, rng, model, saliency, times):
    t0 = time.perf_counter()
    cell = select_next(policy, smap, rng, model, saliency)
    times.append(time.perf_counter() - t0)
    return cell


def run_search_trial(
    scene: SceneSpec,
    geometry: GridGeometry,
    config: TrialConfig,
    rng: np.random.Generator,
    start: Cell,
    model: CalibrationModel | None = None,
    emulator: EmulatorConfig | None = None,
    log: dict | None = None,
    saliency: np.ndarray | None = None,
    num_classes: int | None = None,
) -> SearchResult:
    """Fixate, fuse, and let the Oracle stop the search once a target cell is fixated.

    Iteration 1 is the fixation at ``start``. Selection wall time is logged
    per step; emulation and map updates are not timed.
    """
    policy = config.policy if config.policy.target is not None else config.policy.with_target(scene.target)
    if policy.needs_model and model is None:
        raise ValueError(f"policy {policy.name} needs a calibration model")
    K = num_classes or (model.num_classes if model else emulator.num_classes if emulator else None)
    if K is None:
        raise ValueError("cannot infer the number of classes")
    mode = "calibrated" if policy.calibrated else "raw"
    smap = SemanticMap.uniform(geometry, K)
    targets = ground_truth_mask(scene, geometry, scene.target)
    source = _Source(scene, geometry, emulator, log, rng)
    times: list[float] = []
    fixation = start
    for it in range(1, config.max_iterations + 1):
        smap.apply_detections(source(fixation), fixation, mode, model, config.min_overlap)
        if targets[fixation]:
            return SearchResult(True, it, list(smap.history), times)
        if it == config.max_iterations:
            break
        try:
            fixation = _select(policy, smap, rng, model, saliency, times)
        except TrialExhausted:
            break
    return SearchResult(False, None, list(smap.history), times)


def run_explore_trial(
    scene: SceneSpec,
    geometry: GridGeometry,
    config: TrialConfig,
    rng: np.random.Generator,
    start: Cell,
    model: CalibrationModel | None = None,
    emulator: EmulatorConfig | None = None,
    log: dict | None = None,
    saliency: np.ndarray | None = None,
    num_classes: int | None = None,
) -> ExploreResult:
    """Run ``max_iterations`` fixations without an Oracle, scoring the map after each."""
    policy = config.policy
    if policy.target is None and policy.kind.startswith("search"):
        policy = policy.with_target(scene.target)
    if policy.needs_model and model is None:
        raise ValueError(f"policy {policy.name} needs a calibration model")
    K = num_classes or (model.num_classes if model else emulator.num_classes if emulator else None)
    if K is None:
        raise ValueError("cannot infer the number of classes")
    mode = "calibrated" if policy.calibrated else "raw"
    smap = SemanticMap.uniform(geometry, K)
    truth = _Truth(scene, geometry, K)
    prior = success_rate(smap, scene, truth)
    source = _Source(scene, geometry, emulator, log, rng)
    success: list[float] = []
    times: list[float] = []
    fixation = start
    for it in range(1, config.max_iterations + 1):
        smap.apply_detections(source(fixation), fixation, mode, model, config.min_overlap)
        success.append(success_rate(smap, scene, truth))
        if it == config.max_iterations:
            break
        try:
            fixation = _select(policy, smap, rng, model, saliency, times)
        except TrialExhausted:
            break
    return ExploreResult(success, prior, list(smap.history), times)


def cumulative_performance(results, horizon: int) -> np.ndarray:
    """``CP[t-1]`` = fraction of trials whose target was found by iteration ``t``."""
    results = list(results)
    if not results:
        raise ValueError("need at least one search result")
    found = np.array([r.found_at if r.found else np.inf for r in results], dtype=float)
    t = np.arange(1, horizon + 1)
    return (found[None, :] <= t[:, None]).mean(axis=1)


def aggregate_with_sem(curves) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and standard error (sample std / sqrt(R)) over repetitions."""
    c = np.asarray(curves, dtype=float)
    if c.ndim != 2 or c.shape[0] < 2:
        raise ValueError("SEM needs at least two repetitions")
    return c.mean(axis=0), c.std(axis=0, ddof=1) / math.sqrt(c.shape[0])


def time_per_iteration(result) -> float:
    """Mean policy-selection wall time in seconds."""
    if not result.select_times:
        raise ValueError("trial made no policy selections")
    return float(np.mean(result.select_times))


def _pad_success(success: list[float], horizon: int) -> np.ndarray:
    s = np.asarray(success, dtype=float)
    if s.size < horizon:
        s = np.concatenate([s, np.full(horizon - s.size, s[-1] if s.size else 0.0)])
    return s[:horizon]


# -- campaigns ---------------------------------------------------------------


@dataclass
class CampaignConfig:
    kind: str
    policies: list[Policy]
    num_classes: int = 5
    grid: tuple[int, int] = (10, 10)
    canvas: tuple[float, float] = (640.0, 480.0)
    scenes: str | None = None
    num_scenes: int = 100
    horizon: int = 30
    repetitions: int = 10
    seed: int = 0
    calibration: Any = None
    emulator: Any = None
    logs: str | None = None
    saliency: str | None = None
    sem: str = "repetition"
    min_overlap: float = 0.0

    def __post_init__(self):
        if self.kind not in ("search", "explore"):
            raise ConfigError(f"campaign kind must be 'search' or 'explore', got {self.kind!r}")
        if not self.policies:
            raise ConfigError("campaign needs at least one policy")
        if self.horizon < 1 or self.repetitions < 1:
            raise ConfigError("horizon and repetitions must be >= 1")
        if self.sem not in ("repetition", "image"):
            raise ConfigError("sem must be 'repetition' or 'image'")
        names = [p.name for p in self.policies]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate policies: {names}")
        self.grid = tuple(int(v) for v in self.grid)
        self.canvas = tuple(float(v) for v in self.canvas)

    @classmethod
    def from_dict(cls, data: dict, base: Path | None = None) -> "CampaignConfig":
        data = dict(data)
        try:
            data["policies"] = [p if isinstance(p, Policy) else Policy(**p) for p in data.get("policies", [])]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad policy entry: {exc}") from exc
        if base is not None:
            for key in ("scenes", "logs", "saliency", "calibration", "emulator"):
                if isinstance(data.get(key), str):
                    data[key] = str((base / data[key]).resolve())
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "CampaignConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read campaign config {path}: {exc}") from exc
        return cls.from_dict(data, path.parent)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "policies": [
                {k: v for k, v in vars(p).items() if v is not None and v is not False} for p in self.policies
            ],
            "num_classes": self.num_classes,
            "grid": list(self.grid),
            "canvas": list(self.canvas),
            "scenes": self.scenes,
            "num_scenes": self.num_scenes,
            "horizon": self.horizon,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "calibration": self.calibration,
            "emulator": self.emulator if not isinstance(self.emulator, EmulatorConfig) else self.emulator.to_dict(),
            "logs": self.logs,
            "saliency": self.saliency,
            "sem": self.sem,
            "min_overlap": self.min_overlap,
        }


@dataclass
class PolicyCurve:
    name: str
    mean: np.ndarray
    sem: np.ndarray
    curves: np.ndarray
    mean_time: np.ndarray  # per-iteration selection time, NaN where no trial selected
    results: list = field(repr=False, default_factory=list)

    @property
    def time_per_iteration(self) -> float:
        times = [t for r in self.results for t in r.select_times]
        return float(np.mean(times)) if times else float("nan")


def _resolve_emulator(cfg: CampaignConfig) -> EmulatorConfig:
    em = cfg.emulator
    try:
        if em is None:
            return EmulatorConfig(num_classes=cfg.num_classes)
        if isinstance(em, EmulatorConfig):
            return em
        if isinstance(em, dict):
            return EmulatorConfig.from_dict({"num_classes": cfg.num_classes, **em})
        return EmulatorConfig.load(em)
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad emulator config: {exc}") from exc


def _resolve_model(cfg: CampaignConfig, emulator: EmulatorConfig) -> CalibrationModel | None:
    cal = cfg.calibration
    if cal is None:
        return None
    if isinstance(cal, CalibrationModel):
        model = cal
    elif isinstance(cal, dict) and "emulate" in cal:
        records = generate_training_records(emulator, int(cal["emulate"]), trial_rng(int(cal.get("seed", cfg.seed)), 9))
        model = train(records, emulator.num_classes, emulator.bins)
    else:
        try:
            model = CalibrationModel.load(cal)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load calibration model {cal}: {exc}") from exc
    if model.num_classes != cfg.num_classes:
        raise ConfigError(f"calibration model has K={model.num_classes}, campaign K={cfg.num_classes}")
    return model


def _load_scenes(cfg: CampaignConfig) -> tuple[list[str], list[SceneSpec]]:
    if cfg.scenes:
        paths = sorted(p for p in Path(cfg.scenes).glob("*.json") if p.name != "manifest.json")
        if not paths:
            raise ConfigError(f"no scene files in {cfg.scenes}")
        try:
            return [p.stem for p in paths], [SceneSpec.load(p) for p in paths]
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"bad scene file: {exc}") from exc
    rng = trial_rng(cfg.seed, 0)
    scenes = [generate_scene(cfg.num_classes, cfg.canvas, rng) for _ in range(cfg.num_scenes)]
    return [f"scene_{i:04d}" for i in range(len(scenes))], scenes


@dataclass
class _SceneJob:
    index: int
    scene: SceneSpec
    geometry: GridGeometry
    trial: TrialConfig
    kind: str
    model: CalibrationModel | None
    emulator: EmulatorConfig | None
    log: dict | None
    saliency: np.ndarray | None
    num_classes: int


def _run_scene(job: _SceneJob) -> list:
    out = []
    runner = run_search_trial if job.kind == "search" else run_explore_trial
    for r in range(job.trial.repetitions):
        start = initial_fixation(job.scene, job.geometry, trial_rng(job.trial.seed, 1, job.index, r))
        rng = trial_rng(job.trial.seed, 2, job.index, r)
        out.append(
            runner(
                job.scene, job.geometry, job.trial, rng, start,
                model=job.model, emulator=job.emulator, log=job.log,
                saliency=job.saliency, num_classes=job.num_classes,
            )
        )
    return out


def _curves(cfg: CampaignConfig, per_scene: list[list]) -> np.ndarray:
    H, R = cfg.horizon, cfg.repetitions
    if cfg.kind == "search":
        if cfg.sem == "repetition":
            return np.stack([cumulative_performance([s[r] for s in per_scene], H) for r in range(R)])
        return np.stack([cumulative_performance(s, H) for s in per_scene])
    grid = np.array([[_pad_success(res.success, H) for res in s] for s in per_scene])  # (S, R, H)
    return grid.mean(axis=0) if cfg.sem == "repetition" else grid.mean(axis=1)


def _mean_times(per_scene: list[list], horizon: int) -> np.ndarray:
    sums = np.zeros(horizon)
    counts = np.zeros(horizon)
    for s in per_scene:
        for res in s:
            n = min(len(res.select_times), horizon)
            sums[:n] += res.select_times[:n]
            counts[:n] += 1
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def run_campaign(cfg: CampaignConfig, jobs: int = 1, out_dir=None) -> dict[str, PolicyCurve]:
    """Run every policy on every scene and repetition; optionally write CSVs and a manifest.

    Trials for scene ``i``, repetition ``r`` draw their start cell and their
    detections from streams keyed by ``(seed, i, r)``, shared across policies.
    """
    emulator = _resolve_emulator(cfg)
    if emulator.num_classes != cfg.num_classes:
        raise ConfigError(f"emulator has K={emulator.num_classes}, campaign K={cfg.num_classes}")
    model = _resolve_model(cfg, emulator)
    missing = [p.name for p in cfg.policies if p.needs_model and model is None]
    if missing:
        raise ConfigError(f"policies {missing} need a calibration model")
    if cfg.repetitions < 2 and cfg.sem == "repetition":
        raise ConfigError("repetition-level SEM needs at least two repetitions")
    names, scenes = _load_scenes(cfg)
    if cfg.sem == "image" and len(scenes) < 2:
        raise ConfigError("image-level SEM needs at least two scenes")
    geometries = [GridGeometry(s.width, s.height, *cfg.grid) for s in scenes]

    logs = [None] * len(scenes)
    if cfg.logs:
        try:
            logs = [load_detection_log(Path(cfg.logs) / f"{n}.jsonl") for n in names]
        except (OSError, ValueError) as exc:
            raise ConfigError(f"bad detection log: {exc}") from exc
    saliency = [None] * len(scenes)
    if any(p.kind == "saliency" for p in cfg.policies):
        if cfg.saliency:
            saliency = [_find_saliency(Path(cfg.saliency), n, g) for n, g in zip(names, geometries)]
        else:
            saliency = [synthetic_saliency(s, g, trial_rng(cfg.seed, 3, i)) for i, (s, g) in enumerate(zip(scenes, geometries))]

    results: dict[str, PolicyCurve] = {}
    for policy in cfg.policies:
        trial = TrialConfig(policy, cfg.horizon, cfg.repetitions, cfg.seed, cfg.min_overlap)
        work = [
            _SceneJob(i, s, g, trial, cfg.kind, model, None if logs[i] is not None else emulator, logs[i], saliency[i], cfg.num_classes)
            for i, (s, g) in enumerate(zip(scenes, geometries))
        ]
        try:
            if jobs > 1:
                with ProcessPoolExecutor(max_workers=jobs) as pool:
                    per_scene = list(pool.map(_run_scene, work, chunksize=max(1, len(work) // (4 * jobs))))
            else:
                per_scene = [_run_scene(w) for w in work]
        except (ValueError, RuntimeError) as exc:
            raise TrialError(f"{policy.name}: {exc}") from exc
        curves = _curves(cfg, per_scene)
        mean, sem = aggregate_with_sem(curves)
        results[policy.name] = PolicyCurve(
            policy.name, mean, sem, curves, _mean_times(per_scene, cfg.horizon),
            [r for s in per_scene for r in s],
        )
        logger.info("%s: done (%d scenes x %d reps)", policy.name, len(scenes), cfg.repetitions)

    if out_dir is not None:
        write_results(cfg, results, names, out_dir)
    return results


def _find_saliency(root: Path, name: str, geometry: GridGeometry) -> np.ndarray:
    for suffix in (".csv", ".pgm"):
        path = root / f"{name}{suffix}"
        if path.exists():
            try:
                return load_saliency(path, geometry)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
    raise ConfigError(f"no saliency grid for scene {name} in {root}")


def write_results(cfg: CampaignConfig, results: dict[str, PolicyCurve], scene_names: list[str], out_dir) -> None:
    """Deterministic result CSVs and manifest, plus a separate wall-clock timing file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    value_col = "mean_cp" if cfg.kind == "search" else "mean_success_rate"
    files = {}
    timing = {}
    for name, res in results.items():
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", value_col, "sem"])
            for t in range(cfg.horizon):
                w.writerow([t + 1, repr(float(res.mean[t])), repr(float(res.sem[t]))])
        files[name] = f"{name}.csv"
        timing[name] = [None if math.isnan(v) else float(v) for v in res.mean_time]
    # wall-clock numbers differ run to run, so they live apart from the reproducible CSVs
    (out / "timing.json").write_text(json.dumps({"unit": "s", "mean_time_per_iteration": timing}, indent=2) + "\n")
    manifest = {
        "config": cfg.to_dict(),
        "scenes": scene_names,
        "seed": cfg.seed,
        "stream_keys": {"scenes": [0], "start": [1, "scene", "rep"], "trial": [2, "scene", "rep"], "saliency": [3, "scene"]},
        "files": files,
        "timing": "timing.json",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_curve_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def summarize(in_dir, checkpoints=(5, 15, 30)) -> list[dict]:
    """One summary row per policy CSV in ``in_dir``: value at checkpoints, max SEM, mean time."""
    in_dir = Path(in_dir)
    timing = {}
    if (in_dir / "timing.json").exists():
        timing = json.loads((in_dir / "timing.json").read_text()).get("mean_time_per_iteration", {})
    rows = []
    for path in sorted(in_dir.glob("*.csv")):
        data = read_curve_csv(path)
        if not data:
            continue
        value_col = "mean_cp" if "mean_cp" in data else "mean_success_rate"
        row = {"policy": path.stem}
        for c in checkpoints:
            row[f"{value_col}@{c}"] = float(data[value_col][c - 1]) if c <= len(data[value_col]) else float("nan")
        row["max_sem"] = float(np.max(data["sem"]))
        if path.stem in timing:
            t = [v for v in timing[path.stem] if v is not None]
            row["mean_time_s"] = float(np.mean(t)) if t else float("nan")
        rows.append(row)
    return rows
