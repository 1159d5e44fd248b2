"""Synthetic scenes, a parametric foveal detector emulator, and detection-log replay."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import EccentricityBins, TrainingSet
from .dirichlet import normalize_scores, sample_rows
from .semantic_map import BoundingBox, Cell, Detection, GridGeometry, overlap_mask

MIN_OBJECTS = 8
TARGET_AREA_CAP = 0.2


@dataclass(frozen=True)
class GroundTruthObject:
    cls: int
    box: BoundingBox


@dataclass
class SceneSpec:
    width: float
    height: float
    objects: list[GroundTruthObject]
    target: int

    def __post_init__(self):
        for obj in self.objects:
            if obj.cls < 1:
                raise ValueError(f"ground-truth objects must have class >= 1, got {obj.cls}")

    def benchmark_violations(self, area_cap: float = TARGET_AREA_CAP) -> list[str]:
        """Reasons this scene fails the benchmark selection rules (empty when it passes)."""
        problems = []
        classes = [o.cls for o in self.objects]
        if len(self.objects) < MIN_OBJECTS:
            problems.append(f"only {len(self.objects)} instances (< {MIN_OBJECTS})")
        if self.target not in classes:
            problems.append("no target instance")
        if all(c == self.target for c in classes):
            problems.append("no distractor class")
        cap = area_cap * self.width * self.height
        if any(o.box.area > cap for o in self.objects if o.cls == self.target):
            problems.append("target box exceeds area cap")
        return problems

    def to_dict(self) -> dict:
        return {
            "canvas": [self.width, self.height],
            "target": self.target,
            "objects": [{"class": o.cls, "box": o.box.as_list()} for o in self.objects],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        w, h = data["canvas"]
        objects = [GroundTruthObject(int(o["class"]), BoundingBox.from_list(o["box"])) for o in data["objects"]]
        return cls(float(w), float(h), objects, int(data["target"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def geometry(self, cols: int = 10, rows: int = 10) -> GridGeometry:
        return GridGeometry(self.width, self.height, cols, rows)


def generate_scene(
    num_classes: int,
    canvas: tuple[float, float],
    rng: np.random.Generator,
    n_objects: tuple[int, int] = (8, 12),
    n_targets: tuple[int, int] = (1, 2),
    size_range: tuple[float, float] = (0.06, 0.3),
    target_area_cap: float = TARGET_AREA_CAP,
    max_retries: int = 1000,
) -> SceneSpec:
    """Random scene with >= 8 instances, >= 1 target and >= 1 distractor class.

    Box sides are uniform fractions ``size_range`` of the canvas sides; target
    boxes are resampled until their area is within ``target_area_cap``.
    """
    if num_classes < 2:
        raise ValueError("scenes need at least two object classes")
    width, height = map(float, canvas)
    lo, hi = n_objects
    if lo < MIN_OBJECTS or hi < lo:
        raise ValueError(f"object count range must start at >= {MIN_OBJECTS}, got {n_objects}")
    if target_area_cap <= 0:
        raise ValueError("target area cap must be positive")
    smin, smax = size_range
    if not 0 < smin <= smax <= 1:
        raise ValueError(f"invalid size range {size_range}")

    target = int(rng.integers(1, num_classes + 1))
    n = int(rng.integers(lo, hi + 1))
    n_t = int(rng.integers(n_targets[0], min(n_targets[1], n - 1) + 1))
    others = [c for c in range(1, num_classes + 1) if c != target]
    classes = [target] * n_t + [others[i] for i in rng.integers(len(others), size=n - n_t)]

    cap = target_area_cap * width * height
    objects = []
    for c in classes:
        for _ in range(max_retries):
            fw, fh = rng.uniform(smin, smax, size=2)
            w, h = fw * width, fh * height
            left = rng.uniform(0.0, width - w)
            top = rng.uniform(0.0, height - h)
            if c != target or w * h <= cap:
                break
        else:
            raise ValueError(f"could not place a target box within {target_area_cap:.0%} of the canvas")
        objects.append(GroundTruthObject(c, BoundingBox(float(left), float(top), float(w), float(h))))
    order = rng.permutation(n)
    return SceneSpec(width, height, [objects[i] for i in order], target)


def ground_truth_cells(scene: SceneSpec, geometry: GridGeometry, class_filter: int | None = None) -> set[Cell]:
    mask = ground_truth_mask(scene, geometry, class_filter)
    return {(int(x), int(y)) for x, y in zip(*np.nonzero(mask))}


def ground_truth_mask(scene: SceneSpec, geometry: GridGeometry, class_filter: int | None = None) -> np.ndarray:
    mask = np.zeros(geometry.shape, dtype=bool)
    for obj in scene.objects:
        if class_filter is None or obj.cls == class_filter:
            mask |= overlap_mask(obj.box, geometry)
    return mask


def default_alpha_table(
    num_classes: int,
    n_levels: int,
    confusable: np.ndarray,
    precision: float = 30.0,
    true_mass: tuple[float, float] = (0.85, 0.35),
    floor: float = 0.02,
) -> np.ndarray:
    """Generative score Dirichlets ``(K+1, N, K+1)``.

    The true-class mean decays linearly over levels; the remainder, after a
    small ``floor`` for every unrelated class, is split evenly between the
    background and the confusable class. Background itself has only its
    confusable class as partner.
    """
    k1 = num_classes + 1
    ramp = np.linspace(true_mass[0], true_mass[1], n_levels) if n_levels > 1 else np.array([true_mass[0]])
    table = np.empty((k1, n_levels, k1))
    for k in range(k1):
        partners = {0, int(confusable[k])} - {k}
        for d, m in enumerate(ramp):
            mu = np.full(k1, floor)
            mu[k] = m
            rest = 1.0 - m - floor * (k1 - 1 - len(partners))
            if rest <= 0:
                raise ValueError("floor too large for the number of classes")
            for j in partners:
                mu[j] = rest / len(partners)
            table[k, d] = precision * mu
    return table


@dataclass
class EmulatorConfig:
    """Parameters of the foveal detector stand-in.

    ``alpha[k, d]`` generates the scores of a true-class-``k`` object at level
    ``d``; ``p_detect[d]`` is its detection probability; with probability
    ``confusion[k, d]`` the scores are drawn for ``confusable[k]`` instead.
    """

    num_classes: int = 5
    edges: tuple[float, ...] = ()
    alpha: np.ndarray | None = field(default=None, repr=False)
    p_detect: np.ndarray | None = None
    confusable: np.ndarray | None = None
    confusion: np.ndarray | None = field(default=None, repr=False)
    jitter_std: float = 4.0
    seed: int = 0

    def __post_init__(self):
        K = self.num_classes
        if K < 2:
            raise ValueError("emulator needs at least two object classes")
        if not self.edges:
            self.edges = EccentricityBins.uniform(5).edges
        self.bins = EccentricityBins(tuple(self.edges))
        self.edges = self.bins.edges
        n = self.bins.n_levels
        if self.confusable is None:
            self.confusable = np.array([1] + [k % K + 1 for k in range(1, K + 1)])
        self.confusable = np.asarray(self.confusable, dtype=int)
        if self.alpha is None:
            self.alpha = default_alpha_table(K, n, self.confusable)
        if self.p_detect is None:
            self.p_detect = np.linspace(1.0, 0.6, n) if n > 1 else np.ones(1)
        if self.confusion is None:
            self.confusion = np.zeros((K + 1, n))
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.p_detect = np.asarray(self.p_detect, dtype=float)
        self.confusion = np.broadcast_to(np.asarray(self.confusion, dtype=float), (K + 1, n)).copy()
        if self.alpha.shape != (K + 1, n, K + 1) or np.any(self.alpha <= 0):
            raise ValueError(f"alpha must be a positive ({K + 1}, {n}, {K + 1}) table")
        if self.p_detect.shape != (n,) or np.any((self.p_detect < 0) | (self.p_detect > 1)):
            raise ValueError("p_detect needs one probability per level")
        if np.any(np.diff(self.p_detect) > 0):
            raise ValueError("p_detect must be non-increasing with eccentricity")
        if self.confusable.shape != (K + 1,) or np.any((self.confusable < 0) | (self.confusable > K)):
            raise ValueError("confusable must map every class to a class index")
        if np.any((self.confusion < 0) | (self.confusion > 1)):
            raise ValueError("confusion weights must lie in [0, 1]")
        if self.jitter_std < 0:
            raise ValueError("jitter_std must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "edges": list(self.edges),
            "alpha": self.alpha.tolist(),
            "p_detect": self.p_detect.tolist(),
            "confusable": self.confusable.tolist(),
            "confusion": self.confusion.tolist(),
            "jitter_std": self.jitter_std,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EmulatorConfig":
        known = {"num_classes", "edges", "alpha", "p_detect", "confusable", "confusion", "jitter_std", "seed"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown emulator config fields: {sorted(unknown)}")
        kwargs = dict(data)
        if "edges" in kwargs:
            kwargs["edges"] = tuple(kwargs["edges"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "EmulatorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _score_alphas(config: EmulatorConfig, classes: np.ndarray, levels: np.ndarray, u_confuse: np.ndarray) -> np.ndarray:
    confused = u_confuse < config.confusion[classes, levels]
    source = np.where(confused, config.confusable[classes], classes)
    return config.alpha[source, levels]


def emulate_detections(
    scene: SceneSpec,
    fixation: Cell,
    geometry: GridGeometry,
    config: EmulatorConfig,
    rng: np.random.Generator,
) -> list[Detection]:
    """Detections seen while fixating the center of ``fixation``.

    Every object consumes the same random draws whether or not it is
    detected, so the stream layout does not depend on outcomes.
    """
    m = len(scene.objects)
    if m == 0:
        return []
    fovea = np.asarray(geometry.cell_center(fixation))
    classes = np.array([o.cls for o in scene.objects])
    corners = np.array([[o.box.left, o.box.top, o.box.right, o.box.bottom] for o in scene.objects])
    centers = 0.5 * (corners[:, :2] + corners[:, 2:])
    levels = config.bins.level(np.hypot(*(centers - fovea).T) / geometry.half_diagonal)

    u_detect = rng.random(m)
    noise = rng.standard_normal((m, 4)) * config.jitter_std
    u_confuse = rng.random(m)
    scores = sample_rows(_score_alphas(config, classes, levels, u_confuse), rng)

    out = []
    jittered = corners + noise
    for i in np.flatnonzero(u_detect < config.p_detect[levels]):
        l, t, r, b = jittered[i]
        if r <= l or b <= t:
            continue
        box = BoundingBox(float(l), float(t), float(r - l), float(b - t)).clipped(scene.width, scene.height)
        if box is None:
            continue
        out.append(Detection(box, scores[i]))
    return out


def generate_training_records(
    config: EmulatorConfig,
    n: int,
    rng: np.random.Generator,
    stratified: bool = True,
    geometry: GridGeometry | None = None,
) -> TrainingSet:
    """Labelled score vectors from the emulator's score model.

    ``stratified`` draws (class, level) uniformly and a distance uniformly
    inside the level; otherwise class is uniform and the distance comes from
    a uniform object position relative to a uniform random fixation cell of
    ``geometry``.
    """
    K = config.num_classes
    classes = rng.integers(0, K + 1, size=n)
    if stratified:
        levels = rng.integers(0, config.bins.n_levels, size=n)
        lower = np.concatenate([[0.0], config.bins.edges[:-1]])
        upper = np.asarray(config.bins.edges)
        # nudge off the lower edge so the distance lands inside its own level
        dist = rng.uniform(lower[levels], upper[levels])
        dist = np.where(dist <= lower[levels], np.nextafter(lower[levels], 1.0), dist)
        levels = config.bins.level(dist)
    else:
        if geometry is None:
            raise ValueError("geometric sampling needs a grid geometry")
        cells = rng.integers(0, geometry.n_cells, size=n)
        fovea = geometry.cell_centers().reshape(-1, 2)[cells]
        points = rng.uniform([0.0, 0.0], [geometry.image_width, geometry.image_height], size=(n, 2))
        dist = np.minimum(np.hypot(*(points - fovea).T) / geometry.half_diagonal, 1.0)
        levels = config.bins.level(dist)
    u_confuse = rng.random(n)
    scores = sample_rows(_score_alphas(config, classes, levels, u_confuse), rng)
    return TrainingSet(scores, classes, dist)


def synthetic_saliency(scene: SceneSpec, geometry: GridGeometry, rng: np.random.Generator) -> np.ndarray:
    """Class-agnostic conspicuity grid standing in for a bottom-up saliency map.

    Each object contributes a random contrast weighted by the fraction of a
    cell it covers, on top of uniform background clutter.
    """
    grid = rng.uniform(0.0, 0.3, size=geometry.shape)
    cw, ch = geometry.cell_width, geometry.cell_height
    xe = np.arange(geometry.cols + 1) * cw
    ye = np.arange(geometry.rows + 1) * ch
    for obj, contrast in zip(scene.objects, rng.uniform(0.2, 1.0, size=len(scene.objects))):
        b = obj.box
        ox = np.clip(np.minimum(xe[1:], b.right) - np.maximum(xe[:-1], b.left), 0, None)
        oy = np.clip(np.minimum(ye[1:], b.bottom) - np.maximum(ye[:-1], b.top), 0, None)
        grid += contrast * np.outer(ox, oy) / (cw * ch)
    return grid


def _parse_detection(raw, where: str) -> Detection:
    try:
        box = BoundingBox.from_list(raw["box"])
        scores = normalize_scores(raw["scores"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{where}: bad detection ({exc})") from exc
    return Detection(box, scores)


def load_detection_log(path) -> dict[Cell, list[Detection]]:
    """Per-fixation detections from a JSON-lines log; score vectors are renormalized."""
    table: dict[Cell, list[Detection]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
                cx, cy = rec["fixation"]
                dets = rec["detections"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{where}: malformed log line ({exc})") from exc
            cell = (int(cx), int(cy))
            table.setdefault(cell, []).extend(_parse_detection(d, where) for d in dets)
    return table


def write_detection_log(table: dict[Cell, list[Detection]], path) -> None:
    with open(path, "w") as fh:
        for cell, dets in table.items():
            rec = {
                "fixation": list(cell),
                "detections": [{"box": d.box.as_list(), "scores": np.asarray(d.scores).tolist()} for d in dets],
            }
            fh.write(json.dumps(rec) + "\n")
