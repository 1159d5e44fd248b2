"""Foveal observation model: Dirichlet likelihoods per (class, eccentricity level)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dirichlet import clamp_scores, fit_mle, log_normalizer
from .semantic_map import GridGeometry

DEFAULT_LEVELS = 5
MIN_SAMPLES = 50


@dataclass(frozen=True)
class EccentricityBins:
    """Upper edges of the distance levels, as fractions of the image half-diagonal."""

    edges: tuple[float, ...]

    def __post_init__(self):
        e = tuple(float(v) for v in self.edges)
        object.__setattr__(self, "edges", e)
        if not e:
            raise ValueError("need at least one eccentricity level")
        if any(b <= a for a, b in zip(e, e[1:])) or e[0] <= 0:
            raise ValueError(f"bin edges must be strictly increasing and positive, got {e}")
        if e[-1] != 1.0:
            raise ValueError(f"last bin edge must be 1.0, got {e[-1]}")

    @classmethod
    def uniform(cls, n: int = DEFAULT_LEVELS) -> "EccentricityBins":
        if n < 1:
            raise ValueError("need at least one eccentricity level")
        return cls(tuple(i / n for i in range(1, n + 1)))

    @property
    def n_levels(self) -> int:
        return len(self.edges)

    def level(self, distance) -> np.ndarray | int:
        """First level whose upper edge is >= the normalized distance."""
        idx = np.searchsorted(self.edges, distance, side="left")
        idx = np.minimum(idx, self.n_levels - 1)
        return int(idx) if np.ndim(idx) == 0 else idx

    def level_of(self, point, fovea, geometry: GridGeometry) -> int:
        d = math.hypot(point[0] - fovea[0], point[1] - fovea[1]) / geometry.half_diagonal
        return self.level(d)


def distance_level(box_center, fovea_center, geometry: GridGeometry, bins: EccentricityBins) -> int:
    return bins.level_of(box_center, fovea_center, geometry)


def cell_levels(geometry: GridGeometry, bins: EccentricityBins) -> np.ndarray:
    """``(n_cells, n_cells)`` level table between cell centers, row-major on both axes."""
    c = geometry.cell_centers().reshape(-1, 2)
    d = np.hypot(*(c[:, None, :] - c[None, :, :]).transpose(2, 0, 1)) / geometry.half_diagonal
    return bins.level(d)


@dataclass(frozen=True)
class TrainingRecord:
    scores: np.ndarray = field(repr=False)
    true_class: int
    distance: float


@dataclass
class TrainingSet:
    """Column-oriented training records: ``scores (n, K+1)``, ``classes (n,)``, ``distances (n,)``."""

    scores: np.ndarray
    classes: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float)
        width = scores.shape[-1] if scores.ndim == 2 else (scores.size // max(len(self.classes), 1))
        self.scores = scores.reshape(len(self.classes), width)
        self.classes = np.asarray(self.classes, dtype=int)
        self.distances = np.asarray(self.distances, dtype=float)

    def __len__(self):
        return len(self.classes)

    @classmethod
    def from_records(cls, records: Iterable[TrainingRecord]) -> "TrainingSet":
        records = list(records)
        if not records:
            return cls(np.zeros((0, 0)), np.zeros(0, int), np.zeros(0))
        return cls(
            np.stack([np.asarray(r.scores, float) for r in records]),
            np.array([r.true_class for r in records]),
            np.array([r.distance for r in records]),
        )

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for s, k, d in zip(self.scores, self.classes, self.distances):
                fh.write(json.dumps({"scores": s.tolist(), "class": int(k), "distance": float(d)}) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TrainingSet":
        scores, classes, dists = [], [], []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    s = np.asarray(rec["scores"], dtype=float)
                    k = int(rec["class"])
                    d = float(rec["distance"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: malformed training record ({exc})") from exc
                if s.ndim != 1 or (scores and s.size != scores[0].size):
                    raise ValueError(f"{path}:{lineno}: inconsistent score vector length")
                if not 0 <= k < s.size:
                    raise ValueError(f"{path}:{lineno}: class {k} outside [0, {s.size - 1}]")
                if not 0.0 <= d <= 1.0:
                    raise ValueError(f"{path}:{lineno}: distance {d} outside [0, 1]")
                scores.append(s)
                classes.append(k)
                dists.append(d)
        if not scores:
            return cls(np.zeros((0, 0)), np.zeros(0, int), np.zeros(0))
        return cls(np.stack(scores), np.array(classes), np.array(dists))


class CalibrationModel:
    """``(K+1) x N`` table of Dirichlet likelihoods with sparse-bin backoff.

    ``alpha[k, d]`` is the fitted concentration for true class ``k`` at level
    ``d`` or NaN when the bin had fewer than ``min_samples`` records.
    ``class_alpha[k]`` is a level-pooled fit used as the last fallback.
    Missing entries resolve to the nearest populated level of the same class
    (ties go to the inner level), then to the pooled fit.
    """

    def __init__(
        self,
        num_classes: int,
        bins: EccentricityBins,
        alpha: np.ndarray,
        counts: np.ndarray,
        class_alpha: np.ndarray | None = None,
    ):
        k1, n = num_classes + 1, bins.n_levels
        self.num_classes = num_classes
        self.bins = bins
        self.alpha = np.asarray(alpha, dtype=float).reshape(k1, n, k1)
        self.counts = np.asarray(counts, dtype=int).reshape(k1, n)
        if class_alpha is None:
            class_alpha = np.full((k1, k1), np.nan)
        self.class_alpha = np.asarray(class_alpha, dtype=float).reshape(k1, k1)
        for table in (self.alpha, self.class_alpha):
            ok = ~np.isnan(table).any(axis=-1)
            if np.any(table[ok] <= 0):
                raise ValueError("populated alpha entries must be strictly positive")
        self._resolve()

    def _resolve(self) -> None:
        k1, n = self.alpha.shape[:2]
        populated = self.populated
        resolved = np.full_like(self.alpha, np.nan)
        source = np.empty((k1, n), dtype=object)
        for k in range(k1):
            levels = np.flatnonzero(populated[k])
            for d in range(n):
                if populated[k, d]:
                    resolved[k, d] = self.alpha[k, d]
                    source[k, d] = "fit"
                elif levels.size:
                    j = int(levels[np.argmin(np.abs(levels - d))])
                    resolved[k, d] = self.alpha[k, j]
                    source[k, d] = f"level {j}"
                elif not np.isnan(self.class_alpha[k]).any():
                    resolved[k, d] = self.class_alpha[k]
                    source[k, d] = "pooled"
                else:
                    source[k, d] = "missing"
        self.resolved = resolved
        self.source = source
        # per level: matrix of likelihood means, rows = true class
        self.level_means = np.transpose(resolved / resolved.sum(axis=-1, keepdims=True), (1, 0, 2))
        self._log_norm = log_normalizer(resolved)

    @property
    def populated(self) -> np.ndarray:
        return ~np.isnan(self.alpha).any(axis=-1)

    def usable_levels(self) -> np.ndarray:
        """Levels at which every class has a resolved likelihood."""
        return np.flatnonzero(~np.isnan(self.resolved).any(axis=(0, 2)))

    def _check_level(self, level) -> None:
        bad = np.isnan(self.resolved[:, level]).any(axis=-1)
        if np.any(bad):
            raise ValueError(f"no usable likelihood at level(s) {np.unique(level)}")

    def log_likelihoods(self, scores, level) -> np.ndarray:
        """``log Dir(s | alpha[k, level])`` for every class ``k`` (last axis)."""
        s = clamp_scores(scores)
        level = np.asarray(level)
        self._check_level(level)
        a = self.resolved[:, level]  # (K+1, ..., K+1)
        a = np.moveaxis(a, 0, -2)  # (..., K+1 classes, K+1)
        ln = np.moveaxis(self._log_norm[:, level], 0, -1)
        return ln + np.einsum("...kj,...j->...k", a - 1.0, np.log(s))

    def calibrate(self, scores, level) -> np.ndarray:
        """Calibrated scores: per-class Dirichlet likelihoods normalized to sum 1.

        Vectorized over leading axes of ``scores`` with a matching ``level``.
        """
        logl = self.log_likelihoods(scores, level)
        logl = logl - logl.max(axis=-1, keepdims=True)
        w = np.exp(logl)
        return w / w.sum(axis=-1, keepdims=True)

    def expected_scores(self, beta, level) -> np.ndarray:
        """Mixture of likelihood means weighted by the cell posterior."""
        beta = np.asarray(beta, dtype=float)
        level = np.asarray(level)
        self._check_level(level)
        p = beta / beta.sum(axis=-1, keepdims=True)
        return np.einsum("...k,...kj->...j", p, self.level_means[level])

    def expected_local_scores(self, beta) -> np.ndarray:
        return self.expected_scores(beta, 0)

    def report(self) -> str:
        lines = ["class  " + "  ".join(f"L{d}:count/source" for d in range(self.bins.n_levels))]
        for k in range(self.num_classes + 1):
            cells = [f"{self.counts[k, d]}/{self.source[k, d]}" for d in range(self.bins.n_levels)]
            lines.append(f"{k:5d}  " + "  ".join(cells))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        def entry(a):
            return None if np.isnan(a).any() else a.tolist()

        return {
            "K": self.num_classes,
            "bins": {"edges": list(self.bins.edges)},
            "alpha": [[entry(self.alpha[k, d]) for d in range(self.bins.n_levels)] for k in range(self.num_classes + 1)],
            "counts": self.counts.tolist(),
            "class_alpha": [entry(a) for a in self.class_alpha],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationModel":
        K = int(data["K"])
        bins = EccentricityBins(tuple(data["bins"]["edges"]))
        k1, n = K + 1, bins.n_levels

        def fill(entry):
            return np.full(k1, np.nan) if entry is None else np.asarray(entry, dtype=float)

        if len(data["alpha"]) != k1 or any(len(row) != n for row in data["alpha"]):
            raise ValueError(f"alpha table must be {k1} x {n}")
        alpha = np.stack([np.stack([fill(e) for e in row]) for row in data["alpha"]])
        counts = np.asarray(data.get("counts", np.zeros((k1, n), int)))
        ca = data.get("class_alpha")
        class_alpha = None if ca is None else np.stack([fill(e) for e in ca])
        return cls(K, bins, alpha, counts, class_alpha)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "CalibrationModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train(
    records: TrainingSet | Sequence[TrainingRecord],
    num_classes: int,
    bins: EccentricityBins,
    min_samples: int = MIN_SAMPLES,
) -> CalibrationModel:
    """Fit one Dirichlet per (true class, distance level) partition of ``records``."""
    data = records if isinstance(records, TrainingSet) else TrainingSet.from_records(records)
    if len(data) == 0:
        raise ValueError("cannot train a calibration model on zero records")
    k1, n = num_classes + 1, bins.n_levels
    if data.scores.shape[1] != k1:
        raise ValueError(f"records have {data.scores.shape[1]} score components, expected {k1}")
    levels = bins.level(data.distances)
    alpha = np.full((k1, n, k1), np.nan)
    counts = np.zeros((k1, n), dtype=int)
    class_alpha = np.full((k1, k1), np.nan)
    for k in range(k1):
        in_class = data.classes == k
        for d in range(n):
            sel = in_class & (levels == d)
            counts[k, d] = int(sel.sum())
            if counts[k, d] >= min_samples:
                alpha[k, d] = fit_mle(data.scores[sel]).alpha
        if in_class.sum() >= min_samples:
            class_alpha[k] = fit_mle(data.scores[in_class]).alpha
    return CalibrationModel(num_classes, bins, alpha, counts, class_alpha)
