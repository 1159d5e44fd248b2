"""Gaze-selection policies under inhibition of return."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import xlogy

from .calibration import CalibrationModel, EccentricityBins, cell_levels
from .dirichlet import kl_divergence_batch
from .semantic_map import BETA0, Cell, GridGeometry, SemanticMap, cell_posterior, kaplan_update

KINDS = ("random", "saliency", "search_nonpredictive", "search_predictive", "explore_predictive")
METRICS = ("kl", "negentropy", "two_peaks")
ACQUISITIONS = ("sum_expected", "expected_improvement")
DEFAULT_ACQUISITION = {"kl": "sum_expected", "negentropy": "sum_expected", "two_peaks": "expected_improvement"}

TIE_RTOL = 1e-12


class TrialExhausted(RuntimeError):
    """Every cell has been fixated; no candidate is left."""


@dataclass(frozen=True)
class Policy:
    kind: str
    target: int | None = None
    metric: str | None = None
    acquisition: str | None = None
    calibrated: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "explore_predictive":
            metric = self.metric or "kl"
            if metric not in METRICS:
                raise ValueError(f"unknown metric {metric!r}")
            acq = self.acquisition or DEFAULT_ACQUISITION[metric]
            if acq not in ACQUISITIONS:
                raise ValueError(f"unknown acquisition {acq!r}")
            object.__setattr__(self, "metric", metric)
            object.__setattr__(self, "acquisition", acq)

    @property
    def predictive(self) -> bool:
        return self.kind in ("search_predictive", "explore_predictive")

    @property
    def needs_model(self) -> bool:
        return self.predictive or self.calibrated

    @property
    def name(self) -> str:
        parts = [self.kind]
        if self.kind == "explore_predictive":
            parts += [self.metric, self.acquisition]
        parts.append("calibrated" if self.calibrated else "raw")
        return "_".join(parts)

    def with_target(self, target: int) -> "Policy":
        return Policy(self.kind, target, self.metric, self.acquisition, self.calibrated)


def winner_take_all(scores: np.ndarray, visited: np.ndarray, geometry: GridGeometry) -> Cell:
    """Argmax over unvisited cells; near-ties within 1e-12 go to the lowest row-major index."""
    flat = np.asarray(scores, dtype=float).ravel()
    free = ~np.asarray(visited, dtype=bool).ravel()
    if not free.any():
        raise TrialExhausted("all cells visited")
    masked = np.where(free, flat, -np.inf)
    best = masked.max()
    tol = TIE_RTOL * max(1.0, abs(best))
    return geometry.cell_of(int(np.argmax(masked >= best - tol)))


def select_random(smap: SemanticMap, rng: np.random.Generator) -> Cell:
    free = smap.unvisited()
    if free.size == 0:
        raise TrialExhausted("all cells visited")
    return smap.geometry.cell_of(free[rng.integers(free.size)])


def select_saliency(grid, smap: SemanticMap) -> Cell:
    grid = np.asarray(grid, dtype=float)
    if grid.shape != smap.geometry.shape:
        raise ValueError(f"saliency grid shape {grid.shape} does not match map {smap.geometry.shape}")
    return winner_take_all(grid, smap.visited, smap.geometry)


def select_search_nonpredictive(smap: SemanticMap, target: int) -> Cell:
    b = smap.beta
    return winner_take_all(b[..., target] / b.sum(axis=-1), smap.visited, smap.geometry)


@lru_cache(maxsize=32)
def _level_table(geometry: GridGeometry, bins: EccentricityBins) -> np.ndarray:
    table = cell_levels(geometry, bins)
    table.setflags(write=False)
    return table


def _predicted_betas(smap: SemanticMap, candidates: np.ndarray, model: CalibrationModel) -> np.ndarray:
    """Expected betas ``(len(candidates), n_cells, K+1)`` after fixating each candidate."""
    levels = _level_table(smap.geometry, model.bins)[candidates]  # (c, n)
    model._check_level(np.unique(levels))
    beta = smap.beta.reshape(-1, smap.beta.shape[-1])
    p = cell_posterior(beta)
    # expected score of every cell at every level, then gather per candidate
    per_level = np.einsum("xk,dkj->dxj", p, model.level_means)
    expected = per_level[levels, np.arange(beta.shape[0])]
    return kaplan_update(beta[None], expected)


def predict_map(smap: SemanticMap, fixation: Cell, model: CalibrationModel) -> SemanticMap:
    """Expected map after a simulated fixation at ``fixation``; IOR state is copied, not advanced."""
    idx = np.array([smap.geometry.flat_index(fixation)])
    beta = _predicted_betas(smap, idx, model)[0].reshape(smap.beta.shape)
    return SemanticMap(smap.geometry, beta, smap.visited.copy(), list(smap.history))


def select_search_predictive(smap: SemanticMap, target: int, model: CalibrationModel) -> Cell:
    """Simulate one foveal update per cell and pick the best predicted target posterior."""
    local = model.expected_local_scores(smap.beta)
    pred = kaplan_update(smap.beta, local)
    return winner_take_all(pred[..., target] / pred.sum(axis=-1), smap.visited, smap.geometry)


def metric_value(beta, metric: str) -> np.ndarray | float:
    """Per-cell certainty metric over the last axis of ``beta``.

    ``kl``: divergence from the uniform initial Dirichlet; ``negentropy``:
    sum p log p; ``two_peaks``: gap between the two largest posteriors.
    """
    beta = np.asarray(beta, dtype=float)
    if metric == "kl":
        out = kl_divergence_batch(beta, np.full(beta.shape[-1], BETA0))
    elif metric == "negentropy":
        p = cell_posterior(beta)
        out = xlogy(p, p).sum(axis=-1)
    elif metric == "two_peaks":
        p = cell_posterior(beta)
        top = np.partition(p, -2, axis=-1)
        out = top[..., -1] - top[..., -2]
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return float(out) if np.ndim(out) == 0 else out


def explore_scores(smap: SemanticMap, model: CalibrationModel, metric: str, acquisition: str) -> np.ndarray:
    """Acquisition value for every unvisited candidate (NaN at visited cells), flat row-major."""
    if acquisition not in ACQUISITIONS:
        raise ValueError(f"unknown acquisition {acquisition!r}")
    candidates = smap.unvisited()
    out = np.full(smap.geometry.n_cells, np.nan)
    if candidates.size == 0:
        return out
    predicted = metric_value(_predicted_betas(smap, candidates, model), metric)  # (c, n)
    if acquisition == "sum_expected":
        out[candidates] = predicted.sum(axis=1)
    else:
        current = metric_value(smap.beta.reshape(-1, smap.beta.shape[-1]), metric)
        out[candidates] = np.abs(predicted - current[None]).max(axis=1)
    return out


def select_explore(smap: SemanticMap, model: CalibrationModel, metric: str = "kl", acquisition: str | None = None) -> Cell:
    acquisition = acquisition or DEFAULT_ACQUISITION[metric]
    scores = explore_scores(smap, model, metric, acquisition)
    return winner_take_all(np.nan_to_num(scores, nan=-np.inf), smap.visited, smap.geometry)


def ior_mark(smap: SemanticMap, cell: Cell) -> SemanticMap:
    return smap.mark_visited(cell)


def select_next(
    policy: Policy,
    smap: SemanticMap,
    rng: np.random.Generator | None = None,
    model: CalibrationModel | None = None,
    saliency: np.ndarray | None = None,
) -> Cell:
    if policy.kind == "random":
        return select_random(smap, rng)
    if policy.kind == "saliency":
        if saliency is None:
            raise ValueError("saliency policy needs a saliency grid")
        return select_saliency(saliency, smap)
    if policy.kind == "search_nonpredictive":
        return select_search_nonpredictive(smap, policy.target)
    if model is None:
        raise ValueError(f"{policy.kind} needs a calibration model")
    if policy.kind == "search_predictive":
        return select_search_predictive(smap, policy.target, model)
    return select_explore(smap, model, policy.metric, policy.acquisition)


def aggregate_saliency(raster: np.ndarray, geometry: GridGeometry) -> np.ndarray:
    """Mean pixel intensity per cell of a ``(height, width)`` raster."""
    raster = np.asarray(raster, dtype=float)
    h, w = raster.shape
    col_cell = np.minimum((np.arange(w) * geometry.cols) // w, geometry.cols - 1)
    row_cell = np.minimum((np.arange(h) * geometry.rows) // h, geometry.rows - 1)
    sums = np.zeros(geometry.shape)
    counts = np.zeros(geometry.shape)
    np.add.at(sums, (col_cell[None, :], row_cell[:, None]), raster)
    np.add.at(counts, (col_cell[None, :], row_cell[:, None]), 1.0)
    return sums / np.maximum(counts, 1.0)


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        if maxval > 255:
            raise ValueError(f"{path}: only 8-bit PGM rasters are supported")
        raw = np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
        if raw.size != w * h:
            raise ValueError(f"{path}: truncated PGM raster")
        return raw.reshape(h, w).astype(float)
    if magic == b"P2":
        values = np.array(data[pos:].split(), dtype=float)
        if values.size != w * h:
            raise ValueError(f"{path}: expected {w * h} pixels, got {values.size}")
        return values.reshape(h, w)
    raise ValueError(f"{path}: not a PGM file (magic {magic!r})")


def load_saliency(path, geometry: GridGeometry) -> np.ndarray:
    """Read a saliency grid from CSV (cols rows x rows columns) or an 8-bit PGM raster."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return aggregate_saliency(_read_pgm(path), geometry)
    grid = np.loadtxt(path, delimiter=",", ndmin=2)
    if grid.shape != geometry.shape:
        raise ValueError(f"{path}: saliency grid shape {grid.shape} does not match {geometry.shape}")
    if np.any(grid < 0):
        raise ValueError(f"{path}: saliency values must be nonnegative")
    return grid
