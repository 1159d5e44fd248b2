"""World-fixed grid of Dirichlet beliefs fused with Kaplan's rule."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .calibration import CalibrationModel

BETA0 = 0.5  # uninformative initial concentration per class

Cell = tuple[int, int]


@dataclass(frozen=True)
class GridGeometry:
    """An image of ``image_width x image_height`` pixels cut into ``cols x rows`` cells.

    Cell ``(x, y)`` spans columns ``[x*cell_width, (x+1)*cell_width)`` and rows
    ``[y*cell_height, (y+1)*cell_height)``. Grid arrays are shaped ``(cols, rows)``
    and flattened row-major, so the flat index of ``(x, y)`` is ``x*rows + y``.
    """

    image_width: float
    image_height: float
    cols: int = 10
    rows: int = 10

    def __post_init__(self):
        if self.cols < 1 or self.rows < 1:
            raise ValueError(f"grid dimensions must be >= 1, got {self.cols}x{self.rows}")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.cols, self.rows)

    @property
    def n_cells(self) -> int:
        return self.cols * self.rows

    @property
    def cell_width(self) -> float:
        return self.image_width / self.cols

    @property
    def cell_height(self) -> float:
        return self.image_height / self.rows

    @property
    def half_diagonal(self) -> float:
        return 0.5 * math.hypot(self.image_width, self.image_height)

    def cell_center(self, cell: Cell) -> tuple[float, float]:
        x, y = cell
        return ((x + 0.5) * self.cell_width, (y + 0.5) * self.cell_height)

    def cell_centers(self) -> np.ndarray:
        """``(cols, rows, 2)`` array of pixel centers."""
        cx = (np.arange(self.cols) + 0.5) * self.cell_width
        cy = (np.arange(self.rows) + 0.5) * self.cell_height
        return np.stack(np.meshgrid(cx, cy, indexing="ij"), axis=-1)

    def cells(self) -> list[Cell]:
        return [(x, y) for x in range(self.cols) for y in range(self.rows)]

    def flat_index(self, cell: Cell) -> int:
        return cell[0] * self.rows + cell[1]

    def cell_of(self, flat: int) -> Cell:
        return (int(flat) // self.rows, int(flat) % self.rows)

    def contains(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.cols and 0 <= cell[1] < self.rows

    def to_dict(self) -> dict:
        return {
            "image_width": self.image_width,
            "image_height": self.image_height,
            "cols": self.cols,
            "rows": self.rows,
        }


@dataclass(frozen=True)
class BoundingBox:
    left: float
    top: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"box must have positive size, got {self.width}x{self.height}")

    @property
    def right(self) -> float:
        return self.left + self.width

    @property
    def bottom(self) -> float:
        return self.top + self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.left + 0.5 * self.width, self.top + 0.5 * self.height)

    @property
    def area(self) -> float:
        return self.width * self.height

    def clipped(self, width: float, height: float) -> "BoundingBox | None":
        """Intersection with ``[0, width] x [0, height]``, or None if empty."""
        left, top = max(self.left, 0.0), max(self.top, 0.0)
        right, bottom = min(self.right, width), min(self.bottom, height)
        if right <= left or bottom <= top:
            return None
        return BoundingBox(left, top, right - left, bottom - top)

    def as_list(self) -> list[float]:
        return [self.left, self.top, self.width, self.height]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BoundingBox":
        if len(values) != 4:
            raise ValueError(f"box needs [left, top, width, height], got {values!r}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    scores: np.ndarray = field(repr=False)


def cell_posterior(beta) -> np.ndarray:
    """Posterior class probabilities ``beta_k / sum(beta)``.

    A single draw from the Dirichlet-compound multinomial has exactly this
    probability mass; works over any leading axes.
    """
    beta = np.asarray(beta, dtype=float)
    return beta / beta.sum(axis=-1, keepdims=True)


def kaplan_update(beta, likelihood) -> np.ndarray:
    """Fuse a categorical likelihood into a Dirichlet by moment matching.

    Per component, ``beta_k (1 + l_k/S) / (1 + min(l)/S)`` with
    ``S = sum_j beta_j l_j``. The fused mean equals the exact Bayes
    posterior mean. Broadcasts over leading axes; the ratio is formed as
    ``(S + l_k) / (S + min l)`` so a uniform likelihood is an exact fixed point.
    """
    beta = np.asarray(beta, dtype=float)
    lam = np.asarray(likelihood, dtype=float)
    if beta.shape[-1] != lam.shape[-1]:
        raise ValueError(f"dimension mismatch: beta has {beta.shape[-1]}, likelihood {lam.shape[-1]}")
    if np.any(lam < 0):
        raise ValueError("likelihood components must be nonnegative")
    s = np.sum(beta * lam, axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise ValueError("likelihood must not be all zero")
    return beta * ((s + lam) / (s + lam.min(axis=-1, keepdims=True)))


def _overlap_ranges(box: BoundingBox, geometry: GridGeometry) -> tuple[range, range]:
    cw, ch = geometry.cell_width, geometry.cell_height
    x0 = max(int(math.floor(box.left / cw)), 0)
    x1 = min(int(math.ceil(box.right / cw)), geometry.cols)
    y0 = max(int(math.floor(box.top / ch)), 0)
    y1 = min(int(math.ceil(box.bottom / ch)), geometry.rows)
    return range(x0, x1), range(y0, y1)


def overlap_mask(box: BoundingBox, geometry: GridGeometry, min_overlap: float = 0.0) -> np.ndarray:
    """Boolean ``(cols, rows)`` mask of cells the box intersects.

    A cell is hit when its intersection area with the box is positive and,
    if ``min_overlap > 0``, at least that fraction of the cell area.
    """
    mask = np.zeros(geometry.shape, dtype=bool)
    xs, ys = _overlap_ranges(box, geometry)
    if not xs or not ys:
        return mask
    cw, ch = geometry.cell_width, geometry.cell_height
    xe = np.arange(xs.start, xs.stop + 1) * cw
    ye = np.arange(ys.start, ys.stop + 1) * ch
    ox = np.minimum(xe[1:], box.right) - np.maximum(xe[:-1], box.left)
    oy = np.minimum(ye[1:], box.bottom) - np.maximum(ye[:-1], box.top)
    area = np.outer(np.clip(ox, 0, None), np.clip(oy, 0, None))
    hit = area > 0
    if min_overlap > 0:
        hit &= area >= min_overlap * cw * ch
    mask[xs.start : xs.stop, ys.start : ys.stop] = hit
    return mask


def cells_overlapped(box: BoundingBox, geometry: GridGeometry, min_overlap: float = 0.0) -> set[Cell]:
    mask = overlap_mask(box, geometry, min_overlap)
    return {(int(x), int(y)) for x, y in zip(*np.nonzero(mask))}


class SemanticMap:
    """Per-cell Dirichlet concentrations plus inhibition-of-return state.

    ``beta`` is a ``(cols, rows, K+1)`` array; ``visited`` a ``(cols, rows)``
    boolean mask; ``history`` the fixation cells in order.
    """

    def __init__(self, geometry: GridGeometry, beta: np.ndarray, visited=None, history=None):
        beta = np.asarray(beta, dtype=float)
        if beta.shape[:2] != geometry.shape or beta.ndim != 3 or beta.shape[2] < 2:
            raise ValueError(f"beta must have shape {geometry.shape + ('K+1',)}, got {beta.shape}")
        if np.any(beta <= 0):
            raise ValueError("beta must be strictly positive")
        self.geometry = geometry
        self.beta = beta
        self.visited = np.zeros(geometry.shape, dtype=bool) if visited is None else np.asarray(visited, dtype=bool)
        self.history: list[Cell] = [] if history is None else [tuple(c) for c in history]

    @classmethod
    def uniform(cls, geometry: GridGeometry, num_classes: int) -> "SemanticMap":
        if num_classes < 1:
            raise ValueError("need at least one object class")
        return cls(geometry, np.full(geometry.shape + (num_classes + 1,), BETA0))

    @property
    def num_classes(self) -> int:
        return self.beta.shape[-1] - 1

    def posterior(self) -> np.ndarray:
        return cell_posterior(self.beta)

    def copy(self) -> "SemanticMap":
        return SemanticMap(self.geometry, self.beta.copy(), self.visited.copy(), list(self.history))

    def mark_visited(self, cell: Cell) -> "SemanticMap":
        """Inhibition of return: flag ``cell`` and log it in the history."""
        if not self.geometry.contains(cell):
            raise ValueError(f"cell {cell} outside grid {self.geometry.shape}")
        cell = (int(cell[0]), int(cell[1]))
        self.visited[cell] = True
        self.history.append(cell)
        return self

    def unvisited(self) -> np.ndarray:
        """Flat row-major indices of cells not yet fixated."""
        return np.flatnonzero(~self.visited.ravel())

    def apply_detections(
        self,
        detections: Iterable[Detection],
        fixation: Cell,
        mode: str = "raw",
        model: "CalibrationModel | None" = None,
        min_overlap: float = 0.0,
    ) -> "SemanticMap":
        """Fuse one fixation's detections in input order, then mark the fixation visited.

        In ``calibrated`` mode each score vector is replaced by the foveal
        calibration of ``model`` at the detection's eccentricity level.
        Mutates and returns ``self``.
        """
        if mode not in ("raw", "calibrated"):
            raise ValueError(f"unknown update mode {mode!r}")
        if mode == "calibrated" and model is None:
            raise ValueError("calibrated mode requires a calibration model")
        fovea = self.geometry.cell_center(fixation)
        for det in detections:
            mask = overlap_mask(det.box, self.geometry, min_overlap)
            if not mask.any():
                continue
            lam = det.scores
            if mode == "calibrated":
                level = model.bins.level_of(det.box.center, fovea, self.geometry)
                lam = model.calibrate(lam, level)
            self.beta[mask] = kaplan_update(self.beta[mask], lam)
        return self.mark_visited(fixation)

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "K": self.num_classes,
            "beta": self.beta.reshape(-1, self.beta.shape[-1]).tolist(),
            "visited": self.visited.ravel().astype(int).tolist(),
            "history": [list(c) for c in self.history],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SemanticMap":
        geometry = GridGeometry(**data["geometry"])
        k1 = int(data["K"]) + 1
        beta = np.asarray(data["beta"], dtype=float).reshape(geometry.shape + (k1,))
        visited = np.asarray(data["visited"], dtype=bool).reshape(geometry.shape)
        return cls(geometry, beta, visited, [tuple(c) for c in data["history"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "SemanticMap":
        return cls.from_dict(json.loads(text))


def init_uniform(geometry: GridGeometry, num_classes: int) -> SemanticMap:
    return SemanticMap.uniform(geometry, num_classes)


def apply_detections(smap: SemanticMap, detections, fixation: Cell, mode="raw", model=None, min_overlap=0.0):
    """Functional spelling of :meth:`SemanticMap.apply_detections` (updates ``smap`` in place)."""
    return smap.apply_detections(detections, fixation, mode, model, min_overlap)
