"""Decision-boundary geometry: distances along the gradient direction, the
model distance Dist(F1, F2), and 2-D label grids around an image."""
from __future__ import annotations

import csv
import enum
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .attacks import l2_norms
from .metrics import Outcome
from .nn import Network

UNIT = 0.02


class DirectionError(ValueError):
    pass


def gradient_directions(f1: Network, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Unit-l2 non-targeted gradient directions of F1, one per image."""
    g = f1.input_gradient(np.asarray(x, dtype=np.float64), np.asarray(y))
    norms = l2_norms(g)
    if (norms == 0).any():
        bad = np.flatnonzero(norms == 0).tolist()
        raise DirectionError(f"zero loss gradient (direction undefined) for images {bad}")
    return g / norms.reshape((-1,) + (1,) * (g.ndim - 1))


def gradient_direction(f1: Network, x: np.ndarray, y: int) -> np.ndarray:
    return gradient_directions(f1, np.asarray(x)[None], np.array([y]))[0]


@dataclass
class DistanceResult:
    d: float
    capped: bool
    flips_to: int | None
    lower: float = 0.0  # largest probed step that still predicts y


def boundary_distances(
    f: Network,
    x: np.ndarray,
    y: np.ndarray,
    v: np.ndarray,
    cap: float = 2.0,
    tol: float = 1e-4,
    scan_points: int = 64,
) -> list[DistanceResult]:
    """Smallest t in (0, cap] with f(x + t v) != y, batched over images.

    A forward scan with step cap/scan_points finds the first sign change,
    then bisection shrinks the bracket to ``tol``. Points are not clipped to
    the pixel box. Images without a flip up to ``cap`` report ``d = cap``
    and ``capped = True``.
    """
    if cap <= 0 or tol <= 0:
        raise ValueError("cap and tol must be positive")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    if n == 0:
        return []
    if (f.predict(x) != y).any():
        raise ValueError("boundary distance needs images the model classifies as y")
    ts = cap * np.arange(1, scan_points + 1) / scan_points
    flipped = np.zeros((n, scan_points), dtype=bool)
    for k, t in enumerate(ts):
        flipped[:, k] = f.predict(x + t * v) != y
    any_flip = flipped.any(axis=1)
    first = flipped.argmax(axis=1)
    hi = np.where(any_flip, ts[first], cap)
    lo = np.where(any_flip, np.where(first > 0, ts[first - 1], 0.0), cap)
    active = np.flatnonzero(any_flip)
    while active.size:
        mid = 0.5 * (lo[active] + hi[active])
        pts = x[active] + mid.reshape((-1,) + (1,) * (x.ndim - 1)) * v[active]
        flip = f.predict(pts) != y[active]
        hi[active[flip]] = mid[flip]
        lo[active[~flip]] = mid[~flip]
        active = active[(hi[active] - lo[active]) > tol]
    out = []
    final = f.predict(x + hi.reshape((-1,) + (1,) * (x.ndim - 1)) * v)
    for i in range(n):
        if any_flip[i]:
            out.append(DistanceResult(float(hi[i]), False, int(final[i]), float(lo[i])))
        else:
            out.append(DistanceResult(float(cap), True, None, float(cap)))
    return out


def boundary_distance(f: Network, x: np.ndarray, y: int, v: np.ndarray, cap: float = 2.0, tol: float = 1e-4) -> DistanceResult:
    v = np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise ValueError("direction must have unit l2 norm")
    return boundary_distances(f, np.asarray(x)[None], np.array([y]), v[None], cap, tol)[0]


@dataclass
class ModelDistance:
    dist: float
    d1: np.ndarray
    d2: np.ndarray
    capped1: int
    capped2: int

    def to_dict(self) -> dict:
        return {
            "dist": self.dist,
            "n_images": int(len(self.d1)),
            "capped_f1": self.capped1,
            "capped_f2": self.capped2,
        }


def model_distance(
    f1: Network,
    f2: Network,
    images: np.ndarray,
    labels: np.ndarray,
    cap: float = 2.0,
    tol: float = 1e-4,
    chunk: int = 250,
) -> ModelDistance:
    """Mean |d(F1, x) - d(F2, x)| along F1's gradient direction.

    Capped distances count at the cap value; how many were capped is
    reported next to the mean.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("model distance needs at least one image")
    d1, d2, c1, c2 = [], [], 0, 0
    for s in range(0, len(images), chunk):
        x, y = images[s : s + chunk], labels[s : s + chunk]
        v = gradient_directions(f1, x, y)
        r1 = boundary_distances(f1, x, y, v, cap, tol)
        r2 = boundary_distances(f2, x, y, v, cap, tol)
        d1 += [r.d for r in r1]
        d2 += [r.d for r in r2]
        c1 += sum(r.capped for r in r1)
        c2 += sum(r.capped for r in r2)
    d1, d2 = np.array(d1), np.array(d2)
    return ModelDistance(float(np.abs(d1 - d2).mean()), d1, d2, c1, c2)


def random_orthogonal(delta1: np.ndarray, seed: int) -> np.ndarray:
    """Gaussian direction orthogonal to ``delta1`` with the same l2 norm."""
    d1 = np.asarray(delta1, dtype=np.float64)
    if d1.size < 2:
        raise DirectionError("need at least two dimensions for an orthogonal direction")
    n1 = np.linalg.norm(d1)
    if n1 == 0:
        raise DirectionError("delta1 must be nonzero")
    u = d1.ravel() / n1
    rng = np.random.default_rng(seed)
    while True:
        g = rng.standard_normal(d1.size)
        for _ in range(2):
            g -= (g @ u) * u
        ng = np.linalg.norm(g)
        # a draw (nearly) parallel to delta1 leaves nothing to normalize
        if ng > 1e-8 * np.sqrt(d1.size):
            return (g * (n1 / ng)).reshape(d1.shape)


@dataclass
class DirectionPair:
    delta1: np.ndarray
    delta2: np.ndarray
    unit_norm: float = UNIT

    @classmethod
    def from_gradient(cls, f1: Network, x: np.ndarray, y: int, seed: int = 0, unit_norm: float = UNIT):
        d1 = unit_norm * gradient_direction(f1, x, y)
        return cls(d1, random_orthogonal(d1, seed), unit_norm)


class Region(enum.IntEnum):
    UNFOOLED = int(Outcome.UNFOOLED)
    DIFFERENT_MISTAKE = int(Outcome.DIFFERENT_MISTAKE)
    SAME_MISTAKE = int(Outcome.SAME_MISTAKE)
    NOT_ADVERSARIAL = 3


@dataclass
class BoundaryGrid:
    """labels[i, j] is the prediction at x + u_i delta1 + v_j delta2."""

    labels: np.ndarray
    coords: np.ndarray
    model_id: str = ""
    image_id: str = ""
    unit: float = UNIT
    meta: dict = field(default_factory=dict)

    @property
    def center(self) -> int:
        return len(self.coords) // 2

    @property
    def half_extent(self) -> float:
        return float(self.coords[-1])

    def first_flip_along_u(self) -> int | None:
        """Grid units from the center to the first label change on the +u axis."""
        c = self.center
        axis = self.labels[c:, c]
        changed = np.flatnonzero(axis != axis[0])
        return None if changed.size == 0 else int(changed[0])

    def header(self) -> dict:
        return {
            "model_id": self.model_id,
            "image_id": self.image_id,
            "unit": self.unit,
            "half_extent": self.half_extent,
            "resolution": int(len(self.coords)),
            "rows": "u (delta1, gradient direction)",
            "cols": "v (delta2, random orthogonal direction)",
            **self.meta,
        }


def boundary_grid(
    model: Network,
    x: np.ndarray,
    dirs: DirectionPair,
    half_extent: int = 30,
    resolution: int = 61,
    model_id: str = "",
    image_id: str = "",
) -> BoundaryGrid:
    if resolution % 2 == 0 or resolution < 1:
        raise ValueError("resolution must be odd so the image itself is a grid point")
    coords = np.linspace(-half_extent, half_extent, resolution)
    x = np.asarray(x, dtype=np.float64)
    labels = np.empty((resolution, resolution), dtype=np.int64)
    for i, u in enumerate(coords):
        pts = x[None] + u * dirs.delta1[None] + coords.reshape((-1,) + (1,) * x.ndim) * dirs.delta2[None]
        labels[i] = model.predict(pts)
    return BoundaryGrid(labels, coords, model_id, image_id, dirs.unit_norm)


def outcome_overlay(grid_f1: BoundaryGrid, grid_f2: BoundaryGrid, y: int) -> BoundaryGrid:
    """Tag each cell with its class-aware transfer outcome (see ``Region``)."""
    if grid_f1.labels.shape != grid_f2.labels.shape or not np.array_equal(grid_f1.coords, grid_f2.coords):
        raise ValueError("grids do not share geometry")
    l1, l2 = grid_f1.labels, grid_f2.labels
    region = np.full(l1.shape, int(Region.DIFFERENT_MISTAKE), dtype=np.int64)
    region[l2 == l1] = int(Region.SAME_MISTAKE)
    region[l2 == y] = int(Region.UNFOOLED)
    region[l1 == y] = int(Region.NOT_ADVERSARIAL)
    meta = {"kind": "overlay", "f1": grid_f1.model_id, "f2": grid_f2.model_id, "true_label": int(y),
            "codes": {r.name.lower(): int(r) for r in Region}}
    return BoundaryGrid(region, grid_f1.coords, grid_f1.model_id, grid_f1.image_id, grid_f1.unit, meta)


def save_grid(grid: BoundaryGrid, stem: str | os.PathLike) -> tuple[str, str]:
    """Write ``<stem>.csv`` (label matrix) and ``<stem>.json`` (header)."""
    stem = str(stem)
    with open(stem + ".csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in grid.labels:
            w.writerow([int(v) for v in row])
    with open(stem + ".json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(grid.header(), f, indent=1, sort_keys=True)
    return stem + ".csv", stem + ".json"


def load_grid(stem: str | os.PathLike) -> BoundaryGrid:
    stem = str(stem)
    with open(stem + ".json", encoding="utf-8") as f:
        head = json.load(f)
    labels = np.loadtxt(stem + ".csv", delimiter=",", dtype=np.int64, ndmin=2)
    coords = np.linspace(-head["half_extent"], head["half_extent"], head["resolution"])
    extra = {k: v for k, v in head.items() if k not in ("model_id", "image_id", "unit", "half_extent", "resolution", "rows", "cols")}
    return BoundaryGrid(labels, coords, head["model_id"], head["image_id"], head["unit"], extra)
