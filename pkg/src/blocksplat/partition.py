"""Scene contraction, uniform grid partitioning, block expansion and merge."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import CameraView, GaussianScene

log = logging.getLogger(__name__)

DEGENERATE_PAD = 1e-3
CONTRACT_LIMIT = 2.0


@dataclass(frozen=True)
class SceneBounds:
    p_min: np.ndarray
    p_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p_min", np.asarray(self.p_min, dtype=np.float64))
        object.__setattr__(self, "p_max", np.asarray(self.p_max, dtype=np.float64))
        if not (self.p_min < self.p_max).all():
            raise ValueError(f"invalid bounds {self.p_min} .. {self.p_max}")

    @property
    def extent(self):
        return self.p_max - self.p_min

    def to_dict(self):
        return {"p_min": self.p_min.tolist(), "p_max": self.p_max.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["p_min"]), np.array(d["p_max"]))


def _box_with_margin(lo, hi, margin):
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * (1.0 + margin)
    flat = half <= 0
    if flat.any():
        log.warning("degenerate bounds on axes %s; padding by %g", np.flatnonzero(flat).tolist(), DEGENERATE_PAD)
        half = np.where(flat, DEGENERATE_PAD, half)
    return SceneBounds(center - half, center + half)


def compute_bounds(cameras: Sequence[CameraView], margin: float = 0.0) -> SceneBounds:
    """Internal region = bounding box of the camera centres, grown by `margin`
    (a fraction of the half-extent) about its centre."""
    if len(cameras) < 2:
        raise ValueError("need at least two cameras to bound the scene")
    centers = np.array([c.center for c in cameras])
    return _box_with_margin(centers.min(axis=0), centers.max(axis=0), margin)


def bounds_from_gaussians(scene: GaussianScene, lo_pct: float = 1.0, hi_pct: float = 99.0,
                          margin: float = 0.0) -> SceneBounds:
    """Alternative internal region: percentile box of the Gaussian centres."""
    lo = np.percentile(scene.positions, lo_pct, axis=0)
    hi = np.percentile(scene.positions, hi_pct, axis=0)
    return _box_with_margin(lo, hi, margin)


def normalize_position(p, bounds: SceneBounds) -> np.ndarray:
    return 2.0 * (np.asarray(p, dtype=np.float64) - bounds.p_min) / bounds.extent - 1.0


def denormalize_position(p_hat, bounds: SceneBounds) -> np.ndarray:
    return (np.asarray(p_hat, dtype=np.float64) + 1.0) * 0.5 * bounds.extent + bounds.p_min


def contract(p_hat) -> np.ndarray:
    """Identity inside the unit inf-ball, (2 - 1/|p|)(p/|p|) outside."""
    p = np.asarray(p_hat, dtype=np.float64)
    n = np.abs(p).max(axis=-1, keepdims=True)
    safe = np.maximum(n, 1.0)
    out = np.where(n <= 1.0, p, (2.0 - 1.0 / safe) * (p / safe))
    # keep the image strictly inside the open cube even when 1/|p| underflows
    return np.clip(out, -np.nextafter(CONTRACT_LIMIT, 0), np.nextafter(CONTRACT_LIMIT, 0))


@dataclass(frozen=True)
class PartitionSpace:
    """Where the grid lives: contracted normalized space, or (for the
    no-contraction ablation) plain normalized world coordinates."""
    bounds: SceneBounds
    contracted: bool = True
    domain_min: np.ndarray = field(default_factory=lambda: np.full(3, -CONTRACT_LIMIT))
    domain_max: np.ndarray = field(default_factory=lambda: np.full(3, CONTRACT_LIMIT))

    def map(self, world) -> np.ndarray:
        p = normalize_position(world, self.bounds)
        return contract(p) if self.contracted else p

    @classmethod
    def world(cls, bounds: SceneBounds, scene: GaussianScene, cameras: Sequence[CameraView] = ()):
        pts = [normalize_position(scene.positions, bounds)]
        if len(cameras):
            pts.append(normalize_position(np.array([c.center for c in cameras]), bounds))
        pts = np.concatenate(pts)
        return cls(bounds, False, pts.min(axis=0), pts.max(axis=0))

    def to_dict(self):
        return {"bounds": self.bounds.to_dict(), "contracted": self.contracted,
                "domain_min": np.asarray(self.domain_min).tolist(),
                "domain_max": np.asarray(self.domain_max).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(SceneBounds.from_dict(d["bounds"]), d["contracted"],
                   np.array(d["domain_min"]), np.array(d["domain_max"]))


def in_box(coords, lo, hi, domain_max) -> np.ndarray:
    """Half-open [lo, hi) test; faces lying on the domain's upper boundary are closed."""
    coords = np.atleast_2d(coords)
    upper = (coords < hi) | ((hi >= domain_max) & (coords <= hi))
    return ((coords >= lo) & upper).all(axis=-1)


@dataclass
class BlockSpec:
    index: int
    b_min: np.ndarray
    b_max: np.ndarray
    expanded_min: np.ndarray
    expanded_max: np.ndarray
    member_indices: np.ndarray
    expanded_indices: np.ndarray
    assigned_view_ids: list = field(default_factory=list)
    expansion_factor: float = 1.0

    @property
    def trainable_indices(self) -> np.ndarray:
        return np.union1d(self.member_indices, self.expanded_indices)

    def to_dict(self):
        return {"index": self.index,
                "b_min": self.b_min.tolist(), "b_max": self.b_max.tolist(),
                "expanded_min": self.expanded_min.tolist(), "expanded_max": self.expanded_max.tolist(),
                "expansion_factor": self.expansion_factor,
                "member_count": int(len(self.member_indices)),
                "expanded_count": int(len(self.expanded_indices)),
                "member_indices": self.member_indices.tolist(),
                "expanded_indices": self.expanded_indices.tolist(),
                "assigned_view_ids": list(self.assigned_view_ids)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["index"], np.array(d["b_min"]), np.array(d["b_max"]),
                   np.array(d["expanded_min"]), np.array(d["expanded_max"]),
                   np.array(d["member_indices"], dtype=np.int64),
                   np.array(d["expanded_indices"], dtype=np.int64),
                   list(d.get("assigned_view_ids", [])), d.get("expansion_factor", 1.0))


def default_grid(n_blocks: int, bounds: SceneBounds) -> tuple:
    """Split n over the two axes of largest extent (a*b = n, a >= b, a on the largest)."""
    b = int(np.floor(np.sqrt(n_blocks)))
    while n_blocks % b:
        b -= 1
    a = n_blocks // b
    order = np.argsort(-bounds.extent, kind="stable")
    grid = [1, 1, 1]
    grid[order[0]] = a
    grid[order[1]] = b
    return tuple(grid)


def grid_edges(space: PartitionSpace, grid) -> list:
    lo, hi = np.asarray(space.domain_min, float), np.asarray(space.domain_max, float)
    edges = []
    for ax, g in enumerate(grid):
        e = lo[ax] + (hi[ax] - lo[ax]) * np.arange(g + 1) / g
        e[-1] = hi[ax]
        edges.append(e)
    return edges


def partition(scene: GaussianScene, space: PartitionSpace, grid) -> list[BlockSpec]:
    """Uniform grid over the partition domain; row-major block order
    (last axis fastest)."""
    grid = tuple(int(g) for g in grid)
    if min(grid) < 1:
        raise ValueError(f"bad grid {grid}")
    coords = space.map(scene.positions)
    edges = grid_edges(space, grid)
    cell = np.empty((len(coords), 3), dtype=np.int64)
    inside = np.ones(len(coords), dtype=bool)
    for ax in range(3):
        e = edges[ax]
        c = np.searchsorted(e, coords[:, ax], side="right") - 1
        c = np.where(coords[:, ax] == e[-1], grid[ax] - 1, c)
        inside &= (c >= 0) & (c < grid[ax])
        cell[:, ax] = c
    flat = np.where(inside, np.ravel_multi_index(cell.T.clip(0), grid, mode="clip"), -1)
    blocks = []
    for j, (ix, iy, iz) in enumerate(np.ndindex(*grid)):
        lo = np.array([edges[0][ix], edges[1][iy], edges[2][iz]])
        hi = np.array([edges[0][ix + 1], edges[1][iy + 1], edges[2][iz + 1]])
        members = np.flatnonzero(flat == j)
        blocks.append(BlockSpec(j, lo, hi, lo.copy(), hi.copy(), members, members.copy()))
    return blocks


def _count_in(coords, lo, hi, space):
    return int(np.count_nonzero(in_box(coords, lo, hi, space.domain_max)))


def _expanded_box(block, factor, space):
    c = 0.5 * (block.b_min + block.b_max)
    h = 0.5 * (block.b_max - block.b_min)
    lo = np.maximum(np.minimum(block.b_min, c - factor * h), space.domain_min)
    hi = np.minimum(np.maximum(block.b_max, c + factor * h), space.domain_max)
    return lo, hi


def expand_block(block: BlockSpec, coords: np.ndarray, k_threshold: int, space: PartitionSpace,
                 max_iter: int = 32, tol: float = 1e-4) -> BlockSpec:
    """Grow the block isotropically about its centre until it holds at least
    `k_threshold` points; the smallest such factor is found by bisection."""
    coords = np.atleast_2d(coords)

    def count(f):
        return _count_in(coords, *_expanded_box(block, f, space), space)

    c = 0.5 * (block.b_min + block.b_max)
    h = 0.5 * (block.b_max - block.b_min)
    f_full = float(max(((c - space.domain_min) / h).max(), ((space.domain_max - c) / h).max(), 1.0))
    if count(1.0) >= k_threshold:
        factor = 1.0
    elif count(f_full) < k_threshold:
        log.warning("block %d: threshold %d unreachable (max %d); using the full domain",
                    block.index, k_threshold, count(f_full))
        factor = f_full
    else:
        lo, hi = 1.0, f_full
        for _ in range(max_iter):
            if hi - lo < tol:
                break
            mid = 0.5 * (lo + hi)
            if count(mid) >= k_threshold:
                hi = mid
            else:
                lo = mid
        factor = hi
    emin, emax = _expanded_box(block, factor, space)
    if factor == f_full:
        emin, emax = np.asarray(space.domain_min, float).copy(), np.asarray(space.domain_max, float).copy()
    expanded = np.flatnonzero(in_box(coords, emin, emax, space.domain_max))
    return BlockSpec(block.index, block.b_min, block.b_max, emin, emax, block.member_indices,
                     np.union1d(expanded, block.member_indices), list(block.assigned_view_ids), factor)


def merge_blocks(refined: Sequence[tuple], space: PartitionSpace, report: Optional[dict] = None) -> GaussianScene:
    """Keep, from each refined block scene, only primitives inside that block's
    original bounds; concatenate in block order."""
    parts = []
    discarded = 0
    per_block = []
    for block, scene in refined:
        if scene is None or len(scene) == 0:
            per_block.append(0)
            continue
        keep = in_box(space.map(scene.positions), block.b_min, block.b_max, space.domain_max)
        discarded += int(len(scene) - keep.sum())
        per_block.append(int(keep.sum()))
        if keep.any():
            parts.append(scene.subset(np.flatnonzero(keep)))
    if report is not None:
        report.update(discarded=discarded, per_block=per_block)
    if not parts:
        raise RuntimeError("merge produced an empty scene")
    return GaussianScene.concatenate(parts)


def block_manifest(blocks: Sequence[BlockSpec]) -> str:
    rows = [{"index": b.index, "b_min": b.b_min.tolist(), "b_max": b.b_max.tolist(),
             "expanded_min": b.expanded_min.tolist(), "expanded_max": b.expanded_max.tolist(),
             "member_count": int(len(b.member_indices)),
             "expanded_count": int(len(b.expanded_indices))} for b in blocks]
    return json.dumps(rows, indent=2)
