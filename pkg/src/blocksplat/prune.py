"""Importance-driven pruning.

score = opacity * ln(1 + volume) * H, where H sums, over every training ray
that hits the Gaussian, the transmittance in front of it.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .model import CameraView, GaussianScene
from .render import RenderOptions, render


@dataclass(frozen=True)
class ImportanceRecord:
    source_index: int
    hit_weight: float
    volume: float
    log_volume: float
    opacity: float
    score: float


@dataclass
class ImportanceTable:
    """Column-wise records for a subset of primitives."""
    source_index: np.ndarray
    hit_weight: np.ndarray
    volume: np.ndarray = None
    log_volume: np.ndarray = None
    opacity: np.ndarray = None
    score: np.ndarray = None

    def __len__(self):
        return len(self.source_index)

    def __iter__(self) -> Iterator[ImportanceRecord]:
        for i in range(len(self)):
            yield ImportanceRecord(int(self.source_index[i]), float(self.hit_weight[i]),
                                   float(self.volume[i]), float(self.log_volume[i]),
                                   float(self.opacity[i]), float(self.score[i]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "H", "v", "log_v", "alpha", "S"])
            for r in self:
                w.writerow([r.source_index, repr(r.hit_weight), repr(r.volume), repr(r.log_volume),
                            repr(r.opacity), repr(r.score)])


def hit_weights(scene: GaussianScene, views: Sequence[CameraView], scale: float = 0.5) -> np.ndarray:
    """H for every primitive of the scene, summed over views in the given order."""
    H = np.zeros(len(scene))
    opts = RenderOptions(scale=scale, capture_traces=True)
    for cam in views:
        tr = render(scene, cam, opts).traces
        H += np.bincount(tr.source, weights=tr.transmittance, minlength=len(scene))
    return H


def accumulate_hits(scene: GaussianScene, views: Sequence[CameraView], subset=None,
                    scale: float = 0.5) -> ImportanceTable:
    if not len(views):
        raise ValueError("hit accumulation needs at least one view")
    subset = np.arange(len(scene)) if subset is None else np.asarray(subset, dtype=np.int64)
    H = hit_weights(scene, views, scale)
    return ImportanceTable(subset, H[subset])


def score(records: ImportanceTable, scene: GaussianScene) -> ImportanceTable:
    idx = records.source_index
    v = np.prod(scene.scales[idx], axis=1)
    lv = np.log1p(v)
    op = scene.opacities[idx]
    return ImportanceTable(idx, records.hit_weight, v, lv, op, op * lv * records.hit_weight)


def prune(scene: GaussianScene, subset, records: ImportanceTable, fraction: float,
          lowest: bool = True):
    """Drop floor(fraction * |subset|) lowest-scoring members of `subset`.

    `lowest=False` drops the highest-scoring instead (control experiment).
    Returns (pruned scene, removed indices sorted ascending).
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"prune fraction must be in [0, 1), got {fraction}")
    subset = np.asarray(subset, dtype=np.int64)
    lookup = dict(zip(records.source_index.tolist(), records.score.tolist()))
    scores = np.array([lookup[i] for i in subset.tolist()])
    n_remove = int(np.floor(fraction * len(subset)))
    if n_remove == 0:
        return scene, np.zeros(0, dtype=np.int64)
    ranked = subset[np.lexsort((subset, -scores))]  # score desc, index asc
    removed = np.sort(ranked[-n_remove:] if lowest else ranked[:n_remove])
    keep = np.setdiff1d(np.arange(len(scene)), removed)
    return scene.subset(keep), removed
