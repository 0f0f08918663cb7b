"""Training-view assignment: SSIM-differential and camera-position criteria."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .metrics import ssim
from .model import CameraView, GaussianScene
from .partition import BlockSpec, PartitionSpace, in_box
from .render import RenderOptions, render


@dataclass
class AssignmentReport:
    block_index: int
    p1_ids: list = field(default_factory=list)
    p2_ids: list = field(default_factory=list)
    final_ids: list = field(default_factory=list)
    per_view_ssim_loss: dict = field(default_factory=dict)

    def to_dict(self):
        return {"block_index": self.block_index, "p1_ids": self.p1_ids, "p2_ids": self.p2_ids,
                "final_ids": self.final_ids,
                "per_view_ssim_loss": {str(k): v for k, v in sorted(self.per_view_ssim_loss.items())}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["block_index"], d["p1_ids"], d["p2_ids"], d["final_ids"],
                   {int(k): v for k, v in d["per_view_ssim_loss"].items()})


def _background(cam, opts):
    return np.broadcast_to(np.asarray(opts.background, float), (cam.height, cam.width, 3))


def assign_by_ssim(scene: GaussianScene, block: BlockSpec, cameras: Sequence[CameraView],
                   epsilon: float, scale: float = 0.25, background=(0.0, 0.0, 0.0),
                   full_renders: Optional[dict] = None):
    """Keep a view when removing the block's (expanded) Gaussians changes its
    render by more than `epsilon` in SSIM loss. Returns (ids, {id: loss})."""
    opts = RenderOptions(background=background, scale=scale)
    removed = np.asarray(block.expanded_indices, dtype=np.int64)
    rest = np.setdiff1d(np.arange(len(scene)), removed)
    reduced = scene.subset(rest) if len(rest) else None
    ids, losses = [], {}
    for cam in cameras:
        if full_renders is not None and cam.id in full_renders:
            full = full_renders[cam.id]
        else:
            full = render(scene, cam, opts).color
            if full_renders is not None:
                full_renders[cam.id] = full
        if len(removed) == 0:
            loss = 0.0
        else:
            if reduced is not None:
                without = render(reduced, cam, opts).color
            else:
                without = _background(cam.without_image().scaled(scale), opts)
            loss = 1.0 - ssim(full, without)
        losses[cam.id] = float(loss)
        if loss > epsilon:
            ids.append(cam.id)
    return ids, losses


def assign_by_bounds(block: BlockSpec, cameras: Sequence[CameraView], space: PartitionSpace) -> list:
    """Keep a view when its camera centre maps into the block's expanded bounds."""
    if not len(cameras):
        return []
    centers = space.map(np.array([c.center for c in cameras]))
    inside = in_box(centers, block.expanded_min, block.expanded_max, space.domain_max)
    return [c.id for c, ok in zip(cameras, inside) if ok]


def merge_assignments(p1, p2) -> list:
    """Order-stable union without duplicates."""
    out = []
    seen = set()
    for v in list(p1) + list(p2):
        if v not in seen:
            seen.add(v)
            out.append(v)
    return out


def assign_views(scene: GaussianScene, blocks: Sequence[BlockSpec], cameras: Sequence[CameraView],
                 space: PartitionSpace, epsilon: float = 0.1, scale: float = 0.25,
                 use_ssim: bool = True, use_bounds: bool = True, background=(0.0, 0.0, 0.0)):
    """Assign views to every block; returns (reports, unassigned view ids).
    Blocks get their `assigned_view_ids` filled in place."""
    cache = {}
    reports = []
    for block in blocks:
        p1, losses = (assign_by_ssim(scene, block, cameras, epsilon, scale, background, cache)
                      if use_ssim else ([], {}))
        p2 = assign_by_bounds(block, cameras, space) if use_bounds else []
        final = merge_assignments(p1, p2)
        block.assigned_view_ids = final
        reports.append(AssignmentReport(block.index, p1, p2, final, losses))
    used = {v for r in reports for v in r.final_ids}
    unassigned = [c.id for c in cameras if c.id not in used]
    return reports, unassigned


def assignment_report_text(reports: Sequence[AssignmentReport], unassigned: Sequence[int]) -> str:
    return json.dumps({"blocks": [r.to_dict() for r in reports], "unassigned": list(unassigned)}, indent=2)
