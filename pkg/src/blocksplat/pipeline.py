"""Stage runner: coarse -> partition -> assign -> score -> refine -> merge -> evaluate.

Stages talk only through files under the output directory. Each stage writes
a deterministic ``manifest.json`` (content hashes, seed, memory accounting)
and a separate ``timings.json`` so reruns reproduce the manifest byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .assign import AssignmentReport, assign_views, assignment_report_text
from .config import PipelineConfig
from .metrics import psnr, ssim
from .model import BYTES_PER_PRIMITIVE, CameraView, GaussianScene, load_cameras, load_scene_ply, save_image, \
    save_scene_ply
from .partition import (BlockSpec, PartitionSpace, block_manifest, bounds_from_gaussians, compute_bounds,
                        default_grid, expand_block, merge_blocks, partition)
from .prune import accumulate_hits, score
from .refine import RefineConfig, refine_block
from .render import RenderOptions, render

log = logging.getLogger(__name__)

STAGES = ("coarse", "partition", "assign", "score", "refine", "merge", "evaluate")
REQUIRES = {"coarse": (), "partition": ("coarse",), "assign": ("partition",), "score": ("coarse",),
            "refine": ("assign",), "merge": ("refine",), "evaluate": ("merge",)}
METRIC_COLUMNS = ("view_id", "psnr_db", "ssim")


class StageOrderError(RuntimeError):
    pass


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def memory_bytes(count: int) -> int:
    return int(count) * BYTES_PER_PRIMITIVE


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self._cameras = None

    # ------------------------------------------------------------------ helpers
    def stage_dir(self, stage: str) -> Path:
        return self.cfg.out / stage

    def manifest_path(self, stage: str) -> Path:
        return self.stage_dir(stage) / "manifest.json"

    def manifest(self, stage: str) -> dict:
        return json.loads(self.manifest_path(stage).read_text())

    def _require(self, stage: str):
        for dep in REQUIRES[stage]:
            if not self.manifest_path(dep).exists():
                raise StageOrderError(f"stage '{stage}' needs stage '{dep}' to run first "
                                      f"(missing {self.manifest_path(dep)})")

    @property
    def cameras(self) -> list[CameraView]:
        if self._cameras is None:
            self._cameras = load_cameras(self.cfg.root / self.cfg.cameras_file)
        return self._cameras

    @property
    def train_views(self) -> list[CameraView]:
        return [c for c in self.cameras if c.extra.get("split", "train") != "test"]

    @property
    def test_views(self) -> list[CameraView]:
        return [c for c in self.cameras if c.extra.get("split", "train") == "test"]

    def _views(self, ids) -> list[CameraView]:
        by_id = {c.id: c for c in self.cameras}
        return [by_id[i] for i in ids]

    def coarse_scene(self) -> GaussianScene:
        return load_scene_ply(self.stage_dir("coarse") / "scene.ply")

    def space(self) -> PartitionSpace:
        return PartitionSpace.from_dict(json.loads((self.stage_dir("partition") / "space.json").read_text()))

    def blocks(self) -> list[BlockSpec]:
        d = json.loads((self.stage_dir("partition") / "blocks.json").read_text())
        return [BlockSpec.from_dict(b) for b in d]

    def assigned_blocks(self) -> list[BlockSpec]:
        d = json.loads((self.stage_dir("assign") / "blocks.json").read_text())
        return [BlockSpec.from_dict(b) for b in d]

    def _inputs_hash(self, paths: dict) -> dict:
        return {k: file_hash(p) for k, p in sorted(paths.items())}

    def _finish(self, stage: str, inputs: dict, outputs: dict, memory: dict, extra: Optional[dict] = None,
                started: float = 0.0) -> dict:
        out_dir = self.stage_dir(stage)
        manifest = {"stage": stage, "seed": self.cfg.seed,
                    "config_sha256": hashlib.sha256(self.cfg.to_json().encode()).hexdigest(),
                    "inputs": self._inputs_hash(inputs), "outputs": self._inputs_hash(outputs),
                    "memory": memory}
        if extra:
            manifest.update(extra)
        self.manifest_path(stage).write_text(_dump(manifest))
        (out_dir / "timings.json").write_text(_dump({"stage": stage, "seconds": time.perf_counter() - started}))
        return manifest

    def write_config_snapshot(self) -> Path:
        self.cfg.out.mkdir(parents=True, exist_ok=True)
        path = self.cfg.out / "config.resolved.json"
        path.write_text(self.cfg.to_json() + "\n")
        return path

    # ------------------------------------------------------------------- stages
    def run(self, stage: str) -> dict:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
        self._require(stage)
        self.write_config_snapshot()
        self.stage_dir(stage).mkdir(parents=True, exist_ok=True)
        log.info("stage %s", stage)
        return getattr(self, f"_run_{stage}")(time.perf_counter())

    def run_all(self, stages: Sequence[str] = STAGES) -> dict:
        return {s: self.run(s) for s in stages}

    def _run_coarse(self, t0):
        cfg = self.cfg
        out = self.stage_dir("coarse")
        cam_file = cfg.root / cfg.cameras_file
        if cfg.coarse_scene:
            src = Path(cfg.coarse_scene)
            src = src if src.is_absolute() else cfg.root / src
            scene = load_scene_ply(src)
            records = [{"event": "external", "path": str(cfg.coarse_scene), "count": len(scene)}]
            peak = len(scene)
        else:
            src = cfg.root / cfg.init_scene
            init = load_scene_ply(src)
            ccfg = _with(cfg.coarse, seed=cfg.seed, prune_fraction=cfg.coarse.prune_fraction if cfg.idgp else 0.0)
            res = refine_block(np.arange(len(init)), init, self.train_views, ccfg, cfg.background)
            scene, records, peak = res.scene, res.log, len(init)
        save_scene_ply(scene, out / "scene.ply")
        _write_jsonl(out / "log.jsonl", records)
        memory = {"peak_primitives": int(peak), "peak_bytes": memory_bytes(peak),
                  "output_primitives": len(scene), "output_bytes": memory_bytes(len(scene))}
        return self._finish("coarse", {"scene_in": src, "cameras": cam_file},
                            {"scene": out / "scene.ply", "log": out / "log.jsonl"}, memory, started=t0)

    def _run_partition(self, t0):
        cfg = self.cfg
        out = self.stage_dir("partition")
        scene = self.coarse_scene()
        if cfg.bounds_mode == "cameras":
            bounds = compute_bounds(self.train_views, cfg.bounds_margin)
        else:
            bounds = bounds_from_gaussians(scene, margin=cfg.bounds_margin)
        if cfg.contraction:
            space = PartitionSpace(bounds)
        else:
            space = PartitionSpace.world(bounds, scene, self.train_views)
        grid = cfg.grid or default_grid(cfg.n_blocks, bounds)
        blocks = partition(scene, space, grid)
        k_thr = cfg.k_threshold if cfg.k_threshold is not None else len(scene) // (2 * len(blocks))
        coords = space.map(scene.positions)
        blocks = [expand_block(b, coords, k_thr, space) for b in blocks]
        (out / "space.json").write_text(_dump(space.to_dict()))
        (out / "blocks.json").write_text(_dump([b.to_dict() for b in blocks]))
        (out / "block_manifest.json").write_text(block_manifest(blocks) + "\n")
        memory = {"per_block_members": [int(len(b.member_indices)) for b in blocks],
                  "per_block_expanded": [int(len(b.expanded_indices)) for b in blocks],
                  "per_block_trainable": [int(len(b.trainable_indices)) for b in blocks]}
        return self._finish("partition", {"coarse": self.stage_dir("coarse") / "scene.ply"},
                            {"space": out / "space.json", "blocks": out / "blocks.json"}, memory,
                            extra={"grid": list(grid), "k_threshold": int(k_thr)}, started=t0)

    def _run_assign(self, t0):
        cfg = self.cfg
        out = self.stage_dir("assign")
        scene = self.coarse_scene()
        blocks = self.blocks()
        reports, unassigned = assign_views(scene, blocks, self.train_views, self.space(), cfg.epsilon,
                                           cfg.assign_scale, cfg.so_assignment, cfg.bo_assignment,
                                           cfg.background)
        (out / "report.json").write_text(assignment_report_text(reports, unassigned) + "\n")
        (out / "blocks.json").write_text(_dump([b.to_dict() for b in blocks]))
        memory = {"per_block_views": [len(r.final_ids) for r in reports]}
        return self._finish("assign", {"coarse": self.stage_dir("coarse") / "scene.ply",
                                       "blocks": self.stage_dir("partition") / "blocks.json"},
                            {"report": out / "report.json", "blocks": out / "blocks.json"}, memory,
                            extra={"unassigned": unassigned}, started=t0)

    def _run_score(self, t0):
        cfg = self.cfg
        out = self.stage_dir("score")
        scene = self.coarse_scene()
        table = score(accumulate_hits(scene, self.train_views, None, cfg.score_scale), scene)
        table.write_csv(out / "scores.csv")
        return self._finish("score", {"coarse": self.stage_dir("coarse") / "scene.ply"},
                            {"scores": out / "scores.csv"}, {"primitives": len(scene)}, started=t0)

    def _run_refine(self, t0):
        cfg = self.cfg
        out = self.stage_dir("refine")
        coarse_path = self.stage_dir("coarse") / "scene.ply"
        blocks = self.assigned_blocks()
        rcfg = cfg.refine if cfg.idgp else _with(cfg.refine, prune_fraction=0.0)
        jobs = [(str(coarse_path), b.to_dict(), self._block_views_spec(b), rcfg.to_dict(), cfg.seed,
                 list(cfg.background), str(self.cfg.root / self.cfg.cameras_file), str(out)) for b in blocks]
        if cfg.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(cfg.workers) as pool:
                summaries = list(pool.map(_refine_job, jobs))
        else:
            summaries = [_refine_job(j) for j in jobs]
        outputs = {}
        for s in summaries:
            outputs[f"block_{s['index']:02d}_scene"] = out / s["scene"]
            outputs[f"block_{s['index']:02d}_log"] = out / s["log"]
        coarse_count = len(self.coarse_scene())
        memory = {"coarse_primitives": coarse_count,
                  "per_block_peak_trainable": [s["peak_trainable"] for s in summaries],
                  "per_block_final_trainable": [s["final_trainable"] for s in summaries],
                  "per_block_scene_primitives": [s["scene_count"] for s in summaries],
                  "max_block_trainable": max(s["peak_trainable"] for s in summaries),
                  "max_block_trainable_bytes": memory_bytes(max(s["peak_trainable"] for s in summaries)),
                  "max_block_trainable_fraction": max(s["peak_trainable"] for s in summaries) / coarse_count}
        return self._finish("refine", {"coarse": coarse_path, "blocks": self.stage_dir("assign") / "blocks.json"},
                            outputs, memory, extra={"blocks": summaries}, started=t0)

    def _block_views_spec(self, block):
        return [int(v) for v in block.assigned_view_ids]

    def _run_merge(self, t0):
        out = self.stage_dir("merge")
        rman = self.manifest("refine")
        blocks = self.assigned_blocks()
        refined = []
        for b, s in zip(blocks, rman["blocks"]):
            refined.append((b, load_scene_ply(self.stage_dir("refine") / s["scene"])))
        report = {}
        merged = merge_blocks(refined, self.space(), report)
        save_scene_ply(merged, out / "scene.ply")
        coarse_count = len(self.coarse_scene())
        memory = {"coarse_primitives": coarse_count, "coarse_bytes": memory_bytes(coarse_count),
                  "merged_primitives": len(merged), "final_model_bytes": memory_bytes(len(merged)),
                  "max_block_trainable": rman["memory"]["max_block_trainable"],
                  "discarded_outside_blocks": report["discarded"], "per_block_kept": report["per_block"]}
        return self._finish("merge", {f"block_{i:02d}": self.stage_dir("refine") / s["scene"]
                                      for i, s in enumerate(rman["blocks"])},
                            {"scene": out / "scene.ply"}, memory, started=t0)

    def _run_evaluate(self, t0):
        out = self.stage_dir("evaluate")
        views = self.test_views or self.cameras
        merged = load_scene_ply(self.stage_dir("merge") / "scene.ply")
        coarse = self.coarse_scene()
        rows = evaluate(merged, views, self.cfg.background, out / "renders")
        coarse_rows = evaluate(coarse, views, self.cfg.background)
        table = rows + [summary_row(rows, "mean"), summary_row(coarse_rows, "coarse_mean")]
        write_metrics(table, out / "metrics.csv")
        return self._finish("evaluate", {"merged": self.stage_dir("merge") / "scene.ply",
                                         "coarse": self.stage_dir("coarse") / "scene.ply"},
                            {"metrics": out / "metrics.csv"}, {"merged_primitives": len(merged)},
                            extra={"mean_psnr_db": _num(table[-2]["psnr_db"]),
                                   "coarse_mean_psnr_db": _num(table[-1]["psnr_db"])}, started=t0)


def _num(x):
    return x if np.isfinite(x) else str(x)


def _with(cfg: RefineConfig, **changes) -> RefineConfig:
    return RefineConfig(**{**cfg.to_dict(), **changes})


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _refine_job(job):
    coarse_path, block_d, view_ids, rcfg_d, seed, background, cam_file, out_dir = job
    block = BlockSpec.from_dict(block_d)
    coarse = load_scene_ply(coarse_path)
    by_id = {c.id: c for c in load_cameras(cam_file)}
    views = [by_id[i] for i in view_ids]
    rcfg = RefineConfig(**{**rcfg_d, "seed": seed + block.index})
    res = refine_block(block, coarse, views, rcfg, tuple(background))
    out = Path(out_dir)
    stem = f"block_{block.index:02d}"
    save_scene_ply(res.scene, out / f"{stem}.ply")
    _write_jsonl(out / f"{stem}.log.jsonl", res.log)
    np.save(out / f"{stem}.source_index.npy", res.source_index)
    return {"index": block.index, "scene": f"{stem}.ply", "log": f"{stem}.log.jsonl",
            "views": len(views), "skipped": res.skipped, "peak_trainable": int(res.peak_trainable),
            "final_trainable": int(len(res.trainable)), "scene_count": len(res.scene)}


# ----------------------------------------------------------------------------------------
# evaluation

def evaluate(scene: GaussianScene, views: Sequence[CameraView], background=(0.0, 0.0, 0.0),
             render_dir: Optional[Path] = None) -> list[dict]:
    rows = []
    opts = RenderOptions(background=tuple(background))
    for cam in views:
        img = render(scene, cam, opts).color
        if render_dir is not None:
            save_image(img, Path(render_dir) / f"{cam.id:03d}.png")
        rows.append({"view_id": cam.id, "psnr_db": psnr(img, cam.image), "ssim": ssim(img, cam.image)})
    return rows


def summary_row(rows, label) -> dict:
    return {"view_id": label, "psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows]))}


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["view_id"], repr(float(r["psnr_db"])), repr(float(r["ssim"]))])


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [{"view_id": r["view_id"], "psnr_db": float(r["psnr_db"]), "ssim": float(r["ssim"])}
                for r in csv.DictReader(fh)]
