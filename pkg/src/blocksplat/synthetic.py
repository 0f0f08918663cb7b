"""Synthetic dataset: textured ground, four object clusters, a far backdrop
shell and a deliberate share of low-contribution primitives (hidden
under-layer, object fillers, faint floaters), seen by an orbit of cameras.

Ground-truth images are rendered by this package's renderer from the PLY
round-tripped scene, so reloading the scene reproduces them exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import (CameraView, GaussianScene, load_scene_ply, look_at, rgb_to_dc, save_cameras,
                    save_image, save_scene_ply)
from .render import RenderOptions, render

UP = np.array([0.0, 0.0, 1.0])


@dataclass
class SyntheticSpec:
    n_gaussians: int = 500
    n_cameras: int = 24
    width: int = 64
    height: int = 64
    seed: int = 0
    holdout_every: int = 6
    orbit_radius: float = 3.2
    ring_heights: tuple = (0.9, 1.5)
    init_color_noise: float = 0.1
    # shares of n_gaussians; the remainder goes to the ground top layer
    objects: float = 0.12
    shell: float = 0.08
    under_layer: float = 0.22
    fillers: float = 0.20
    floaters: float = 0.18


def _quat_from_normal(n):
    """Quaternions (w,x,y,z) rotating +z onto each unit normal."""
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, n)
    s = np.linalg.norm(axis, axis=1)
    c = n @ z
    half = 0.5 * np.arctan2(s, c)
    axis = np.where(s[:, None] > 1e-12, axis / np.maximum(s, 1e-12)[:, None], np.array([1.0, 0.0, 0.0]))
    return np.c_[np.cos(half), axis * np.sin(half)[:, None]]


def _quat_about_z(theta):
    return np.c_[np.cos(theta / 2), np.zeros((len(theta), 2)), np.sin(theta / 2)]


def _random_quat(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _texture(xy):
    """Ground albedo: quadrant palette modulated by a smooth stripe pattern."""
    palette = np.array([[0.55, 0.35, 0.20], [0.25, 0.50, 0.25], [0.30, 0.35, 0.60], [0.60, 0.55, 0.30]])
    q = (xy[:, 0] > 0).astype(int) + 2 * (xy[:, 1] > 0).astype(int)
    mod = 0.15 * np.sin(2.5 * xy[:, 0]) * np.cos(2.0 * xy[:, 1])
    return np.clip(palette[q] + mod[:, None], 0.05, 0.95)


def _parts(spec: SyntheticSpec):
    n = spec.n_gaussians
    counts = {k: int(round(getattr(spec, k) * n))
              for k in ("objects", "shell", "under_layer", "fillers", "floaters")}
    counts["objects"] -= counts["objects"] % 4
    counts["fillers"] -= counts["fillers"] % 4
    counts["ground"] = n - sum(counts.values())
    return counts


def build_scene(spec: SyntheticSpec, rng) -> tuple[GaussianScene, dict]:
    counts = _parts(spec)
    pos, rot, scl, opa, col, label = [], [], [], [], [], []

    def add(p, q, s, o, c, name):
        pos.append(p), rot.append(q), scl.append(s), opa.append(o), col.append(c)
        label.extend([name] * len(p))

    # ground: jittered grid, flat splats
    ng = counts["ground"]
    side = int(np.ceil(np.sqrt(ng)))
    spacing = 4.8 / side
    gx, gy = np.meshgrid((np.arange(side) + 0.5) * spacing - 2.4, (np.arange(side) + 0.5) * spacing - 2.4)
    xy = np.c_[gx.ravel(), gy.ravel()][rng.permutation(side * side)[:ng]]
    xy += rng.uniform(-0.15, 0.15, xy.shape) * spacing
    add(np.c_[xy, np.zeros(ng)], _quat_about_z(rng.uniform(0, np.pi, ng)),
        np.c_[rng.uniform(0.55, 0.7, (ng, 2)) * spacing, np.full(ng, 0.01)],
        rng.uniform(0.9, 0.97, ng), _texture(xy), "ground")

    # objects: four spheres of surface splats
    centers = np.array([[1.1, 1.1, 0.4], [-1.1, 1.1, 0.4], [-1.1, -1.1, 0.4], [1.1, -1.1, 0.4]])
    obj_colors = np.array([[0.85, 0.2, 0.2], [0.2, 0.75, 0.85], [0.9, 0.85, 0.25], [0.7, 0.3, 0.8]])
    per = counts["objects"] // 4
    radius = 0.32
    k = np.arange(per) + 0.5
    phi = np.arccos(1 - 2 * k / per)
    theta = np.pi * (1 + 5 ** 0.5) * k
    dirs = np.c_[np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)]
    patch = radius * np.sqrt(4 * np.pi / per) * 0.55
    for c, base in zip(centers, obj_colors):
        shade = 0.75 + 0.25 * dirs[:, 2:3]
        add(c + radius * dirs, _quat_from_normal(dirs), np.c_[np.full((per, 2), patch), np.full(per, 0.01)],
            np.full(per, 0.95), np.clip(base * shade + rng.normal(0, 0.03, (per, 3)), 0.05, 0.95), "object")

    # backdrop shell: big splats far away, denser on one side
    ns = counts["shell"]
    az = np.where(rng.random(ns) < 0.7, rng.uniform(-1.0, 1.0, ns), rng.uniform(-np.pi, np.pi, ns))
    el = rng.uniform(0.0, 0.6, ns)
    dist = rng.uniform(8.0, 11.0, ns)
    d = np.c_[np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
    sky = np.c_[0.45 + 0.4 * el, 0.6 + 0.3 * el, np.full(ns, 0.9)]
    add(d * dist[:, None], _quat_from_normal(-d), np.c_[rng.uniform(1.2, 1.8, (ns, 2)), np.full(ns, 0.05)],
        np.full(ns, 0.9), np.clip(sky, 0, 1), "shell")

    # hidden under-layer beneath the ground
    nu = counts["under_layer"]
    uxy = rng.uniform(-2.3, 2.3, (nu, 2))
    add(np.c_[uxy, np.full(nu, -0.08)], _quat_about_z(rng.uniform(0, np.pi, nu)),
        np.c_[rng.uniform(0.1, 0.2, (nu, 2)), np.full(nu, 0.01)], rng.uniform(0.5, 0.9, nu),
        rng.uniform(0.1, 0.9, (nu, 3)), "under")

    # fillers inside the object spheres
    per_f = counts["fillers"] // 4
    for c in centers:
        r = 0.12 * rng.random(per_f) ** (1 / 3)
        u = rng.standard_normal((per_f, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        add(c + r[:, None] * u, _random_quat(rng, per_f), rng.uniform(0.02, 0.05, (per_f, 3)),
            rng.uniform(0.4, 0.8, per_f), rng.uniform(0.1, 0.9, (per_f, 3)), "filler")

    # faint floaters in the air
    nf = counts["floaters"]
    add(np.c_[rng.uniform(-2, 2, (nf, 2)), rng.uniform(0.2, 1.2, nf)], _random_quat(rng, nf),
        rng.uniform(0.003, 0.008, (nf, 3)), rng.uniform(0.02, 0.08, nf), rng.uniform(0, 1, (nf, 3)), "floater")

    colors = np.concatenate(col)
    K = len(colors)
    sh = np.zeros((K, 3, 16))
    sh[:, :, 0] = rgb_to_dc(colors)
    scene = GaussianScene(np.concatenate(pos), np.concatenate(rot), np.concatenate(scl),
                          np.concatenate(opa), sh)
    labels = np.array(label)
    return scene, {name: np.flatnonzero(labels == name).tolist() for name in dict.fromkeys(label)}


def build_cameras(spec: SyntheticSpec) -> list[CameraView]:
    cams = []
    f = 0.9 * spec.width
    target = np.array([0.0, 0.0, 0.25])
    for i in range(spec.n_cameras):
        ang = 2 * np.pi * i / spec.n_cameras + 0.1
        h = spec.ring_heights[i % len(spec.ring_heights)]
        eye = np.array([spec.orbit_radius * np.cos(ang), spec.orbit_radius * np.sin(ang), h])
        R, t = look_at(eye, target, UP)
        cams.append(CameraView(i, f, f * spec.height / spec.width, spec.width / 2, spec.height / 2,
                               spec.width, spec.height, R, t))
    return cams


def is_holdout(view_id: int, spec: SyntheticSpec) -> bool:
    return spec.holdout_every > 0 and view_id % spec.holdout_every == spec.holdout_every // 2


def inject_color_noise(scene: GaussianScene, sigma: float, seed: int) -> GaussianScene:
    """Add N(0, sigma) to each primitive's base colour (through the DC term)."""
    rng = np.random.default_rng(seed)
    sh = np.array(scene.sh)
    sh[:, :, 0] += rgb_to_dc(0.5 + rng.normal(0.0, sigma, (len(scene), 3)))
    return scene.replace(sh=sh)


def generate_synthetic(out_dir, spec: SyntheticSpec = None) -> dict:
    """Write scene_gt.ply, scene_init.ply (colour-noised), cameras.txt,
    images/normals/confidence maps and dataset.json under `out_dir`."""
    spec = spec or SyntheticSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    scene, groups = build_scene(spec, rng)
    save_scene_ply(scene, out / "scene_gt.ply")
    scene = load_scene_ply(out / "scene_gt.ply")
    init = inject_color_noise(scene, spec.init_color_noise, spec.seed + 1)
    save_scene_ply(init, out / "scene_init.ply")

    cams = build_cameras(spec)
    for sub in ("normals", "confidence"):
        (out / sub).mkdir(exist_ok=True)
    paths = {}
    opts = RenderOptions(normals=True)
    for cam in cams:
        r = render(scene, cam, opts)
        normal = np.where(r.alpha[..., None] > 0, r.normal, 0.0)
        bad = np.linalg.norm(normal, axis=-1) < 0.5
        normal[bad] = (0.0, 0.0, 1.0)
        conf = np.where(bad, 0.0, r.alpha)
        stem = f"{cam.id:03d}"
        save_image(r.color, out / "images" / f"{stem}.npy")
        save_image(r.color, out / "previews" / f"{stem}.png")
        np.save(out / "normals" / f"{stem}.npy", normal)
        np.save(out / "confidence" / f"{stem}.npy", conf)
        paths[cam.id] = {"image": f"images/{stem}.npy", "normal": f"normals/{stem}.npy",
                         "confidence": f"confidence/{stem}.npy",
                         "split": "test" if is_holdout(cam.id, spec) else "train"}
    save_cameras(cams, out / "cameras.txt", paths)
    meta = {"spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()},
            "count": len(scene), "groups": groups,
            "holdout": [c.id for c in cams if is_holdout(c.id, spec)]}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta
