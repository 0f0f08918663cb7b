"""CPU tile-based forward splatting.

Gaussians are projected with the EWA pinhole Jacobian, sorted globally by
depth, binned into 16x16 tiles and alpha-composited front to back. Within a
tile the compositing is vectorised over (splat, pixel) pairs; the result is
identical to a sequential per-pixel loop with the same cutoffs.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import CameraView, GaussianPrimitive, GaussianScene, eval_sh_raw

NEAR = 0.01
LOWPASS = 0.3
ALPHA_CUTOFF = 1.0 / 255.0
T_STOP = 1e-4
GUARD_BAND = 1.3
TILE = 16


@dataclass
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    capture_traces: bool = False
    normals: bool = False
    alpha_cutoff: float = ALPHA_CUTOFF
    t_stop: float = T_STOP
    tile: int = TILE
    workers: int = 1


@dataclass(frozen=True)
class Splat2D:
    source_index: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass
class Projection:
    """Projected scene, one row per input Gaussian (invalid rows are culled)."""
    valid: np.ndarray      # (K,) bool
    mean2d: np.ndarray     # (K,2)
    cov2d: np.ndarray      # (K,2,2)
    conic: np.ndarray      # (K,3) a, b, c of the inverse covariance
    depth: np.ndarray      # (K,)
    color: np.ndarray      # (K,3) clamped colour
    color_raw: np.ndarray  # (K,3) before clamping
    opacity: np.ndarray    # (K,)
    extent: np.ndarray     # (K,2) half-widths of the pixel bounding box
    normal_cam: np.ndarray  # (K,3) shortest-axis normal in camera space, facing the camera


@dataclass
class Traces:
    """Per-pixel contribution lists, flattened.

    Entries of one pixel are contiguous and in compositing order. `pixel` is
    a flat row-major index; `transmittance` is T immediately before the
    splat was composited.
    """
    pixel: np.ndarray
    source: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    gauss: np.ndarray  # exp(-0.5 d^T cov^-1 d), so alpha = opacity * gauss

    @property
    def weight(self):
        return self.alpha * self.transmittance


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    camera: CameraView
    normal: Optional[np.ndarray] = None
    traces: Optional[Traces] = None
    projection: Optional[Projection] = None


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def covariance3d(rotations: np.ndarray, scales: np.ndarray) -> np.ndarray:
    R = quat_to_rotmat(rotations)
    return np.einsum("kij,kj,klj->kil", R, scales ** 2, R)


def project_scene(scene: GaussianScene, cam: CameraView, alpha_cutoff: float = ALPHA_CUTOFF) -> Projection:
    K = len(scene)
    Rc, tc = cam.rotation, cam.translation
    pc = scene.positions @ Rc.T + tc
    depth = -pc[:, 2]
    in_front = depth > NEAR
    d = np.where(in_front, depth, 1.0)

    u = cam.cx + cam.fx * pc[:, 0] / d
    v = cam.cy - cam.fy * pc[:, 1] / d
    mean2d = np.stack([u, v], axis=1)

    # Jacobian evaluated with the centre clamped to the guard band, as in 3DGS
    limx = GUARD_BAND * 0.5 * cam.width / cam.fx
    limy = GUARD_BAND * 0.5 * cam.height / cam.fy
    tx = np.clip(pc[:, 0] / d, -limx, limx)
    ty = np.clip(pc[:, 1] / d, -limy, limy)
    J = np.zeros((K, 2, 3))
    J[:, 0, 0] = cam.fx / d
    J[:, 0, 2] = cam.fx * tx / d
    J[:, 1, 1] = -cam.fy / d
    J[:, 1, 2] = -cam.fy * ty / d

    cov_world = covariance3d(scene.rotations, scene.scales)
    cov_cam = np.einsum("ij,kjl,ml->kim", Rc, cov_world, Rc)
    cov2d = np.einsum("kij,kjl,kml->kim", J, cov_cam, J)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1], -cov2d[:, 0, 1], cov2d[:, 0, 0]], axis=1) / det[:, None]

    opacity = scene.opacities
    if alpha_cutoff > 0:
        q = 2.0 * np.log(np.maximum(opacity, 1e-300) / alpha_cutoff)
        visible = opacity >= alpha_cutoff
        q = np.maximum(q, 0.0)
    else:
        q = np.full(K, np.inf)
        visible = opacity > 0
    with np.errstate(invalid="ignore"):
        extent = np.sqrt(q[:, None] * np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1))

    gx0, gx1 = -0.5 * (GUARD_BAND - 1) * cam.width, 0.5 * (GUARD_BAND + 1) * cam.width
    gy0, gy1 = -0.5 * (GUARD_BAND - 1) * cam.height, 0.5 * (GUARD_BAND + 1) * cam.height
    with np.errstate(invalid="ignore"):
        overlaps = ((u + extent[:, 0] >= gx0) & (u - extent[:, 0] <= gx1)
                    & (v + extent[:, 1] >= gy0) & (v - extent[:, 1] <= gy1))
    valid = in_front & visible & (det > 0) & overlaps

    center = cam.center
    dirs = scene.positions - center
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    color_raw = eval_sh_raw(scene.sh, dirs)

    Rg = quat_to_rotmat(scene.rotations)
    n_world = Rg[np.arange(K), :, np.argmin(scene.scales, axis=1)]
    n_cam = n_world @ Rc.T
    flip = np.einsum("ki,ki->k", n_cam, -pc) < 0
    n_cam[flip] *= -1

    return Projection(valid, mean2d, cov2d, conic, depth, np.clip(color_raw, 0.0, 1.0),
                      color_raw, opacity, extent, n_cam)


def project_gaussian(g: GaussianPrimitive, cam: CameraView) -> Optional[Splat2D]:
    scene = GaussianScene(g.position[None], g.rotation[None], g.scale[None],
                          np.array([g.opacity]), g.sh_coeffs[None])
    p = project_scene(scene, cam)
    if not p.valid[0]:
        return None
    return Splat2D(0, p.mean2d[0], p.cov2d[0], float(p.depth[0]), p.color[0], float(p.opacity[0]))


def depth_order(proj: Projection) -> np.ndarray:
    """Valid splat indices sorted by depth, ties by source index."""
    idx = np.flatnonzero(proj.valid)
    return idx[np.lexsort((idx, proj.depth[idx]))]


def _composite(alpha, t_stop):
    """alpha (n,P) in depth order -> (T before each splat, include mask, final T)."""
    one_minus = 1.0 - alpha
    T = np.empty_like(alpha)
    if len(alpha):
        T[0] = 1.0
        np.cumprod(one_minus[:-1], axis=0, out=T[1:])
    include = (alpha > 0) & (T >= t_stop)
    t_final = np.prod(np.where(include, one_minus, 1.0), axis=0)
    return T, include, t_final


def _render_tile(proj, order, opts, x0, x1, y0, y1, W):
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    px, py = np.meshgrid(xs, ys)
    px, py = px.ravel(), py.ravel()
    P = len(px)

    m = proj.mean2d[order]
    e = proj.extent[order]
    hit = ((m[:, 0] + e[:, 0] >= xs[0]) & (m[:, 0] - e[:, 0] <= xs[-1])
           & (m[:, 1] + e[:, 1] >= ys[0]) & (m[:, 1] - e[:, 1] <= ys[-1]))
    ids = order[hit]
    bg = np.asarray(opts.background, dtype=np.float64)
    if len(ids) == 0:
        return dict(color=np.tile(bg, (P, 1)), depth=np.zeros(P), alpha=np.zeros(P),
                    normal=np.zeros((P, 3)), traces=None)

    dx = px[None, :] - proj.mean2d[ids, 0:1]
    dy = py[None, :] - proj.mean2d[ids, 1:2]
    cn = proj.conic[ids]
    power = -0.5 * (cn[:, 0:1] * dx * dx + 2 * cn[:, 1:2] * dx * dy + cn[:, 2:3] * dy * dy)
    gauss = np.exp(np.minimum(power, 0.0))
    alpha = proj.opacity[ids, None] * gauss
    if opts.alpha_cutoff > 0:
        alpha = np.where(alpha >= opts.alpha_cutoff, alpha, 0.0)
    T, include, t_final = _composite(alpha, opts.t_stop)
    w = np.where(include, alpha * T, 0.0)

    out = dict(color=w.T @ proj.color[ids] + t_final[:, None] * bg,
               alpha=1.0 - t_final)
    acc = out["alpha"]
    zsum = w.T @ proj.depth[ids]
    out["depth"] = np.where(acc > 0, zsum / np.maximum(acc, 1e-12), 0.0)
    if opts.normals:
        out["normal"] = w.T @ proj.normal_cam[ids]
    if opts.capture_traces:
        k, p = np.nonzero(include.T)[::-1]  # sorted by pixel, then depth rank
        gy, gx = p // (x1 - x0) + y0, p % (x1 - x0) + x0
        out["traces"] = (gy * W + gx, ids[k], alpha[k, p], T[k, p], gauss[k, p])
    return out


def render(scene: GaussianScene, cam: CameraView, opts: Optional[RenderOptions] = None) -> RenderOutput:
    opts = opts or RenderOptions()
    if len(scene) == 0:
        raise ValueError("cannot render an empty scene")
    cam = cam.without_image().scaled(opts.scale) if opts.scale != 1.0 else cam
    W, H = cam.width, cam.height
    if W <= 0 or H <= 0:
        raise ValueError(f"zero-area image {W}x{H}")
    proj = project_scene(scene, cam, opts.alpha_cutoff)
    order = depth_order(proj)

    ts = opts.tile
    tiles = [(x0, min(x0 + ts, W), y0, min(y0 + ts, H))
             for y0 in range(0, H, ts) for x0 in range(0, W, ts)]
    job = lambda t: _render_tile(proj, order, opts, *t, W)
    if opts.workers > 1:
        with ThreadPoolExecutor(opts.workers) as pool:
            results = list(pool.map(job, tiles))
    else:
        results = [job(t) for t in tiles]

    color = np.empty((H, W, 3))
    depth = np.empty((H, W))
    alpha = np.empty((H, W))
    normal = np.zeros((H, W, 3)) if opts.normals else None
    for (x0, x1, y0, y1), r in zip(tiles, results):
        h, w = y1 - y0, x1 - x0
        color[y0:y1, x0:x1] = r["color"].reshape(h, w, 3)
        depth[y0:y1, x0:x1] = r["depth"].reshape(h, w)
        alpha[y0:y1, x0:x1] = r["alpha"].reshape(h, w)
        if opts.normals and "normal" in r:
            normal[y0:y1, x0:x1] = r["normal"].reshape(h, w, 3)
    if opts.normals:
        n = np.linalg.norm(normal, axis=-1, keepdims=True)
        normal = np.where(n > 1e-12, normal / np.maximum(n, 1e-12), 0.0)

    traces = None
    if opts.capture_traces:
        parts = [r["traces"] for r in results if r["traces"] is not None]
        if parts:
            traces = Traces(*(np.concatenate(col) for col in zip(*parts)))
        else:
            traces = Traces(np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0), np.zeros(0))
    return RenderOutput(color, depth, alpha, cam, normal, traces, proj)


def backproject(depth: np.ndarray, cam: CameraView) -> np.ndarray:
    """Camera-space points (H,W,3) for a depth map (depth is distance along -z)."""
    H, W = depth.shape
    u = np.arange(W) + 0.5
    v = np.arange(H) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - cam.cx) / cam.fx * depth, -(vv - cam.cy) / cam.fy * depth, -depth], axis=-1)


def _central_diff(P, valid, axis):
    """Central difference along `axis`, one-sided at the borders.

    Returns (diff, ok) where ok marks pixels whose whole stencil is valid.
    """
    n = P.shape[axis]
    diff = np.zeros_like(P)
    ok = np.zeros(valid.shape, dtype=bool)
    if n < 2:
        return diff, ok

    def sl(a, b):
        s = [slice(None)] * P.ndim
        s[axis] = slice(a, b)
        return tuple(s)

    def sl2(a, b):
        s = [slice(None)] * valid.ndim
        s[axis] = slice(a, b)
        return tuple(s)

    diff[sl(1, n - 1)] = 0.5 * (P[sl(2, n)] - P[sl(0, n - 2)])
    ok[sl2(1, n - 1)] = valid[sl2(2, n)] & valid[sl2(0, n - 2)] & valid[sl2(1, n - 1)]
    diff[sl(0, 1)] = P[sl(1, 2)] - P[sl(0, 1)]
    ok[sl2(0, 1)] = valid[sl2(1, 2)] & valid[sl2(0, 1)]
    diff[sl(n - 1, n)] = P[sl(n - 1, n)] - P[sl(n - 2, n - 1)]
    ok[sl2(n - 1, n)] = valid[sl2(n - 1, n)] & valid[sl2(n - 2, n - 1)]
    return diff, ok


def depth_to_dnormal(depth: np.ndarray, cam: CameraView):
    """Normals from a depth map: cross product of vertical and horizontal
    finite differences of the back-projected points.

    Returns (normals (H,W,3), valid (H,W)). Normals are in camera space and
    face the camera; invalid pixels are zero.
    """
    depth = np.asarray(depth, dtype=np.float64)
    P = backproject(depth, cam)
    valid = depth > 0
    dh, ok_h = _central_diff(P, valid, axis=1)
    dv, ok_v = _central_diff(P, valid, axis=0)
    n = np.cross(dv, dh)
    norm = np.linalg.norm(n, axis=-1)
    mask = ok_h & ok_v & (norm > 1e-12)
    n = np.where(mask[..., None], n / np.maximum(norm, 1e-12)[..., None], 0.0)
    return n, mask
