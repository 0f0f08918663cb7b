"""Per-block photometric refinement.

Only the DC colour coefficients and the opacities of the trainable set are
optimised. The full composite loss is evaluated every step for reporting;
gradients come from the L1 photometric term, differentiated analytically
through front-to-back compositing using the render traces.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .metrics import ssim
from .model import SH_C0, CameraView, GaussianScene
from .prune import accumulate_hits, prune, score
from .render import RenderOptions, RenderOutput, depth_to_dnormal, render

log = logging.getLogger(__name__)

OPACITY_MIN = 1e-4
OPACITY_MAX = 1.0 - 1e-4


@dataclass
class RefineConfig:
    iterations: int = 120
    learning_rate_color: float = 0.01
    learning_rate_opacity: float = 0.005
    lambda1: float = 1.0
    lambda2: float = 0.01
    lambda3: float = 0.015
    prune_schedule: tuple = (1 / 3, 1 / 2, 5 / 6)
    prune_fraction: float = 0.2
    rgb_ssim_weight: float = 0.2
    optimizer: str = "adam"
    resolution_scale: float = 1.0
    hit_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.prune_schedule = tuple(float(f) for f in self.prune_schedule)
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.prune_fraction < 1.0:
            raise ValueError("prune_fraction must be in [0, 1)")
        if list(self.prune_schedule) != sorted(self.prune_schedule):
            raise ValueError("prune_schedule must be ascending")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def prune_iterations(self) -> list:
        return sorted({int(round(f * self.iterations)) for f in self.prune_schedule})

    def to_dict(self):
        d = asdict(self)
        d["prune_schedule"] = list(self.prune_schedule)
        return d


@dataclass
class LossBreakdown:
    l_rgb: float
    l_s: float
    l_n: float
    l_dn: float
    total: float

    @classmethod
    def assemble(cls, l_rgb, l_s, l_n, l_dn, cfg: RefineConfig) -> "LossBreakdown":
        total = l_rgb + cfg.lambda1 * l_s + cfg.lambda2 * l_n + cfg.lambda3 * l_dn
        return cls(float(l_rgb), float(l_s), float(l_n), float(l_dn), float(total))


# ----------------------------------------------------------------------------------------
# losses

def _same_shape(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def loss_l1(rendered, target) -> float:
    a, b = _same_shape(rendered, target)
    return float(np.mean(np.abs(a - b)))


def loss_rgb(rendered, target, ssim_weight: float = 0.2) -> float:
    a, b = _same_shape(rendered, target)
    out = (1.0 - ssim_weight) * float(np.mean(np.abs(a - b)))
    if ssim_weight:
        out += ssim_weight * (1.0 - ssim(a, b))
    return out


def _normal_term(n_hat, n):
    return np.abs(n_hat - n).sum(axis=-1) + (1.0 - np.einsum("...i,...i->...", n_hat, n))


def loss_normal(rendered_normal, prior, valid_mask) -> float:
    rendered_normal, prior = _same_shape(rendered_normal, prior)
    valid = np.asarray(valid_mask, dtype=bool)
    if not valid.any():
        log.warning("normal loss: empty valid mask")
        return 0.0
    return float(_normal_term(rendered_normal, prior)[valid].mean())


def loss_dnormal(depth_normal, prior, confidence, valid_mask) -> float:
    depth_normal, prior = _same_shape(depth_normal, prior)
    valid = np.asarray(valid_mask, dtype=bool)
    if not valid.any():
        return 0.0
    w = np.ones(valid.shape) if confidence is None else np.asarray(confidence, dtype=np.float64)
    return float((w * _normal_term(depth_normal, prior))[valid].mean())


def loss_scale_flatten(scene: GaussianScene, subset=None) -> float:
    s = scene.scales if subset is None else scene.scales[np.asarray(subset, dtype=np.int64)]
    if len(s) == 0:
        return 0.0
    return float(s.min(axis=1).mean())


def loss_breakdown(out: RenderOutput, cam: CameraView, target, scene: GaussianScene, subset,
                   cfg: RefineConfig) -> LossBreakdown:
    l_rgb = loss_rgb(out.color, target, cfg.rgb_ssim_weight)
    l_s = loss_scale_flatten(scene, subset)
    l_n = l_dn = 0.0
    if cam.normal_prior is not None:
        prior = cam.normal_prior
        if out.normal is not None:
            l_n = loss_normal(out.normal, prior, (out.alpha > 0.5))
        dn, dmask = depth_to_dnormal(out.depth, out.camera)
        l_dn = loss_dnormal(dn, prior, cam.confidence, dmask)
    return LossBreakdown.assemble(l_rgb, l_s, l_n, l_dn, cfg)


# ----------------------------------------------------------------------------------------
# gradients

@dataclass
class Gradients:
    color: np.ndarray    # (K,3) dL/d(clamped colour)
    dc: np.ndarray       # (K,3) dL/d(DC SH coefficient)
    opacity: np.ndarray  # (K,)


def _segment_suffix(values, pixel):
    """For entries grouped contiguously by pixel, the sum of later entries in
    the same group (exclusive suffix sum)."""
    if len(values) == 0:
        return values.copy()
    starts = np.flatnonzero(np.r_[True, pixel[1:] != pixel[:-1]])
    totals = np.add.reduceat(values, starts, axis=0)
    seg = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(pixel)]))
    prefix = np.cumsum(values, axis=0)
    base = np.concatenate([np.zeros((1,) + values.shape[1:]), prefix[starts[1:] - 1]], axis=0)
    inclusive = prefix - base[seg]
    return totals[seg] - inclusive


def color_opacity_gradients(out: RenderOutput, dL_dC: np.ndarray, subset=None,
                            background=(0.0, 0.0, 0.0)) -> Gradients:
    """Back-propagate a per-pixel colour gradient (H,W,3) to colours and
    opacities using the captured traces."""
    tr, proj = out.traces, out.projection
    if tr is None:
        raise ValueError("gradients need a render with capture_traces=True")
    K = len(proj.opacity)
    g = dL_dC.reshape(-1, 3)[tr.pixel]
    c = proj.color[tr.source]
    w = tr.alpha * tr.transmittance

    grad_color = np.zeros((K, 3))
    np.add.at(grad_color, tr.source, w[:, None] * g)

    behind = _segment_suffix(w[:, None] * c, tr.pixel)
    t_final = (1.0 - out.alpha).reshape(-1)[tr.pixel]
    behind += t_final[:, None] * np.asarray(background, dtype=np.float64)
    a = np.minimum(tr.alpha, OPACITY_MAX)
    dC_dalpha = c * tr.transmittance[:, None] - behind / (1.0 - a)[:, None]
    grad_op = np.bincount(tr.source, weights=tr.gauss * (dC_dalpha * g).sum(axis=1), minlength=K)

    unclamped = (proj.color_raw > 0.0) & (proj.color_raw < 1.0)
    grad_dc = grad_color * unclamped * SH_C0
    if subset is not None:
        mask = np.zeros(K, dtype=bool)
        mask[np.asarray(subset, dtype=np.int64)] = True
        grad_color[~mask] = 0.0
        grad_dc[~mask] = 0.0
        grad_op[~mask] = 0.0
    return Gradients(grad_color, grad_dc, grad_op)


def gradients_color_opacity(scene: GaussianScene, subset, cam: CameraView, target,
                            opts: Optional[RenderOptions] = None):
    """Gradients of mean |render - target| w.r.t. DC colour and opacity.

    Returns (Gradients, RenderOutput)."""
    opts = opts or RenderOptions()
    opts = RenderOptions(**{**opts.__dict__, "capture_traces": True})
    out = render(scene, cam, opts)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != out.color.shape:
        raise ValueError(f"target shape {target.shape} != render shape {out.color.shape}")
    dL_dC = np.sign(out.color - target) / out.color.size
    return color_opacity_gradients(out, dL_dC, subset, opts.background), out


# ----------------------------------------------------------------------------------------
# optimiser

class _Adam:
    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-15):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return -self.lr * mh / (np.sqrt(vh) + self.eps)

    def keep(self, rows):
        self.m, self.v = self.m[rows], self.v[rows]


class _SGD:
    def __init__(self, n, lr):
        self.lr = lr

    def step(self, grad):
        return -self.lr * grad

    def keep(self, rows):
        pass


def _optimizer(cfg, n, lr):
    return _Adam(n, lr) if cfg.optimizer == "adam" else _SGD(n, lr)


@dataclass
class RefineResult:
    scene: GaussianScene
    source_index: np.ndarray       # coarse index of every primitive in `scene`
    trainable: np.ndarray          # coarse indices still trainable at the end
    log: list = field(default_factory=list)
    peak_trainable: int = 0
    skipped: bool = False


def refine_block(block_trainable, coarse: GaussianScene, views: Sequence[CameraView], cfg: RefineConfig,
                 background=(0.0, 0.0, 0.0), block_index: int = 0) -> RefineResult:
    """Refine the trainable subset of `coarse` on `views`.

    `block_trainable` is either a BlockSpec (trainable = members plus expanded
    set) or an index array. Everything outside the trainable set is frozen.
    """
    if hasattr(block_trainable, "trainable_indices"):
        trainable = np.asarray(block_trainable.trainable_indices, dtype=np.int64)
        block_index = block_trainable.index
    else:
        trainable = np.unique(np.asarray(block_trainable, dtype=np.int64))
    source_index = np.arange(len(coarse))
    if not len(views) or not len(trainable):
        log.warning("block %d skipped: %d views, %d trainable", block_index, len(views), len(trainable))
        return RefineResult(coarse, source_index, trainable,
                            [{"event": "skipped", "block": block_index, "views": len(views),
                              "trainable": int(len(trainable))}], int(len(trainable)), True)

    views = [v.scaled(cfg.resolution_scale) for v in views]
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(views))
    prune_at = set(cfg.prune_iterations()) if cfg.prune_fraction > 0 else set()

    scene = coarse
    sh = np.array(scene.sh)
    op = np.array(scene.opacities)
    opt_c = _optimizer(cfg, (len(trainable), 3), cfg.learning_rate_color)
    opt_o = _optimizer(cfg, len(trainable), cfg.learning_rate_opacity)
    opts = RenderOptions(background=background, capture_traces=True, normals=True)
    records = []
    peak = len(trainable)
    # position of each trainable primitive inside the current scene
    local = trainable.copy()

    for it in range(cfg.iterations):
        if it in prune_at and it > 0:
            table = score(accumulate_hits(scene, views, local, cfg.hit_scale), scene)
            scene, removed = prune(scene, local, table, cfg.prune_fraction)
            keep_rows = np.flatnonzero(~np.isin(local, removed))
            keep_all = np.setdiff1d(np.arange(len(source_index)), removed)
            source_index = source_index[keep_all]
            sh, op = sh[keep_all], op[keep_all]
            # re-index survivors into the shrunken scene
            local = np.searchsorted(keep_all, local[keep_rows])
            opt_c.keep(keep_rows)
            opt_o.keep(keep_rows)
            records.append({"event": "prune", "block": block_index, "iteration": it,
                            "removed": int(len(removed)), "trainable": int(len(local))})

        cam = views[order[it % len(views)]]
        out = render(scene, cam, opts)
        loss = loss_breakdown(out, cam, cam.image, scene, local, cfg)
        dL_dC = (1.0 - cfg.rgb_ssim_weight) * np.sign(out.color - cam.image) / out.color.size
        grads = color_opacity_gradients(out, dL_dC, local, background)

        sh[local, :, 0] += opt_c.step(grads.dc[local])
        op[local] = np.clip(op[local] + opt_o.step(grads.opacity[local]), OPACITY_MIN, OPACITY_MAX)
        scene = scene.replace(sh=sh, opacities=op)
        records.append({"event": "step", "block": block_index, "iteration": it, "view": int(cam.id),
                        **asdict(loss), "trainable": int(len(local))})

    return RefineResult(scene, source_index, source_index[local], records, peak)
