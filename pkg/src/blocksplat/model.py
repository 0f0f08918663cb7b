"""Scene, camera and image data model plus splat-PLY / camera-file I/O.

Scenes are stored struct-of-arrays; every array is float64 in memory and
holds *activated* values (opacity in [0,1], positive scales, unit
quaternions). The on-disk PLY holds the usual pre-activation fields.
"""
from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

N_SH = 16
# x,y,z, nx,ny,nz, 3 dc, 45 rest, opacity, 3 scale, 4 rot
PLY_FIELDS = (["x", "y", "z", "nx", "ny", "nz"]
              + [f"f_dc_{i}" for i in range(3)]
              + [f"f_rest_{i}" for i in range(3 * (N_SH - 1))]
              + ["opacity"]
              + [f"scale_{i}" for i in range(3)]
              + [f"rot_{i}" for i in range(4)])
# the normals are padding in the splat layout; the counted model fields exclude them
MODEL_FIELDS = len(PLY_FIELDS) - 3
BYTES_PER_PRIMITIVE = MODEL_FIELDS * 4

OPACITY_CLAMP = 1e-6


class PlyFormatError(ValueError):
    pass


class PlySchemaError(ValueError):
    pass


class PlyDataError(ValueError):
    pass


class CameraValidationError(ValueError):
    pass


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianPrimitive:
    position: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    scale: np.ndarray
    opacity: float
    sh_coeffs: np.ndarray  # (3, 16)


@dataclass(frozen=True, eq=False)
class GaussianScene:
    """Ordered set of Gaussians, struct-of-arrays.

    positions (K,3), rotations (K,4) as wxyz, scales (K,3), opacities (K,),
    sh (K,3,16).
    """
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    source_path: Optional[str] = None

    def __post_init__(self):
        k = len(self.positions)
        shapes = {"positions": (k, 3), "rotations": (k, 4), "scales": (k, 3),
                  "opacities": (k,), "sh": (k, 3, N_SH)}
        for name, shape in shapes.items():
            arr = _frozen(getattr(self, name))
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> GaussianPrimitive:
        return GaussianPrimitive(self.positions[i], self.rotations[i], self.scales[i],
                                 float(self.opacities[i]), self.sh[i])

    def subset(self, idx) -> "GaussianScene":
        idx = np.asarray(idx)
        return GaussianScene(self.positions[idx], self.rotations[idx], self.scales[idx],
                             self.opacities[idx], self.sh[idx], self.source_path)

    def replace(self, **changes) -> "GaussianScene":
        fields_ = dict(positions=self.positions, rotations=self.rotations, scales=self.scales,
                       opacities=self.opacities, sh=self.sh, source_path=self.source_path)
        fields_.update(changes)
        return GaussianScene(**fields_)

    @staticmethod
    def concatenate(scenes: Sequence["GaussianScene"]) -> "GaussianScene":
        return GaussianScene(
            np.concatenate([s.positions for s in scenes]).reshape(-1, 3),
            np.concatenate([s.rotations for s in scenes]).reshape(-1, 4),
            np.concatenate([s.scales for s in scenes]).reshape(-1, 3),
            np.concatenate([s.opacities for s in scenes]).reshape(-1),
            np.concatenate([s.sh for s in scenes]).reshape(-1, 3, N_SH))

    @property
    def nbytes_model(self) -> int:
        return len(self) * BYTES_PER_PRIMITIVE


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole view. Pose is world-to-camera; the camera looks down -z with
    +y up in camera space, and image rows grow downward."""
    id: int
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray
    image: Optional[np.ndarray] = None
    normal_prior: Optional[np.ndarray] = None
    confidence: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation).reshape(3, 3))
        object.__setattr__(self, "translation", _frozen(self.translation).reshape(3))
        for name in ("image", "normal_prior", "confidence"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _frozen(val))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def validate(self, tol: float = 1e-5) -> None:
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > tol:
            raise CameraValidationError(f"view {self.id}: rotation not orthonormal (err {err:.2e})")
        if self.image is not None and self.image.shape != (self.height, self.width, 3):
            raise CameraValidationError(
                f"view {self.id}: image shape {self.image.shape} != ({self.height}, {self.width}, 3)")
        if self.normal_prior is not None:
            if self.normal_prior.shape != (self.height, self.width, 3):
                raise CameraValidationError(f"view {self.id}: normal map shape mismatch")
            norms = np.linalg.norm(self.normal_prior, axis=-1)
            if np.abs(norms - 1).max() > 1e-3:
                raise CameraValidationError(f"view {self.id}: normal prior not unit length")
        if self.confidence is not None and self.confidence.shape != (self.height, self.width):
            raise CameraValidationError(f"view {self.id}: confidence shape mismatch")

    def scaled(self, factor: float) -> "CameraView":
        """Same pose at a different resolution; attached maps are resampled."""
        if factor == 1.0:
            return self
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        sx, sy = w / self.width, h / self.height
        return CameraView(self.id, self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, w, h,
                          self.rotation, self.translation,
                          image=None if self.image is None else resize_image(self.image, w, h),
                          normal_prior=None if self.normal_prior is None
                          else _resize_normals(self.normal_prior, w, h),
                          confidence=None if self.confidence is None
                          else resize_image(self.confidence, w, h),
                          extra=self.extra)

    def without_image(self) -> "CameraView":
        return CameraView(self.id, self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                          self.rotation, self.translation)


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera (R, t) for a camera at `eye` looking at `target`."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    back = eye - target
    back /= np.linalg.norm(back)
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    cam_up = np.cross(back, right)
    rot = np.stack([right, cam_up, back])  # rows: camera axes in world coords
    return rot, -rot @ eye


# ----------------------------------------------------------------------------------------
# spherical harmonics

def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Real SH basis up to degree 3 for unit directions (N,3) -> (N,16)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    return np.stack([
        np.full_like(x, SH_C0),
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * xy, SH_C2[1] * yz, SH_C2[2] * (2 * zz - xx - yy),
        SH_C2[3] * xz, SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * xy * z, SH_C3[2] * y * (4 * zz - xx - yy),
        SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy), SH_C3[4] * x * (4 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3 * yy),
    ], axis=-1)


def eval_sh_raw(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Unclamped colour: sum of basis * coeffs + 0.5, shape (..., 3)."""
    return np.einsum("...ck,...k->...c", sh, sh_basis(dirs)) + 0.5


def eval_sh(sh_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    return np.clip(eval_sh_raw(np.asarray(sh_coeffs), np.asarray(view_dir, dtype=np.float64)), 0.0, 1.0)


def rgb_to_dc(rgb):
    return (np.asarray(rgb) - 0.5) / SH_C0


# ----------------------------------------------------------------------------------------
# splat PLY

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _ply_dtype():
    return np.dtype([(name, "<f4") for name in PLY_FIELDS])


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyFormatError("missing 'ply' magic")
    count = None
    props = []
    fmt = None
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise PlyFormatError("unterminated header")
        tok = line.decode("ascii", errors="replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            in_vertex = len(tok) == 3 and tok[1] == "vertex"
            if in_vertex:
                try:
                    count = int(tok[2])
                except ValueError as exc:
                    raise PlyFormatError(f"bad vertex count {tok[2]!r}") from exc
            elif count is not None:
                raise PlyFormatError(f"unsupported extra element {tok[1:]}")
        elif tok[0] == "property":
            if not in_vertex:
                raise PlyFormatError("property outside vertex element")
            if len(tok) != 3 or tok[1] != "float":
                raise PlySchemaError(f"unsupported property declaration {' '.join(tok[1:])}")
            props.append(tok[2])
        else:
            raise PlyFormatError(f"unexpected header line {line!r}")
    if fmt != "binary_little_endian":
        raise PlyFormatError(f"expected binary_little_endian, got {fmt}")
    if count is None:
        raise PlyFormatError("no vertex element")
    return count, props


def load_scene_ply(path) -> GaussianScene:
    path = Path(path)
    with open(path, "rb") as fh:
        count, props = _parse_header(fh)
        if props != PLY_FIELDS:
            raise PlySchemaError(
                f"{path}: expected {len(PLY_FIELDS)} splat properties, found {len(props)}")
        payload = fh.read()
    dtype = _ply_dtype()
    if len(payload) != count * dtype.itemsize:
        raise PlySchemaError(f"{path}: payload holds {len(payload)} bytes, "
                             f"header implies {count * dtype.itemsize}")
    rec = np.frombuffer(payload, dtype=dtype, count=count)
    flat = rec.view("<f4").reshape(count, len(PLY_FIELDS)).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(flat).all(axis=1))
    if len(bad):
        raise PlyDataError(f"{path}: non-finite field in primitive {int(bad[0])}")

    col = {name: i for i, name in enumerate(PLY_FIELDS)}
    pos = flat[:, col["x"]:col["z"] + 1]
    dc = flat[:, col["f_dc_0"]:col["f_dc_2"] + 1]
    rest = flat[:, col["f_rest_0"]:col["f_rest_44"] + 1].reshape(count, 3, N_SH - 1)
    sh = np.concatenate([dc[:, :, None], rest], axis=2)
    opacity = _sigmoid(flat[:, col["opacity"]])
    scales = np.exp(flat[:, col["scale_0"]:col["scale_2"] + 1])
    rot = flat[:, col["rot_0"]:col["rot_3"] + 1]
    norms = np.linalg.norm(rot, axis=1, keepdims=True)
    if (norms == 0).any():
        raise PlyDataError(f"{path}: zero quaternion in primitive {int(np.flatnonzero(norms == 0)[0])}")
    # float32 storage of a unit quaternion is already within 1e-6; only fix real drift
    rot = np.where(np.abs(norms - 1.0) > 1e-6, rot / norms, rot)
    return GaussianScene(pos, rot, scales, opacity, sh, source_path=str(path))


@dataclass
class SaveReport:
    path: str
    count: int
    clamped_opacity: int = 0


def save_scene_ply(scene: GaussianScene, path) -> SaveReport:
    if len(scene) == 0:
        raise ValueError("refusing to save an empty scene")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k = len(scene)
    op = scene.opacities
    clamped = int(np.count_nonzero((op < OPACITY_CLAMP) | (op > 1 - OPACITY_CLAMP)))
    if clamped:
        log.warning("%s: clamped %d opacities away from 0/1 before logit", path, clamped)
    op = np.clip(op, OPACITY_CLAMP, 1 - OPACITY_CLAMP)
    flat = np.concatenate([
        scene.positions, np.zeros((k, 3)), scene.sh[:, :, 0],
        scene.sh[:, :, 1:].reshape(k, -1), np.log(op / (1 - op))[:, None],
        np.log(scene.scales), scene.rotations], axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {k}"]
    header += [f"property float {name}" for name in PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(flat).tobytes())
    return SaveReport(str(path), k, clamped)


# ----------------------------------------------------------------------------------------
# images

def load_image(path) -> np.ndarray:
    """PNG / PPM / PGM -> float64 HxWx3 in [0,1]; .npy holds float data verbatim."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float64)
    else:
        with Image.open(path) as im:
            bits = 16 if im.mode in ("I;16", "I;16B", "I") else 8
            if bits == 8 and im.mode not in ("RGB", "L"):
                im = im.convert("RGB")
            arr = np.asarray(im).astype(np.float64) / (2 ** bits - 1)
    if arr.ndim == 2 and path.suffix != ".npy":
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".npy":
        np.save(path, np.asarray(img, dtype=np.float64))
        return
    data = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def resize_image(img: np.ndarray, w: int, h: int) -> np.ndarray:
    """Area-average resize (box filter), deterministic and dependency-free."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[:2]
    if (H, W) == (h, w):
        return img
    ys = np.linspace(0, H, h + 1)
    xs = np.linspace(0, W, w + 1)
    wy = _overlap_matrix(ys, H)
    wx = _overlap_matrix(xs, W)
    out = np.einsum("ih,hw...->iw...", wy, img)
    return np.einsum("jw,iw...->ij...", wx, out)


def _overlap_matrix(edges, n):
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = np.arange(n)[None, :]
    ov = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0, None)
    return ov / ov.sum(axis=1, keepdims=True)


def _resize_normals(n, w, h):
    out = resize_image(n, w, h)
    norm = np.linalg.norm(out, axis=-1, keepdims=True)
    return np.where(norm > 1e-12, out / np.maximum(norm, 1e-12), np.array([0.0, 0.0, 1.0]))


# ----------------------------------------------------------------------------------------
# camera list file
#
# INI layout, one section per view:
#
#   [view 3]
#   fx = 57.6
#   fy = 57.6
#   cx = 32
#   cy = 32
#   width = 64
#   height = 64
#   rotation = r00 r01 r02 r10 r11 r12 r20 r21 r22   (world-to-camera, row-major)
#   translation = tx ty tz
#   image = images/003.npy
#   normal = normals/003.npy        (optional, HxWx3 unit vectors)
#   confidence = confidence/003.npy (optional, HxW in [0,1])
#   split = train | test            (optional, default train)
#
# Relative paths resolve against the directory holding the camera file.

def _floats(text, n, what):
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != n:
        raise CameraValidationError(f"{what}: expected {n} numbers, got {len(vals)}")
    return np.array(vals)


def load_cameras(path, load_images: bool = True) -> list[CameraView]:
    path = Path(path)
    root = path.parent
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    views = []
    seen = set()
    for section in cp.sections():
        if not section.startswith("view"):
            continue
        try:
            vid = int(section.split()[1])
        except (IndexError, ValueError) as exc:
            raise CameraValidationError(f"bad section name [{section}]") from exc
        if vid in seen:
            raise CameraValidationError(f"duplicate view id {vid}")
        seen.add(vid)
        s = cp[section]
        rot = _floats(s["rotation"], 9, f"view {vid} rotation").reshape(3, 3)
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > 1e-3:
            raise CameraValidationError(f"view {vid}: rotation not orthonormal (err {err:.2e})")
        kwargs = {}
        if load_images:
            for key, name in (("image", "image"), ("normal", "normal_prior"), ("confidence", "confidence")):
                if key not in s:
                    continue
                p = root / s[key]
                if not p.exists():
                    raise FileNotFoundError(f"view {vid}: missing {key} file {p}")
                if key == "image":
                    kwargs[name] = load_image(p)
                else:
                    kwargs[name] = np.load(p).astype(np.float64) if p.suffix == ".npy" else _decode_map(p, key)
        cam = CameraView(vid, s.getfloat("fx"), s.getfloat("fy"), s.getfloat("cx"), s.getfloat("cy"),
                         s.getint("width"), s.getint("height"), rot,
                         _floats(s["translation"], 3, f"view {vid} translation"),
                         extra={"split": s.get("split", "train"),
                                "image_path": s.get("image")},
                         **kwargs)
        cam.validate(tol=1e-3)
        views.append(cam)
    return views


def _decode_map(p, key):
    img = load_image(p)
    if key == "normal":
        n = img * 2.0 - 1.0
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    return img[..., 0]


def save_cameras(cameras: Sequence[CameraView], path, paths: dict) -> None:
    """Write the camera file. `paths` maps view id -> {image, normal, confidence, split}."""
    cp = configparser.ConfigParser()
    for cam in cameras:
        sec = {"fx": repr(float(cam.fx)), "fy": repr(float(cam.fy)),
               "cx": repr(float(cam.cx)), "cy": repr(float(cam.cy)),
               "width": str(cam.width), "height": str(cam.height),
               "rotation": " ".join(repr(float(v)) for v in cam.rotation.ravel()),
               "translation": " ".join(repr(float(v)) for v in cam.translation)}
        sec.update({k: str(v) for k, v in paths.get(cam.id, {}).items()})
        cp[f"view {cam.id}"] = sec
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        cp.write(fh)
