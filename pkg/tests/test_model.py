import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from blocksplat.model import (PLY_FIELDS, CameraValidationError, CameraView, GaussianScene, PlyDataError,
                              PlyFormatError, PlySchemaError, eval_sh, load_cameras, load_image,
                              load_scene_ply, save_cameras, save_image, save_scene_ply)

from conftest import random_scene


def _write_raw_ply(path, rows, fields=PLY_FIELDS, fmt="binary_little_endian"):
    rows = np.asarray(rows, dtype="<f4").reshape(len(rows), len(fields))
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(rows)}"]
    header += [f"property float {f}" for f in fields] + ["end_header"]
    path.write_bytes(("\n".join(header) + "\n").encode() + rows.tobytes())


def _raw_row(**kw):
    row = dict.fromkeys(PLY_FIELDS, 0.0)
    row["rot_0"] = 1.0
    row.update(kw)
    return [row[f] for f in PLY_FIELDS]


def test_opacity_zero_field_loads_as_half(tmp_path):
    _write_raw_ply(tmp_path / "a.ply", [_raw_row(opacity=0.0)])
    assert load_scene_ply(tmp_path / "a.ply").opacities[0] == 0.5


def test_log_scale_field_is_exponentiated(tmp_path):
    ln2 = math.log(2.0)
    _write_raw_ply(tmp_path / "a.ply", [_raw_row(scale_0=ln2, scale_1=ln2, scale_2=ln2)])
    np.testing.assert_allclose(load_scene_ply(tmp_path / "a.ply").scales[0], [2, 2, 2], rtol=1e-6)


def test_quaternion_renormalized_on_load(tmp_path):
    _write_raw_ply(tmp_path / "a.ply", [_raw_row(rot_0=2.0, rot_1=0.0, rot_2=2.0, rot_3=0.0)])
    q = load_scene_ply(tmp_path / "a.ply").rotations[0]
    assert abs(np.linalg.norm(q) - 1.0) < 1e-6


def test_save_inverse_transforms(tmp_path):
    sc = GaussianScene(np.zeros((1, 3)), [[1, 0, 0, 0]], np.ones((1, 3)), [0.5], np.zeros((1, 3, 16)))
    save_scene_ply(sc, tmp_path / "a.ply")
    raw = (tmp_path / "a.ply").read_bytes()
    body = np.frombuffer(raw[raw.index(b"end_header\n") + 11:], dtype="<f4")
    rec = dict(zip(PLY_FIELDS, body))
    assert rec["opacity"] == 0.0
    assert rec["scale_0"] == rec["scale_1"] == rec["scale_2"] == 0.0


def test_round_trip_100_primitives(tmp_path, rng):
    sc = random_scene(rng, 100, sh_rest=0.3)
    save_scene_ply(sc, tmp_path / "a.ply")
    back = load_scene_ply(tmp_path / "a.ply")
    assert len(back) == 100
    for name in ("positions", "rotations", "scales", "opacities", "sh"):
        np.testing.assert_allclose(getattr(back, name), getattr(sc, name), atol=1e-6, rtol=1e-6)


def test_double_round_trip_is_byte_identical(tmp_path, rng):
    save_scene_ply(random_scene(rng, 50, sh_rest=0.2), tmp_path / "a.ply")
    save_scene_ply(load_scene_ply(tmp_path / "a.ply"), tmp_path / "b.ply")
    save_scene_ply(load_scene_ply(tmp_path / "b.ply"), tmp_path / "c.ply")
    assert (tmp_path / "b.ply").read_bytes() == (tmp_path / "c.ply").read_bytes()


def test_extreme_opacity_is_clamped_and_counted(tmp_path):
    sc = GaussianScene(np.zeros((2, 3)), [[1, 0, 0, 0]] * 2, np.ones((2, 3)), [0.0, 1.0], np.zeros((2, 3, 16)))
    report = save_scene_ply(sc, tmp_path / "a.ply")
    assert report.clamped_opacity == 2
    back = load_scene_ply(tmp_path / "a.ply")
    assert 0 < back.opacities[0] < 1e-5 and 1 - 1e-5 < back.opacities[1] < 1


def test_empty_scene_refused(tmp_path):
    empty = GaussianScene(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3, 16)))
    with pytest.raises(ValueError):
        save_scene_ply(empty, tmp_path / "a.ply")


def test_malformed_header(tmp_path):
    (tmp_path / "a.ply").write_bytes(b"not a ply\n")
    with pytest.raises(PlyFormatError):
        load_scene_ply(tmp_path / "a.ply")
    _write_raw_ply(tmp_path / "b.ply", [_raw_row()], fmt="ascii")
    with pytest.raises(PlyFormatError):
        load_scene_ply(tmp_path / "b.ply")


def test_property_count_mismatch(tmp_path):
    _write_raw_ply(tmp_path / "a.ply", [[0.0] * 10], fields=PLY_FIELDS[:10])
    with pytest.raises(PlySchemaError):
        load_scene_ply(tmp_path / "a.ply")


def test_nan_field_names_primitive(tmp_path):
    _write_raw_ply(tmp_path / "a.ply", [_raw_row(), _raw_row(), _raw_row(x=float("nan"))])
    with pytest.raises(PlyDataError, match="primitive 2"):
        load_scene_ply(tmp_path / "a.ply")


def test_truncated_payload(tmp_path):
    _write_raw_ply(tmp_path / "a.ply", [_raw_row(), _raw_row()])
    data = (tmp_path / "a.ply").read_bytes()
    (tmp_path / "a.ply").write_bytes(data[:-8])
    with pytest.raises(PlySchemaError):
        load_scene_ply(tmp_path / "a.ply")


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 30), seed=st.integers(0, 2 ** 16))
def test_count_equals_header_vertex_count(tmp_path_factory, n, seed):
    path = tmp_path_factory.mktemp("ply") / "s.ply"
    save_scene_ply(random_scene(np.random.default_rng(seed), n), path)
    header = path.read_bytes().split(b"end_header")[0].decode()
    assert f"element vertex {n}" in header
    assert len(load_scene_ply(path)) == n


# ---------------------------------------------------------------- cameras

def _cam(vid, R=np.eye(3), t=(0, 0, 0), size=64):
    return CameraView(vid, 100.0, 100.0, size / 2, size / 2, size, size, R, t)


def _write_dataset(tmp_path, cams, image_size=64):
    paths = {}
    for c in cams:
        save_image(np.full((image_size, image_size, 3), 0.25), tmp_path / f"img{c.id}.png")
        paths[c.id] = {"image": f"img{c.id}.png"}
    save_cameras(cams, tmp_path / "cameras.txt", paths)
    return tmp_path / "cameras.txt"


def test_identity_camera_sits_at_origin(tmp_path):
    path = _write_dataset(tmp_path, [_cam(0)])
    cam = load_cameras(path)[0]
    np.testing.assert_array_equal(cam.center, 0.0)
    # a point straight ahead on -z projects to the principal point
    p = cam.rotation @ np.array([0.0, 0.0, -5.0]) + cam.translation
    assert p[2] < 0 and p[0] == 0 and p[1] == 0
    assert cam.image.shape == (64, 64, 3)
    np.testing.assert_allclose(cam.image, 64 / 255)


def test_three_view_fixture_round_trips(tmp_path):
    from scipy.spatial.transform import Rotation
    rots = Rotation.from_euler("xyz", [[10, 20, 30], [0, 90, 0], [-45, 5, 170]], degrees=True).as_matrix()
    cams = [_cam(i, rots[i], (i, -2.0 * i, 0.5)) for i in range(3)]
    loaded = load_cameras(_write_dataset(tmp_path, cams))
    for a, b in zip(cams, loaded):
        np.testing.assert_allclose(b.rotation, a.rotation, atol=1e-9)
        np.testing.assert_allclose(b.translation, a.translation, atol=1e-9)


def test_duplicate_id_rejected(tmp_path):
    path = _write_dataset(tmp_path, [_cam(0)])
    text = path.read_text()
    path.write_text(text + text.replace("[view 0]", "[view 0 ]"))
    with pytest.raises(Exception):
        load_cameras(path)


def test_missing_image_names_view(tmp_path):
    path = _write_dataset(tmp_path, [_cam(7)])
    (tmp_path / "img7.png").unlink()
    with pytest.raises(FileNotFoundError, match="view 7"):
        load_cameras(path)


def test_non_orthonormal_rotation_rejected(tmp_path):
    path = _write_dataset(tmp_path, [_cam(0, np.diag([1.0, 1.0, 1.01]))])
    with pytest.raises(CameraValidationError):
        load_cameras(path)


def test_image_size_must_match_intrinsics(tmp_path):
    path = _write_dataset(tmp_path, [_cam(0)], image_size=32)
    with pytest.raises(CameraValidationError):
        load_cameras(path)


def test_ppm_and_png_load_as_unit_floats(tmp_path):
    img = np.zeros((4, 5, 3))
    img[1, 2] = (1.0, 0.5, 0.0)
    save_image(img, tmp_path / "a.ppm")
    save_image(img, tmp_path / "a.png")
    for name in ("a.ppm", "a.png"):
        out = load_image(tmp_path / name)
        assert out.shape == (4, 5, 3)
        np.testing.assert_allclose(out, np.round(img * 255) / 255)
    (tmp_path / "b.ppm").write_bytes(b"P3\n2 1\n255\n255 0 0 0 0 255\n")
    np.testing.assert_allclose(load_image(tmp_path / "b.ppm"), [[[1, 0, 0], [0, 0, 1]]])


# ---------------------------------------------------------------- spherical harmonics

def test_sh_zero_gives_grey():
    np.testing.assert_array_equal(eval_sh(np.zeros((3, 16)), np.array([0.0, 0.0, 1.0])), [0.5, 0.5, 0.5])


@given(c=st.floats(-3, 3), d=arrays(np.float64, 3, elements=st.floats(-1, 1)))
def test_sh_dc_only(c, d):
    if np.linalg.norm(d) < 1e-3:
        d = np.array([1.0, 0.0, 0.0])
    d = d / np.linalg.norm(d)
    sh = np.zeros((3, 16))
    sh[:, 0] = c
    expected = min(max(0.28209479 * c + 0.5, 0.0), 1.0)
    np.testing.assert_allclose(eval_sh(sh, d), expected, atol=1e-7)


@given(d=arrays(np.float64, 3, elements=st.floats(-1, 1)), coef=arrays(np.float64, (3, 3), elements=st.floats(-0.5, 0.5)))
def test_degree_one_term_is_odd(d, coef):
    if np.linalg.norm(d) < 1e-3:
        return
    d = d / np.linalg.norm(d)
    sh = np.zeros((3, 16))
    sh[:, 1:4] = coef
    a = eval_sh(sh, d) - 0.5
    b = eval_sh(sh, -d) - 0.5
    # inside the clamp range the degree-1 part flips sign exactly
    np.testing.assert_allclose(a, -b, atol=1e-12)


def test_sh_output_clamped():
    sh = np.zeros((3, 16))
    sh[:, 0] = [10, -10, 0]
    np.testing.assert_array_equal(eval_sh(sh, np.array([0, 1.0, 0])), [1.0, 0.0, 0.5])
