import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blocksplat.model import CameraView, GaussianPrimitive, GaussianScene
from blocksplat.render import RenderOptions, depth_to_dnormal, project_gaussian, project_scene, render

from conftest import make_camera, random_scene, single_scene
from oracles import brute_force


def test_projection_matches_closed_form(identity_camera):
    # isotropic Gaussian 2 units ahead on the optical axis
    g = GaussianPrimitive(np.array([0.0, 0.0, -2.0]), np.array([1.0, 0, 0, 0]), np.full(3, 0.1), 0.5,
                          np.zeros((3, 16)))
    s = project_gaussian(g, identity_camera)
    np.testing.assert_allclose(s.mean2d, [8.0, 8.0])
    expected = (20.0 / 2.0) ** 2 * 0.01 + 0.3
    np.testing.assert_allclose(np.diag(s.cov2d), [expected, expected], rtol=0.01)
    assert abs(s.cov2d[0, 1]) < 1e-12
    assert s.depth == pytest.approx(2.0)


def test_behind_camera_is_culled(identity_camera):
    g = GaussianPrimitive(np.array([0.0, 0.0, 2.0]), np.array([1.0, 0, 0, 0]), np.full(3, 0.1), 0.5,
                          np.zeros((3, 16)))
    assert project_gaussian(g, identity_camera) is None


@given(s=st.floats(0.01, 1.0), x=st.floats(-0.3, 0.3), y=st.floats(-0.3, 0.3))
def test_doubling_scale_quadruples_covariance(s, x, y):
    cam = CameraView(0, 20.0, 20.0, 8.0, 8.0, 16, 16, np.eye(3), np.zeros(3))
    a = project_scene(single_scene((x, y, -2.0), scale=s), cam)
    b = project_scene(single_scene((x, y, -2.0), scale=2 * s), cam)
    np.testing.assert_allclose(b.cov2d[0] - 0.3 * np.eye(2), 4 * (a.cov2d[0] - 0.3 * np.eye(2)), rtol=1e-9, atol=1e-12)


def test_single_opaque_splat_covers_centre(identity_camera):
    sc = single_scene((0.0, 0.0, -2.0), scale=20.0, opacity=1.0 - 1e-9, color=(0.2, 0.6, 0.9))
    out = render(sc, identity_camera, RenderOptions(background=(1.0, 0.0, 0.0)))
    np.testing.assert_allclose(out.color[7, 7], [0.2, 0.6, 0.9], atol=1e-3)


def test_two_half_opaque_splats(identity_camera):
    big = 5.0  # wide enough to be flat over the image
    a = single_scene((0.0, 0.0, -2.0), scale=big, opacity=0.5, color=(1.0, 0.0, 0.0))
    b = single_scene((0.0, 0.0, -3.0), scale=big, opacity=0.5, color=(0.0, 1.0, 0.0))
    out = render(GaussianScene.concatenate([b, a]), identity_camera)
    np.testing.assert_allclose(out.color[8, 8], [0.5, 0.25, 0.0], atol=1e-3)
    assert out.alpha[8, 8] == pytest.approx(0.75, abs=1e-3)


def test_empty_pixel_gets_background(identity_camera):
    sc = single_scene((0.0, 0.0, -2.0), scale=0.02, opacity=0.9)
    out = render(sc, identity_camera, RenderOptions(background=(0.1, 0.2, 0.3)))
    np.testing.assert_array_equal(out.color[0, 0], [0.1, 0.2, 0.3])
    assert out.alpha[0, 0] == 0 and out.depth[0, 0] == 0


def test_empty_scene_and_zero_area_raise(identity_camera, rng):
    empty = GaussianScene(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3, 16)))
    with pytest.raises(ValueError):
        render(empty, identity_camera)
    cam = CameraView(0, 20.0, 20.0, 0.0, 0.0, 0, 16, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        render(random_scene(rng, 3), cam)


@pytest.mark.parametrize("seed", range(6))
def test_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    sc = random_scene(rng, 15, sh_rest=0.2)
    cam = make_camera(size=32)
    ref = brute_force(sc, cam, (0.2, 0.1, 0.0))
    out = render(sc, cam, RenderOptions(background=(0.2, 0.1, 0.0)))
    assert np.max(np.abs(out.color - ref)) <= 2 / 255


def test_smooth_options_match_oracle_tightly():
    rng = np.random.default_rng(11)
    sc = random_scene(rng, 10)
    cam = make_camera(size=24)
    out = render(sc, cam, RenderOptions(alpha_cutoff=0.0, t_stop=0.0))
    np.testing.assert_allclose(out.color, brute_force(sc, cam), atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    sc = random_scene(rng, 12)
    cam = make_camera(size=24)
    perm = rng.permutation(len(sc))
    a = render(sc, cam).color
    b = render(sc.subset(perm), cam).color
    np.testing.assert_array_equal(a, b)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(0, 7), factor=st.floats(1.0, 3.0))
def test_alpha_monotone_in_opacity(seed, k, factor):
    rng = np.random.default_rng(seed)
    sc = random_scene(rng, 8, opacity=(0.05, 0.3))
    op = sc.opacities.copy()
    op[k] = min(op[k] * factor, 0.99)
    a = render(sc, make_camera(size=24)).alpha
    b = render(sc.replace(opacities=op), make_camera(size=24)).alpha
    assert np.all(b >= a - 1e-12)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_output_ranges(seed):
    rng = np.random.default_rng(seed)
    out = render(random_scene(rng, 10, sh_rest=0.5), make_camera(size=24), RenderOptions(background=(1, 1, 1)))
    assert out.color.min() >= 0 and out.color.max() <= 1 + 1e-12
    assert out.alpha.min() >= 0 and out.alpha.max() <= 1


def test_trace_weights_reconstruct_colour(rng):
    sc = random_scene(rng, 12)
    cam = make_camera(size=24)
    out = render(sc, cam, RenderOptions(capture_traces=True))
    tr = out.traces
    color = np.zeros((24 * 24, 3))
    np.add.at(color, tr.pixel, tr.weight[:, None] * out.projection.color[tr.source])
    np.testing.assert_allclose(color.reshape(24, 24, 3), out.color, atol=1e-12)


def test_tiling_and_threads_do_not_change_output(rng):
    sc = random_scene(rng, 12)
    cam = make_camera(size=40)
    a = render(sc, cam).color
    b = render(sc, cam, RenderOptions(tile=7, workers=2)).color
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- depth normals

def _cam(size=16):
    return CameraView(0, 16.0, 16.0, size / 2, size / 2, size, size, np.eye(3), np.zeros(3))


def test_fronto_parallel_plane_faces_camera():
    n, mask = depth_to_dnormal(np.full((16, 16), 2.0), _cam())
    assert mask.all()
    # camera looks down -z, so the normal pointing back at it is +z
    np.testing.assert_allclose(n, np.broadcast_to([0.0, 0.0, 1.0], n.shape), atol=1e-12)


def test_tilted_plane():
    cam = _cam(32)
    # plane z = -2 - x*tan(45deg) in camera space: normal ~ (1, 0, 1)/sqrt2
    uu, vv = np.meshgrid(np.arange(32) + 0.5, np.arange(32) + 0.5)
    rx = (uu - cam.cx) / cam.fx
    depth = 2.0 / (1.0 - rx)
    n, mask = depth_to_dnormal(depth, cam)
    expected = np.array([1.0, 0.0, 1.0]) / np.sqrt(2)
    assert mask[1:-1, 1:-1].all()
    assert np.max(np.abs(n[mask] - expected)) < 1e-3
    assert np.all(n[mask] @ np.array([0, 0, 1.0]) > 0)


def test_isolated_pixel_is_invalid():
    depth = np.zeros((9, 9))
    depth[4, 4] = 1.0
    n, mask = depth_to_dnormal(depth, _cam(9))
    assert not mask.any()
    np.testing.assert_array_equal(n, 0.0)
