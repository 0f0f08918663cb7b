import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blocksplat.model import CameraView, GaussianScene
from blocksplat.prune import ImportanceTable, accumulate_hits, prune, score
from blocksplat.render import RenderOptions, render

from conftest import make_camera, random_scene, single_scene


def _one_pixel_cam():
    # one pixel whose ray passes exactly through the Gaussian centre
    return CameraView(0, 10.0, 10.0, 0.5, 0.5, 1, 1, np.eye(3), np.zeros(3))


def test_single_ray_through_centre():
    sc = single_scene((0.0, 0.0, -2.0), opacity=0.7)
    t = accumulate_hits(sc, [_one_pixel_cam()], scale=1.0)
    assert t.hit_weight[0] == pytest.approx(1.0)


def test_fully_occluded_primitive_gets_zero():
    front = single_scene((0.0, 0.0, -1.0), scale=1000.0, opacity=1.0)
    back = single_scene((0.0, 0.0, -3.0), opacity=0.7)
    sc = GaussianScene.concatenate([front, back])
    cam = CameraView(0, 8.0, 8.0, 4.0, 4.0, 8, 8, np.eye(3), np.zeros(3))
    t = accumulate_hits(sc, [cam], scale=1.0)
    assert t.hit_weight[1] == 0.0 and t.hit_weight[0] > 0


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_occluder_never_increases_hits(seed):
    rng = np.random.default_rng(seed)
    sc = random_scene(rng, 8)
    cam = make_camera(size=16)
    before = accumulate_hits(sc, [cam], scale=1.0).hit_weight
    occluder = single_scene(cam.center + 0.3 * (np.zeros(3) - cam.center) / np.linalg.norm(cam.center),
                            scale=0.3, opacity=0.99)
    after = accumulate_hits(GaussianScene.concatenate([sc, occluder]), [cam], scale=1.0).hit_weight[:8]
    assert np.all(after <= before + 1e-12)


def test_score_examples():
    sc = GaussianScene(np.zeros((2, 3)), [[1, 0, 0, 0]] * 2, np.ones((2, 3)), [1.0, 0.0], np.zeros((2, 3, 16)))
    t = score(ImportanceTable(np.array([0, 1]), np.array([1.0, 5.0])), sc)
    assert t.score[0] == pytest.approx(math.log(2))
    assert t.score[1] == 0.0


@given(t=st.floats(0.1, 10.0), s=st.floats(0.1, 2.0))
def test_score_increases_with_size(t, s):
    a = GaussianScene(np.zeros((1, 3)), [[1, 0, 0, 0]], np.full((1, 3), s), [0.5], np.zeros((1, 3, 16)))
    b = a.replace(scales=np.full((1, 3), s * (1 + t)))
    rec = ImportanceTable(np.array([0]), np.array([2.0]))
    sa, sb = score(rec, a), score(rec, b)
    assert sb.volume[0] == pytest.approx(sa.volume[0] * (1 + t) ** 3)
    assert sb.score[0] > sa.score[0]
    assert sa.log_volume[0] < sa.volume[0]


def test_prune_fraction_zero_is_noop(rng):
    sc = random_scene(rng, 10)
    t = score(ImportanceTable(np.arange(10), rng.random(10)), sc)
    out, removed = prune(sc, np.arange(10), t, 0.0)
    assert out is sc and len(removed) == 0


def test_prune_removes_two_lowest(rng):
    sc = random_scene(rng, 10)
    t = score(ImportanceTable(np.arange(10), rng.random(10)), sc)
    out, removed = prune(sc, np.arange(10), t, 0.2)
    np.testing.assert_array_equal(removed, np.sort(np.argsort(t.score)[:2]))
    assert len(out) == 8


def test_prune_rejects_bad_fraction(rng):
    sc = random_scene(rng, 4)
    t = score(ImportanceTable(np.arange(4), np.ones(4)), sc)
    for f in (1.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            prune(sc, np.arange(4), t, f)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 40), frac=st.floats(0, 0.95))
def test_prune_count_and_subset(seed, k, frac):
    rng = np.random.default_rng(seed)
    sc = random_scene(rng, 40)
    subset = np.sort(rng.choice(40, k, replace=False))
    H = rng.integers(0, 3, k).astype(float)  # plenty of ties
    t = score(ImportanceTable(subset, H), sc)
    out, removed = prune(sc, subset, t, frac)
    assert len(removed) == math.floor(frac * k)
    assert set(removed.tolist()) <= set(subset.tolist())
    survivors = np.setdiff1d(np.arange(40), removed)
    np.testing.assert_array_equal(out.positions, sc.positions[survivors])
    # any zero-score member goes before any positive one
    if len(removed):
        zero = set(subset[t.score == 0].tolist())
        assert set(removed.tolist()) <= zero or zero <= set(removed.tolist())


def test_invisible_primitive_is_pruned_first(rng):
    sc = random_scene(rng, 9, opacity=(0.3, 0.9))
    hidden = single_scene((0.0, 0.0, 50.0), scale=1.0, opacity=0.9)  # far above, out of view
    sc = GaussianScene.concatenate([sc, hidden])
    cam = make_camera(size=16)
    t = score(accumulate_hits(sc, [cam], scale=1.0), sc)
    assert t.score[9] == 0.0
    _, removed = prune(sc, np.arange(10), t, 0.1)
    assert removed.tolist() == [9]


def test_weights_per_ray_sum_to_at_most_one(rng):
    out = render(random_scene(rng, 15, opacity=(0.5, 0.99)), make_camera(size=16), RenderOptions(capture_traces=True))
    per_pixel = np.bincount(out.traces.pixel, weights=out.traces.weight, minlength=256)
    assert per_pixel.max() <= 1.0 + 1e-12


def test_csv_dump(tmp_path, rng):
    sc = random_scene(rng, 5)
    t = score(ImportanceTable(np.arange(5), np.ones(5)), sc)
    t.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "index,H,v,log_v,alpha,S" and len(lines) == 6


def test_empty_views_rejected(rng):
    with pytest.raises(ValueError):
        accumulate_hits(random_scene(rng, 3), [])
