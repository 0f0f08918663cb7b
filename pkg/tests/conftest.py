import numpy as np
import pytest

from blocksplat.model import CameraView, GaussianScene, look_at, rgb_to_dc


def random_scene(rng, k, spread=0.6, scale=(0.05, 0.3), opacity=(0.1, 0.95), sh_rest=0.0):
    pos = np.c_[rng.uniform(-spread, spread, (k, 2)), rng.uniform(-spread, spread, k)]
    sh = np.zeros((k, 3, 16))
    sh[:, :, 0] = rgb_to_dc(rng.uniform(0.1, 0.9, (k, 3)))
    sh[:, :, 1:] = sh_rest * rng.standard_normal((k, 3, 15))
    q = rng.standard_normal((k, 4))
    return GaussianScene(pos, q / np.linalg.norm(q, axis=1, keepdims=True),
                         rng.uniform(*scale, (k, 3)), rng.uniform(*opacity, k), sh)


def make_camera(eye=(0.0, -3.0, 0.5), target=(0.0, 0.0, 0.0), size=32, focal=None, vid=0, image=None):
    R, t = look_at(eye, target)
    f = focal if focal is not None else 0.9 * size
    return CameraView(vid, f, f, size / 2, size / 2, size, size, R, t, image=image)


def single_scene(position, scale=0.1, opacity=0.5, color=(0.5, 0.5, 0.5)):
    sh = np.zeros((1, 3, 16))
    sh[0, :, 0] = rgb_to_dc(np.asarray(color, dtype=float))
    return GaussianScene(np.array([position], dtype=float), np.array([[1.0, 0, 0, 0]]),
                         np.full((1, 3), scale, dtype=float), np.array([opacity]), sh)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def identity_camera():
    # at the origin looking down -z
    return CameraView(0, 20.0, 20.0, 8.0, 8.0, 16, 16, np.eye(3), np.zeros(3))
