import numpy as np
import pytest

from rpckit.synthetic import build_scene, fit_rpc_to_camera, make_camera


def affine_rpc(shear=0.0, dims=(32, 32), height_range=(0.0, 20.0), **kw):
    cam = make_camera(shear, dims, height_range=height_range, **kw)
    return cam, fit_rpc_to_camera(cam, cam.virtual_grid(dims, height_range))


def random_affine_camera(rng, dims=(48, 40), height_range=(0.0, 30.0)):
    """Affine camera with a random rotation, anisotropic scale and height terms."""
    from rpckit.synthetic import LinearCamera, CELL_DEG

    h, w = dims
    theta = rng.uniform(-0.4, 0.4)
    sx, sy = rng.uniform(0.8, 1.25, size=2)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    lin = np.diag([sx, sy]) @ rot
    hei_off = sum(height_range) / 2
    hei_scale = (height_range[1] - height_range[0]) / 2
    matrix = np.zeros((2, 4))
    # columns: lat, lon, hei, 1 (normalized in, normalized out)
    matrix[:, :2] = lin @ np.array([[0.0, 1.0], [-1.0, 0.0]])
    matrix[:, 2] = rng.uniform(-0.3, 0.3, size=2)
    matrix[:, 3] = rng.uniform(-0.05, 0.05, size=2)
    cam = LinearCamera(matrix, samp_off=(w - 1) / 2, samp_scale=w / 2, line_off=(h - 1) / 2, line_scale=h / 2,
                       lat_off=1.0, lat_scale=h / 2 * CELL_DEG, lon_off=1.0, lon_scale=w / 2 * CELL_DEG,
                       hei_off=hei_off, hei_scale=hei_scale)
    return cam


@pytest.fixture(scope="session")
def small_scene():
    return build_scene("plateau", seed=3, dims=(24, 24), baseline=0.5, n_points=40)
