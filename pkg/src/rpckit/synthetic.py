"""Procedural ground-truth scenes for exercising the camera and MPI code.

Terrain lives on a regular geodetic grid (1 cell = 1e-5 deg).  Truth cameras
are affine in normalized coordinates, so cubic RPCs represent them exactly and
every downstream tolerance measures the module under test, not fit error.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np
from scipy import ndimage

from rpckit.errors import BadDims, FootprintOutOfTerrain, RankDeficientSystem
from rpckit.rpc_camera import (
    RpcCamera,
    VirtualGrid,
    _basis,
    fit_inverse,
    fit_polynomial,
    project,
)
from rpckit.scene import Scene, SparsePoints, View

CELL_DEG = 1e-5
CELL_M = 1.11  # approximate metres per 1e-5 deg near the equator
FEATURES = ("plateau", "ridge", "fbm")


@dataclasses.dataclass(eq=False)
class Terrain:
    heights: np.ndarray  # (H, W) metres
    albedo: np.ndarray  # (H, W, 3) in [0, 1]
    lat0: float = 1.0  # latitude of cell row 0
    lon0: float = 1.0  # longitude of cell col 0
    spacing: float = CELL_M

    def __post_init__(self):
        if not np.all(np.isfinite(self.heights)):
            raise ValueError("terrain heights must be finite")
        if not self.spacing > 0:
            raise ValueError("terrain spacing must be positive")

    @property
    def shape(self):
        return self.heights.shape

    def to_cells(self, lat, lon):
        """Continuous (row, col) cell coordinates of geodetic positions."""
        return (self.lat0 - np.asarray(lat)) / CELL_DEG, (np.asarray(lon) - self.lon0) / CELL_DEG


def _smooth_noise(rng, shape, sigmas, weights):
    out = np.zeros(shape)
    for s, w in zip(sigmas, weights):
        n = ndimage.gaussian_filter(rng.standard_normal(shape), s, mode="wrap")
        out += w * n / (n.std() + 1e-12)
    return out


def _unit(a):
    lo, hi = a.min(), a.max()
    return np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)


def gen_terrain(seed: int, dims, relief: float, feature: str = "plateau",
                contrast: float = 1.0, albedo_range=(0.1, 0.6), texture_scale: float = 1.0) -> Terrain:
    """Deterministic terrain and albedo texture.

    ``plateau`` is a raised rectangle with vertical walls (two height values),
    ``ridge`` a linear ridge with triangular profile, ``fbm`` smooth fractal
    relief.  ``contrast`` in [0, 1] scales the texture amplitude inside
    ``albedo_range``; ``texture_scale`` scales the texture correlation
    lengths (smaller is sharper).
    """
    h, w = (int(d) for d in dims)
    if h < 4 or w < 4:
        raise BadDims(f"terrain needs at least 4x4 cells, got {dims}")
    if relief < 0:
        raise ValueError("relief must be >= 0")
    if feature not in FEATURES:
        raise ValueError(f"unknown terrain feature {feature!r}")
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:h, 0:w]

    if feature == "plateau":
        rh = int(rng.integers(max(2, h // 4), max(3, h // 2) + 1))
        rw = int(rng.integers(max(2, w // 4), max(3, w // 2) + 1))
        r0 = int(rng.integers(h // 4, max(h // 4 + 1, h - rh - h // 4 + 1)))
        c0 = int(rng.integers(w // 4, max(w // 4 + 1, w - rw - w // 4 + 1)))
        mask = (rows >= r0) & (rows < r0 + rh) & (cols >= c0) & (cols < c0 + rw)
        heights = np.where(mask, float(relief), 0.0)
    elif feature == "ridge":
        theta = rng.uniform(0, math.pi)
        dist = (cols - w / 2) * math.cos(theta) + (rows - h / 2) * math.sin(theta)
        width = max(h, w) / 4
        heights = relief * np.clip(1 - np.abs(dist) / width, 0, None)
    else:
        heights = relief * _unit(_smooth_noise(rng, (h, w), (12, 6, 3), (1.0, 0.5, 0.25)))
    if relief == 0:
        heights = np.zeros((h, w))

    lo, hi = albedo_range
    mid, half = (lo + hi) / 2, (hi - lo) / 2 * float(np.clip(contrast, 0, 1))
    chans = []
    for _ in range(3):
        t = _smooth_noise(rng, (h, w), tuple(texture_scale * s for s in (6, 3, 1.5)), (1.0, 0.6, 0.3))
        chans.append(mid + half * (2 * _unit(t) - 1))
    albedo = np.stack(chans, axis=-1)
    return Terrain(heights=heights, albedo=albedo)


def bilinear(field: np.ndarray, r, c):
    """Bilinear lookup at continuous (row, col); caller guarantees bounds."""
    h, w = field.shape[:2]
    r = np.clip(r, 0, h - 1)
    c = np.clip(c, 0, w - 1)
    r0 = np.minimum(np.floor(r).astype(int), h - 2)
    c0 = np.minimum(np.floor(c).astype(int), w - 2)
    fr, fc = r - r0, c - c0
    if field.ndim == 3:
        fr, fc = fr[..., None], fc[..., None]
    return ((1 - fr) * (1 - fc) * field[r0, c0] + (1 - fr) * fc * field[r0, c0 + 1]
            + fr * (1 - fc) * field[r0 + 1, c0] + fr * fc * field[r0 + 1, c0 + 1])


@dataclasses.dataclass(eq=False)
class LinearCamera:
    """Affine truth camera: (lat_n, lon_n, hei_n, 1) -> (samp_n, line_n)."""

    matrix: np.ndarray  # (2, 4)
    samp_off: float
    samp_scale: float
    line_off: float
    line_scale: float
    lat_off: float
    lat_scale: float
    lon_off: float
    lon_scale: float
    hei_off: float
    hei_scale: float

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.shape != (2, 4):
            raise ValueError("matrix must be 2x4")
        if np.linalg.matrix_rank(self.matrix[:, :3]) < 2:
            raise ValueError("linear part must have rank 2")

    def project(self, lat, lon, hei):
        x = np.stack([(np.asarray(lat, float) - self.lat_off) / self.lat_scale,
                      (np.asarray(lon, float) - self.lon_off) / self.lon_scale,
                      (np.asarray(hei, float) - self.hei_off) / self.hei_scale,
                      np.ones(np.shape(lat))])
        s, l = np.tensordot(self.matrix, x, axes=1)
        return s * self.samp_scale + self.samp_off, l * self.line_scale + self.line_off

    def localize(self, samp, line, hei):
        """Exact inverse at known height."""
        hn = (np.asarray(hei, float) - self.hei_off) / self.hei_scale
        s = (np.asarray(samp, float) - self.samp_off) / self.samp_scale
        l = (np.asarray(line, float) - self.line_off) / self.line_scale
        m = self.matrix
        rs = s - m[0, 2] * hn - m[0, 3]
        rl = l - m[1, 2] * hn - m[1, 3]
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        lat_n = (m[1, 1] * rs - m[0, 1] * rl) / det
        lon_n = (-m[1, 0] * rs + m[0, 0] * rl) / det
        return lat_n * self.lat_scale + self.lat_off, lon_n * self.lon_scale + self.lon_off

    def virtual_grid(self, dims, hei_range, counts=(20, 20, 10), margin_px: float = 2.0) -> VirtualGrid:
        """Ground box covering the image footprint over ``hei_range``."""
        h, w = dims
        s = np.array([-margin_px, w - 1 + margin_px] * 2 * 2)
        l = np.array([-margin_px] * 2 + [h - 1 + margin_px] * 2 + [-margin_px] * 2 + [h - 1 + margin_px] * 2)
        hh = np.array([hei_range[0]] * 4 + [hei_range[1]] * 4)
        lat, lon = self.localize(s, l, hh)
        return VirtualGrid((float(lat.min()), float(lat.max())), (float(lon.min()), float(lon.max())),
                           (float(min(hei_range)), float(max(hei_range))), tuple(counts))


def make_camera(shear: float, dims, height_range=(0.0, 20.0), anchor=(1.0, 1.0), margin: int = 0,
                datum: float = 0.0) -> LinearCamera:
    """Axis-aligned orthographic camera plus ``samp += shear * (hei - datum)``.

    Pixel (samp, line) at height ``datum`` sees terrain cell (line + margin,
    samp + margin).  ``shear`` is in px per metre.
    """
    h, w = (int(d) for d in dims)
    if h < 2 or w < 2:
        raise BadDims(f"camera dims must be >= 2, got {dims}")
    lat0, lon0 = anchor
    samp_off, samp_scale = (w - 1) / 2.0, w / 2.0
    line_off, line_scale = (h - 1) / 2.0, h / 2.0
    hei_off = (height_range[0] + height_range[1]) / 2.0
    hei_scale = max(abs(height_range[1] - height_range[0]) / 2.0, 1.0)
    matrix = np.array([[0.0, 1.0, shear * hei_scale / samp_scale, shear * (hei_off - datum) / samp_scale],
                       [-1.0, 0.0, 0.0, 0.0]])
    return LinearCamera(matrix,
                        samp_off=samp_off, samp_scale=samp_scale,
                        line_off=line_off, line_scale=line_scale,
                        lat_off=lat0 - (line_off + margin) * CELL_DEG, lat_scale=line_scale * CELL_DEG,
                        lon_off=lon0 + (samp_off + margin) * CELL_DEG, lon_scale=samp_scale * CELL_DEG,
                        hei_off=hei_off, hei_scale=hei_scale)


def make_camera_pair(baseline: float, dims, **kwargs):
    """Nadir camera A and side camera B with ``samp_B = samp_A + baseline * hei``."""
    if baseline < 0:
        raise ValueError("baseline must be >= 0")
    return make_camera(0.0, dims, **kwargs), make_camera(baseline, dims, **kwargs)


def fit_rpc_to_camera(cam: LinearCamera, grid: VirtualGrid, degree: int = 3,
                      with_inverse: bool = True, inverse_degree: int = 3) -> RpcCamera:
    """Least-squares RPC of a truth camera over a virtual grid.

    The forward polynomials are fitted with a unit denominator (exact for
    affine truth), then the inverse via :func:`rpckit.rpc_camera.fit_inverse`.
    """
    ground = grid.points()
    samp, line = cam.project(ground.lat, ground.lon, ground.hei)
    lat_n = (ground.lat - cam.lat_off) / cam.lat_scale
    lon_n = (ground.lon - cam.lon_off) / cam.lon_scale
    hei_n = (ground.hei - cam.hei_off) / cam.hei_scale
    horiz = np.stack([np.ones_like(lat_n), lat_n, lon_n], axis=1)
    if np.linalg.matrix_rank(horiz) < 3:
        raise RankDeficientSystem(int(np.linalg.matrix_rank(horiz)), 3)
    terms = _basis(degree)
    s_num, s_den = fit_polynomial(terms, "ground", hei_n, lat_n, lon_n, (samp - cam.samp_off) / cam.samp_scale)
    l_num, l_den = fit_polynomial(terms, "ground", hei_n, lat_n, lon_n, (line - cam.line_off) / cam.line_scale)
    rpc = RpcCamera(line_num=l_num, line_den=l_den, samp_num=s_num, samp_den=s_den,
                    samp_off=cam.samp_off, samp_scale=cam.samp_scale,
                    line_off=cam.line_off, line_scale=cam.line_scale,
                    lat_off=cam.lat_off, lat_scale=cam.lat_scale,
                    lon_off=cam.lon_off, lon_scale=cam.lon_scale,
                    hei_off=cam.hei_off, hei_scale=cam.hei_scale)
    px = project(rpc, ground)
    rpc.forward_residual = float(np.max(np.hypot(px.samp - samp, px.line - line)))
    if with_inverse:
        rpc = fit_inverse(rpc, grid, degree=inverse_degree)
        # replace() keeps forward_residual
    return rpc


def raycast_truth(terrain: Terrain, cam: LinearCamera, dims, tol: float = 1e-4):
    """Image and height raster seen by ``cam`` over ``terrain``.

    Each pixel's viewing line is marched downward from above the highest
    point in steps of at most a quarter cell of horizontal travel; the first
    sign change of ``hei - surface`` is refined by bisection to ``tol``.  The
    reported height is the surface value at the located crossing.
    """
    h, w = (int(d) for d in dims)
    line, samp = np.mgrid[0:h, 0:w].astype(float)
    top = float(terrain.heights.max()) + 1.0
    bottom = float(terrain.heights.min()) - 1.0

    def cells(hei):
        lat, lon = cam.localize(samp, line, np.full_like(samp, hei) if np.isscalar(hei) else hei)
        return terrain.to_cells(lat, lon)

    th, tw = terrain.shape
    for hh in (top, bottom):
        r, c = cells(hh)
        if r.min() < -1e-9 or c.min() < -1e-9 or r.max() > th - 1 + 1e-9 or c.max() > tw - 1 + 1e-9:
            raise FootprintOutOfTerrain(f"camera footprint leaves the terrain at height {hh}")

    def gap(hei):
        r, c = cells(hei)
        return hei - bilinear(terrain.heights, r, c)

    r_top, c_top = cells(top)
    r_bot, c_bot = cells(bottom)
    travel = float(np.max(np.hypot(r_top - r_bot, c_top - c_bot))) / (top - bottom)
    dh = (top - bottom) / 8.0 if travel == 0 else min(0.25 / travel, (top - bottom) / 8.0)
    n_steps = int(math.ceil((top - bottom) / dh))

    hi = np.full((h, w), top)
    lo = np.full((h, w), np.nan)
    found = np.zeros((h, w), dtype=bool)
    prev = np.full((h, w), top)
    for k in range(1, n_steps + 1):
        cur = max(top - k * dh, bottom)
        g = gap(np.full((h, w), cur))
        hit = (~found) & (g <= 0)
        hi[hit] = prev[hit]
        lo[hit] = cur
        found |= hit
        prev[:] = cur
        if found.all():
            break
    if not found.all():
        raise FootprintOutOfTerrain("viewing line did not reach the terrain surface")
    while np.max(hi - lo) > tol:
        mid = 0.5 * (hi + lo)
        below = gap(mid) <= 0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    r, c = cells(lo)
    height = bilinear(terrain.heights, r, c)
    image = bilinear(terrain.albedo, r, c)
    return image, height


PRESETS = {
    "plateau": dict(feature="plateau", relief=12.0),
    "ridge": dict(feature="ridge", relief=12.0),
    "fbm": dict(feature="fbm", relief=12.0),
}


def build_scene(preset: str = "plateau", seed: int = 0, dims=(64, 64), baseline: float = 0.25,
                n_points: int = 100, relief: Optional[float] = None, contrast: float = 1.0,
                base_altitude: float = 100.0, texture_scale: float = 1.0) -> Scene:
    """Reference nadir view, one training side view and one held-out side view.

    The training target has shear ``+baseline``, the held-out target
    ``-baseline``, both relative to ``base_altitude`` (the terrain floor).
    Truth heights of the reference view and 100 sparse points sampled from
    it are attached.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    params = dict(PRESETS[preset])
    if relief is not None:
        params["relief"] = relief
    h, w = dims
    relief_m = params["relief"]
    margin = int(math.ceil(baseline * (relief_m + 2.0))) + 4
    terrain = gen_terrain(seed, (h + 2 * margin, w + 2 * margin), relief_m, params["feature"], contrast=contrast,
                          texture_scale=texture_scale)
    terrain.heights = terrain.heights + base_altitude
    h_range = (base_altitude - 2.0, base_altitude + relief_m + 2.0)
    views = []
    for name, shear, role, holdout in (("ref", 0.0, "ref", False),
                                       ("tgt_1", baseline, "tgt", False),
                                       ("tgt_2", -baseline, "tgt", True)):
        cam = make_camera(shear, dims, height_range=h_range, anchor=(terrain.lat0, terrain.lon0), margin=margin,
                          datum=base_altitude)
        rpc = fit_rpc_to_camera(cam, cam.virtual_grid(dims, h_range))
        image, height = raycast_truth(terrain, cam, dims)
        views.append(View(name=name, image=image, camera=rpc, role=role, holdout=holdout, height=height))
    rng = np.random.default_rng(seed + 1)
    flat = rng.choice(h * w, size=min(n_points, h * w), replace=False)
    rows, cols = np.unravel_index(np.sort(flat), (h, w))
    ref_height = views[0].height
    points = SparsePoints(rows=rows, cols=cols, altitudes=ref_height[rows, cols])
    return Scene(views=views, height_range=(h_range[1], h_range[0]), sparse_points=points)
