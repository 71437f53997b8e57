"""Resampling MPI frusta and images between RPC views.

Both transports are gather-based: for every destination sample the source
position is found by localizing with the destination camera and projecting
with the source camera, then the source is sampled bilinearly.  Samples that
land outside the source raster are masked, never clamped.
"""

from __future__ import annotations

import dataclasses
import hashlib
import threading
from typing import Optional

import numpy as np

from rpckit._parallel import map_ordered
from rpckit.errors import DenominatorNearZero, DimMismatch, NoInverseModel
from rpckit.mpi_field import HeightSampling, MpiFrustum
from rpckit.rpc_camera import (
    GroundPointBatch,
    PixelPointBatch,
    RpcCamera,
    localization_jacobian,
    localize,
    localize_inverse,
    project,
    projection_jacobian,
)

BOUNDS_EPS = 1e-6


def in_bounds(x, y, dims, eps: float = BOUNDS_EPS):
    h, w = dims
    return (x >= -eps) & (x <= w - 1 + eps) & (y >= -eps) & (y <= h - 1 + eps)


@dataclasses.dataclass(eq=False)
class BilinearTaps:
    """Flat indices and weights of the four bilinear neighbours."""

    index: np.ndarray  # (4, ...) int
    weight: np.ndarray  # (4, ...) float
    frac: tuple  # (fx, fy)
    size: int  # number of source cells

    @classmethod
    def build(cls, x, y, dims, base=0, size=None):
        h, w = dims
        if h < 2 or w < 2:
            raise DimMismatch(f"bilinear sampling needs rasters of at least 2x2, got {dims}")
        x = np.clip(np.asarray(x, float), 0, w - 1)
        y = np.clip(np.asarray(y, float), 0, h - 1)
        x0 = np.minimum(np.floor(x).astype(np.int64), w - 2)
        y0 = np.minimum(np.floor(y).astype(np.int64), h - 2)
        fx, fy = x - x0, y - y0
        i00 = base + y0 * w + x0
        index = np.stack([i00, i00 + 1, i00 + w, i00 + w + 1])
        weight = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
        return cls(index, weight, (fx, fy), h * w if size is None else size)

    def gather(self, flat: np.ndarray) -> np.ndarray:
        """Sample ``flat`` (cells[, C]); result has the taps' shape [+ (C,)]."""
        vals = flat[self.index]
        wt = self.weight if flat.ndim == 1 else self.weight[..., None]
        return vals[0] * wt[0] + vals[1] * wt[1] + vals[2] * wt[2] + vals[3] * wt[3]

    def scatter(self, grad: np.ndarray, channels: Optional[int] = None) -> np.ndarray:
        """Adjoint of :meth:`gather`."""
        if channels is None:
            return np.bincount(self.index.ravel(), weights=(self.weight * grad[None]).ravel(),
                               minlength=self.size)
        out = np.empty((self.size, channels))
        for c in range(channels):
            out[:, c] = np.bincount(self.index.ravel(), weights=(self.weight * grad[None, ..., c]).ravel(),
                                    minlength=self.size)
        return out

    def coord_gradient(self, flat: np.ndarray):
        """d(sample)/dx and d(sample)/dy."""
        v = flat[self.index]
        fx, fy = self.frac
        if flat.ndim > 1:
            fx, fy = fx[..., None], fy[..., None]
        dx = (1 - fy) * (v[1] - v[0]) + fy * (v[3] - v[2])
        dy = (1 - fx) * (v[2] - v[0]) + fx * (v[3] - v[1])
        return dx, dy


def bilinear_sample(image: np.ndarray, x, y):
    """Sample an (H, W[, C]) raster at continuous (x=samp, y=line)."""
    h, w = image.shape[:2]
    taps = BilinearTaps.build(x, y, (h, w))
    flat = image.reshape(h * w, -1) if image.ndim == 3 else image.reshape(h * w)
    return taps.gather(flat)


@dataclasses.dataclass(eq=False)
class WarpGrid:
    """Source (reference) pixel coordinates for every target plane sample."""

    coords: np.ndarray  # (N, H, W, 2): samp_ref, line_ref
    mask: np.ndarray  # (N, H, W) True where inside the source raster
    src_dims: tuple
    _taps: Optional[BilinearTaps] = dataclasses.field(default=None, repr=False)

    @property
    def dims(self):
        return self.coords.shape[1:3]

    def taps(self) -> BilinearTaps:
        if self._taps is None:
            n = self.coords.shape[0]
            hs, ws = self.src_dims
            base = (np.arange(n) * hs * ws)[:, None, None]
            self._taps = BilinearTaps.build(self.coords[..., 0], self.coords[..., 1], self.src_dims,
                                            base=base, size=n * hs * ws)
        return self._taps


_GRID_CACHE: dict = {}
_CACHE_LOCK = threading.Lock()


def clear_grid_cache() -> None:
    with _CACHE_LOCK:
        _GRID_CACHE.clear()


def _grid_key(ref_cam, tgt_cam, sampling, tgt_dims, ref_dims, fallback):
    digest = hashlib.sha1()
    for part in (ref_cam.fingerprint(), tgt_cam.fingerprint(), sampling.fingerprint(),
                 repr((tuple(tgt_dims), tuple(ref_dims), fallback)).encode()):
        digest.update(part)
        digest.update(b"#")
    return digest.hexdigest()


def build_warp_grid(ref_cam: RpcCamera, tgt_cam: RpcCamera, sampling: HeightSampling, tgt_dims,
                    ref_dims=None, iterative_fallback: bool = False, use_cache: bool = True) -> WarpGrid:
    """Per target pixel and plane height: localize in the target view, project
    into the reference view."""
    tgt_dims = tuple(int(d) for d in tgt_dims)
    ref_dims = tgt_dims if ref_dims is None else tuple(int(d) for d in ref_dims)
    if not tgt_cam.has_inverse and not iterative_fallback:
        raise NoInverseModel("target camera has no inverse model and iterative fallback is disabled")
    key = _grid_key(ref_cam, tgt_cam, sampling, tgt_dims, ref_dims, iterative_fallback)
    if use_cache:
        with _CACHE_LOCK:
            hit = _GRID_CACHE.get(key)
        if hit is not None:
            return hit

    h, w = tgt_dims
    line, samp = np.mgrid[0:h, 0:w].astype(float)

    def one_plane(i):
        pts = PixelPointBatch(samp, line, np.full((h, w), sampling.heights[i]))
        try:
            ground = localize_inverse(tgt_cam, pts) if tgt_cam.has_inverse else localize(tgt_cam, pts)
            px = project(ref_cam, ground)
        except DenominatorNearZero as exc:
            raise DenominatorNearZero((i, exc.index), exc.value) from exc
        return np.stack([px.samp, px.line], axis=-1)

    coords = np.stack(map_ordered(one_plane, range(len(sampling))))
    mask = in_bounds(coords[..., 0], coords[..., 1], ref_dims)
    grid = WarpGrid(coords, mask, ref_dims)
    if use_cache:
        with _CACHE_LOCK:
            _GRID_CACHE[key] = grid
    return grid


def identity_grid(n_planes: int, dims) -> WarpGrid:
    h, w = dims
    line, samp = np.mgrid[0:h, 0:w].astype(float)
    coords = np.broadcast_to(np.stack([samp, line], -1), (n_planes, h, w, 2)).copy()
    return WarpGrid(coords, np.ones((n_planes, h, w), bool), (h, w))


def shifted_grid(n_planes: int, dims, shifts) -> WarpGrid:
    """Grid sampling plane i at ``samp + shifts[i]``."""
    grid = identity_grid(n_planes, dims)
    grid.coords[..., 0] += np.asarray(shifts, float)[:, None, None]
    grid.mask = in_bounds(grid.coords[..., 0], grid.coords[..., 1], dims)
    return grid


def _check_grid(grid: WarpGrid, n_planes: int, src_dims):
    if grid.coords.shape[0] != n_planes:
        raise DimMismatch(f"grid has {grid.coords.shape[0]} planes, MPI has {n_planes}")
    if tuple(grid.src_dims) != tuple(src_dims):
        raise DimMismatch(f"grid expects source dims {grid.src_dims}, MPI has {tuple(src_dims)}")


def warp_frustum(mpi_ref: MpiFrustum, grid: WarpGrid, camera=None) -> MpiFrustum:
    """Bilinearly resample every plane; out-of-frustum samples get C = 0, sigma = 0."""
    c, s = warp_planes(mpi_ref.colors, mpi_ref.sigmas, grid)
    return MpiFrustum(c, s, mpi_ref.sampling, camera)


def warp_planes(colors: np.ndarray, sigmas: np.ndarray, grid: WarpGrid):
    n = sigmas.shape[0]
    _check_grid(grid, n, sigmas.shape[1:])
    taps = grid.taps()
    m = grid.mask
    out_c = taps.gather(colors.reshape(-1, 3)) * m[..., None]
    out_s = taps.gather(sigmas.reshape(-1)) * m
    return out_c, out_s


def warp_planes_backward(grid: WarpGrid, grad_colors: np.ndarray, grad_sigmas: np.ndarray):
    """Adjoint of :func:`warp_planes` (grid coordinates held fixed)."""
    n = grid.coords.shape[0]
    hs, ws = grid.src_dims
    taps = grid.taps()
    m = grid.mask
    gc = taps.scatter(grad_colors * m[..., None], channels=3).reshape(n, hs, ws, 3)
    gs = taps.scatter(grad_sigmas * m).reshape(n, hs, ws)
    return gc, gs


def transport_map(src_cam: RpcCamera, dst_cam: RpcCamera, samp, line, hei, with_grad: bool = False):
    """Source pixel of each destination pixel at the given altitude.

    With ``with_grad`` also returns the derivative of the source position with
    respect to altitude (px/m), which needs the destination inverse model.
    """
    pts = PixelPointBatch(samp, line, hei)
    if not with_grad:
        px = project(src_cam, localize(dst_cam, pts))
        return px.samp, px.line
    if not dst_cam.has_inverse:
        raise NoInverseModel("altitude gradients need the destination inverse model")
    lat, lon, dlat, dlon = localization_jacobian(dst_cam, pts)
    x, y, dx, dy = projection_jacobian(src_cam, GroundPointBatch(lat, lon, pts.hei))
    dx_dh = dx[0] * dlat[2] + dx[1] * dlon[2] + dx[2]
    dy_dh = dy[0] * dlat[2] + dy[1] * dlon[2] + dy[2]
    return x, y, dx_dh, dy_dh


@dataclasses.dataclass(eq=False)
class Transport:
    image: np.ndarray  # (H, W, C) destination-frame image, zero where masked
    mask: np.ndarray  # (H, W) valid samples
    coords: np.ndarray  # (H, W, 2) source positions
    heights: np.ndarray  # (H, W) altitude used per destination pixel

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


def _masked_height_sample(height, valid, x, y):
    """Bilinear altitude lookup; invalid if any contributing tap is invalid."""
    dims = height.shape
    taps = BilinearTaps.build(x, y, dims)
    flat_h = np.where(valid, height, 0.0).ravel()
    flat_v = valid.ravel().astype(float)
    hv = taps.gather(flat_h)
    ok = taps.gather(flat_v) > 1 - 1e-9
    return hv, ok & in_bounds(x, y, dims)


def reproject_via_altitude(image, height, src_cam: RpcCamera, dst_cam: RpcCamera, height_mask=None,
                           height_in: str = "dst", iterations: int = 5) -> Transport:
    """Move ``image`` from the source view into the destination view through an altitude map.

    ``height_in="dst"``: ``height`` is already in the destination frame.
    ``height_in="src"``: ``height`` belongs to the source view (rendered with
    ``image``); the destination altitude is found by fixed-point iteration
    ``h <- height(source_position(q, h))``.
    Destination pixels with NO-DATA altitude or out-of-bounds source
    positions are masked.
    """
    image = np.asarray(image, float)
    height = np.asarray(height, float)
    if image.shape[:2] != height.shape:
        raise DimMismatch(f"image {image.shape[:2]} and height {height.shape} dims differ")
    valid = np.isfinite(height)
    if height_mask is not None:
        if np.shape(height_mask) != height.shape:
            raise DimMismatch("height mask dims differ from height")
        valid &= np.asarray(height_mask, bool)
    dims = height.shape
    h, w = dims
    line, samp = np.mgrid[0:h, 0:w].astype(float)
    if height_in == "dst":
        hq = np.where(valid, height, 0.0)
        ok = valid.copy()
        x, y = transport_map(src_cam, dst_cam, samp, line, hq)
    elif height_in == "src":
        hq = np.where(valid, height, 0.0)
        ok = valid.copy()
        x, y = transport_map(src_cam, dst_cam, samp, line, hq)
        for _ in range(iterations):
            hq_new, ok_new = _masked_height_sample(height, valid, x, y)
            hq = np.where(ok_new, hq_new, hq)
            ok = ok_new
            x, y = transport_map(src_cam, dst_cam, samp, line, hq)
    else:
        raise ValueError(f"height_in must be 'dst' or 'src', got {height_in!r}")
    mask = ok & in_bounds(x, y, image.shape[:2])
    out = bilinear_sample(image, x, y)
    out = out * (mask[..., None] if out.ndim == 3 else mask)
    return Transport(out, mask, np.stack([x, y], -1), hq)
