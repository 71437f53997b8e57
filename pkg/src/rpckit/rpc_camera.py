"""Rational Polynomial Camera (RPC) models.

Each of the eight RPC polynomials is stored as a dense 4x4x4 coefficient
tensor.  For ground-side polynomials (projection) entry ``(i, j, k)``
multiplies ``hei**i * lat**j * lon**k``; for image-side polynomials
(localization) it multiplies ``hei**i * samp**j * line**k``.  All variables are
in normalized space.  Real RPC files carry 20 coefficients per polynomial;
:data:`TERM_EXPONENTS` maps them injectively into the tensor.
"""

from __future__ import annotations

import dataclasses
import math
import re
from typing import Optional, Sequence

import numpy as np

from rpckit.errors import (
    DenominatorNearZero,
    MalformedNumber,
    MissingKey,
    NoConvergence,
    NoInverseModel,
    NonPositiveScale,
    RankDeficientSystem,
    ResidualAboveTolerance,
    RpcFormatError,
    SingularJacobian,
)

DEN_EPS = 1e-12

# Standard 20-term cubic order as exponents of (H, P, L).  P is lat (ground
# side) or line (image side); L is lon (ground side) or samp (image side).
TERM_EXPONENTS = (
    (0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0),
    (0, 1, 1), (1, 0, 1), (1, 1, 0), (0, 0, 2), (0, 2, 0), (2, 0, 0),
    (1, 1, 1), (0, 0, 3), (0, 2, 1), (2, 0, 1), (0, 1, 2),
    (0, 3, 0), (2, 1, 0), (1, 0, 2), (1, 2, 0), (3, 0, 0),
)

OFFSET_SCALE_KEYS = (
    ("LINE_OFF", "line_off"), ("SAMP_OFF", "samp_off"),
    ("LAT_OFF", "lat_off"), ("LONG_OFF", "lon_off"), ("HEIGHT_OFF", "hei_off"),
    ("LINE_SCALE", "line_scale"), ("SAMP_SCALE", "samp_scale"),
    ("LAT_SCALE", "lat_scale"), ("LONG_SCALE", "lon_scale"), ("HEIGHT_SCALE", "hei_scale"),
)
FORWARD_BLOCKS = (
    ("LINE_NUM", "line_num"), ("LINE_DEN", "line_den"),
    ("SAMP_NUM", "samp_num"), ("SAMP_DEN", "samp_den"),
)
INVERSE_BLOCKS = (
    ("LAT_NUM", "lat_num"), ("LAT_DEN", "lat_den"),
    ("LON_NUM", "lon_num"), ("LON_DEN", "lon_den"),
)

_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def tensor_index(term: int, side: str) -> tuple[int, int, int]:
    """Tensor index of standard term ``term`` (0-based) on ``side``."""
    h, p, l = TERM_EXPONENTS[term]
    if side == "ground":
        return h, p, l
    if side == "image":
        return h, l, p
    raise ValueError(f"unknown polynomial side {side!r}")


def coeffs_to_tensor(coeffs: Sequence[float], side: str) -> np.ndarray:
    """Scatter 20 standard-ordered coefficients into a 4x4x4 tensor."""
    if len(coeffs) != 20:
        raise ValueError(f"expected 20 coefficients, got {len(coeffs)}")
    t = np.zeros((4, 4, 4))
    for n, c in enumerate(coeffs):
        t[tensor_index(n, side)] = c
    return t


def tensor_to_coeffs(tensor: np.ndarray, side: str) -> np.ndarray:
    """Gather the 20 standard coefficients; raises if other entries are set."""
    out = np.array([tensor[tensor_index(n, side)] for n in range(20)])
    rest = tensor.copy()
    for n in range(20):
        rest[tensor_index(n, side)] = 0.0
    if np.any(rest != 0):
        raise ValueError("tensor has entries outside the 20-term cubic basis")
    return out


def _powers(x):
    x = np.asarray(x, dtype=float)
    return (np.ones_like(x), x, x * x, x * x * x)


def _dpowers(x):
    x = np.asarray(x, dtype=float)
    return (np.zeros_like(x), np.ones_like(x), 2.0 * x, 3.0 * x * x)


def evaluate_polynomial(coef: np.ndarray, x0, x1, x2) -> np.ndarray:
    """Contract a 4x4x4 coefficient tensor with the cubic monomials of a batch.

    The sum runs over nonzero entries in a fixed order so every element of a
    batch is computed by exactly the same floating point operations.
    """
    v0, v1, v2 = _powers(x0), _powers(x1), _powers(x2)
    out = np.zeros(np.broadcast(v0[0], v1[0], v2[0]).shape)
    for i, j, k in zip(*np.nonzero(coef)):
        out = out + coef[i, j, k] * (v0[i] * v1[j] * v2[k])
    return out


def polynomial_gradient(coef: np.ndarray, x0, x1, x2):
    """Partial derivatives of the polynomial with respect to x0, x1, x2."""
    v = (_powers(x0), _powers(x1), _powers(x2))
    dv = (_dpowers(x0), _dpowers(x1), _dpowers(x2))
    shape = np.broadcast(v[0][0], v[1][0], v[2][0]).shape
    grads = [np.zeros(shape), np.zeros(shape), np.zeros(shape)]
    for i, j, k in zip(*np.nonzero(coef)):
        c = coef[i, j, k]
        grads[0] = grads[0] + c * (dv[0][i] * v[1][j] * v[2][k])
        grads[1] = grads[1] + c * (v[0][i] * dv[1][j] * v[2][k])
        grads[2] = grads[2] + c * (v[0][i] * v[1][j] * dv[2][k])
    return tuple(grads)


def _checked_den(den: np.ndarray) -> np.ndarray:
    bad = np.abs(den) < DEN_EPS
    if np.any(bad):
        idx = int(np.argmax(bad.ravel()))
        raise DenominatorNearZero(idx, float(np.ravel(den)[idx]))
    return den


def evaluate_rational(num, den, x0, x1, x2) -> np.ndarray:
    return evaluate_polynomial(num, x0, x1, x2) / _checked_den(evaluate_polynomial(den, x0, x1, x2))


def rational_gradient(num, den, x0, x1, x2):
    """Value and partial derivatives of num/den (quotient rule)."""
    n = evaluate_polynomial(num, x0, x1, x2)
    d = _checked_den(evaluate_polynomial(den, x0, x1, x2))
    dn = polynomial_gradient(num, x0, x1, x2)
    dd = polynomial_gradient(den, x0, x1, x2)
    value = n / d
    return value, tuple((a - value * b) / d for a, b in zip(dn, dd))


@dataclasses.dataclass(eq=False)
class RpcCamera:
    """Forward and optional inverse RPC of one view.

    ``inverse_residual`` is the max round-trip reprojection error (px) over the
    grid the inverse was fitted on, ``inverse_ground_residual`` the max
    localization error (deg) over the same grid.  ``forward_residual`` is set
    when the forward model itself was fitted to a reference camera.
    """

    line_num: np.ndarray
    line_den: np.ndarray
    samp_num: np.ndarray
    samp_den: np.ndarray
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
    lat_num: Optional[np.ndarray] = None
    lat_den: Optional[np.ndarray] = None
    lon_num: Optional[np.ndarray] = None
    lon_den: Optional[np.ndarray] = None
    inverse_residual: Optional[float] = None
    inverse_ground_residual: Optional[float] = None
    forward_residual: Optional[float] = None

    def __post_init__(self):
        for key, attr in OFFSET_SCALE_KEYS:
            value = float(getattr(self, attr))
            setattr(self, attr, value)
            if attr.endswith("_scale") and not value > 0:
                raise NonPositiveScale(key, value)
        for _, attr in FORWARD_BLOCKS + INVERSE_BLOCKS:
            t = getattr(self, attr)
            if t is not None:
                t = np.array(t, dtype=float)
                if t.shape != (4, 4, 4):
                    raise ValueError(f"{attr} must be 4x4x4, got {t.shape}")
                setattr(self, attr, t)
        present = [getattr(self, a) is not None for _, a in INVERSE_BLOCKS]
        if any(present) and not all(present):
            raise ValueError("inverse model must provide all four polynomials")

    @property
    def has_inverse(self) -> bool:
        return self.lat_num is not None

    def normalize_ground(self, lat, lon, hei):
        return ((np.asarray(lat, float) - self.lat_off) / self.lat_scale,
                (np.asarray(lon, float) - self.lon_off) / self.lon_scale,
                (np.asarray(hei, float) - self.hei_off) / self.hei_scale)

    def normalize_image(self, samp, line, hei):
        return ((np.asarray(samp, float) - self.samp_off) / self.samp_scale,
                (np.asarray(line, float) - self.line_off) / self.line_scale,
                (np.asarray(hei, float) - self.hei_off) / self.hei_scale)

    def fingerprint(self) -> bytes:
        """Stable byte digest input, used for warp-grid cache keys."""
        parts = [np.array([getattr(self, a) for _, a in OFFSET_SCALE_KEYS]).tobytes()]
        for _, attr in FORWARD_BLOCKS + INVERSE_BLOCKS:
            t = getattr(self, attr)
            parts.append(b"-" if t is None else t.tobytes())
        return b"|".join(parts)


def _as_array(x):
    return np.asarray(x, dtype=float)


@dataclasses.dataclass(eq=False)
class GroundPointBatch:
    lat: np.ndarray
    lon: np.ndarray
    hei: np.ndarray

    def __post_init__(self):
        self.lat, self.lon, self.hei = map(_as_array, (self.lat, self.lon, self.hei))
        if not (self.lat.shape == self.lon.shape == self.hei.shape):
            raise ValueError("lat, lon and hei must have the same shape")
        if not np.all(np.isfinite(self.hei)):
            raise ValueError("hei must be finite")

    def __len__(self):
        return self.lat.size

    def __getitem__(self, idx):
        return GroundPointBatch(self.lat[idx], self.lon[idx], self.hei[idx])


@dataclasses.dataclass(eq=False)
class PixelPointBatch:
    samp: np.ndarray
    line: np.ndarray
    hei: np.ndarray

    def __post_init__(self):
        self.samp, self.line, self.hei = map(_as_array, (self.samp, self.line, self.hei))
        if not (self.samp.shape == self.line.shape == self.hei.shape):
            raise ValueError("samp, line and hei must have the same shape")
        if not np.all(np.isfinite(self.hei)):
            raise ValueError("hei must be finite")

    def __len__(self):
        return self.samp.size

    def __getitem__(self, idx):
        return PixelPointBatch(self.samp[idx], self.line[idx], self.hei[idx])


def project(camera: RpcCamera, pts: GroundPointBatch) -> PixelPointBatch:
    """Ground (lat, lon, hei) to image (samp, line)."""
    lat, lon, hei = camera.normalize_ground(pts.lat, pts.lon, pts.hei)
    samp = evaluate_rational(camera.samp_num, camera.samp_den, hei, lat, lon)
    line = evaluate_rational(camera.line_num, camera.line_den, hei, lat, lon)
    return PixelPointBatch(samp * camera.samp_scale + camera.samp_off,
                           line * camera.line_scale + camera.line_off,
                           pts.hei)


def localize_inverse(camera: RpcCamera, pts: PixelPointBatch) -> GroundPointBatch:
    """Image (samp, line) plus height to ground using the inverse polynomials."""
    if not camera.has_inverse:
        raise NoInverseModel()
    samp, line, hei = camera.normalize_image(pts.samp, pts.line, pts.hei)
    lat = evaluate_rational(camera.lat_num, camera.lat_den, hei, samp, line)
    lon = evaluate_rational(camera.lon_num, camera.lon_den, hei, samp, line)
    return GroundPointBatch(lat * camera.lat_scale + camera.lat_off,
                            lon * camera.lon_scale + camera.lon_off,
                            pts.hei)


def projection_jacobian(camera: RpcCamera, pts: GroundPointBatch):
    """Pixel position and its partials w.r.t. (lat, lon, hei), physical units.

    Returns ``(samp, line, d_samp, d_line)`` where each ``d_*`` is a tuple of
    derivatives with respect to lat (px/deg), lon (px/deg) and hei (px/m).
    """
    lat, lon, hei = camera.normalize_ground(pts.lat, pts.lon, pts.hei)
    inv = (1.0 / camera.hei_scale, 1.0 / camera.lat_scale, 1.0 / camera.lon_scale)
    out = []
    for num, den, scale, off in ((camera.samp_num, camera.samp_den, camera.samp_scale, camera.samp_off),
                                 (camera.line_num, camera.line_den, camera.line_scale, camera.line_off)):
        v, (dh, dlat, dlon) = rational_gradient(num, den, hei, lat, lon)
        out.append((v * scale + off,
                    (dlat * scale * inv[1], dlon * scale * inv[2], dh * scale * inv[0])))
    (samp, dsamp), (line, dline) = out
    return samp, line, dsamp, dline


def localization_jacobian(camera: RpcCamera, pts: PixelPointBatch):
    """Inverse-model ground position and partials w.r.t. (samp, line, hei)."""
    if not camera.has_inverse:
        raise NoInverseModel()
    samp, line, hei = camera.normalize_image(pts.samp, pts.line, pts.hei)
    inv = (1.0 / camera.hei_scale, 1.0 / camera.samp_scale, 1.0 / camera.line_scale)
    out = []
    for num, den, scale, off in ((camera.lat_num, camera.lat_den, camera.lat_scale, camera.lat_off),
                                 (camera.lon_num, camera.lon_den, camera.lon_scale, camera.lon_off)):
        v, (dh, ds, dl) = rational_gradient(num, den, hei, samp, line)
        out.append((v * scale + off, (ds * scale * inv[1], dl * scale * inv[2], dh * scale * inv[0])))
    (lat, dlat), (lon, dlon) = out
    return lat, lon, dlat, dlon


def localize_iterative(camera: RpcCamera, pts: PixelPointBatch, tol: float = 1e-6,
                       max_iter: int = 30, return_iterations: bool = False):
    """Invert the forward model at fixed height by damped Newton iterations.

    Works in normalized ground space starting from ``(lat_off, lon_off)``.  A
    step that increases the residual is halved, at most 8 times.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    shape = pts.samp.shape
    ts, tl, h = (a.ravel() for a in camera.normalize_image(pts.samp, pts.line, pts.hei))
    n = ts.size
    lat = np.zeros(n)
    lon = np.zeros(n)
    iters = np.zeros(n, dtype=int)

    def residual(lat, lon, hh, s_t, l_t):
        s = evaluate_rational(camera.samp_num, camera.samp_den, hh, lat, lon)
        l = evaluate_rational(camera.line_num, camera.line_den, hh, lat, lon)
        rs, rl = s - s_t, l - l_t
        return rs, rl, np.hypot(rs * camera.samp_scale, rl * camera.line_scale)

    rs, rl, res = residual(lat, lon, h, ts, tl)
    active = res > tol
    for _ in range(max_iter):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        la, lo, hh = lat[idx], lon[idx], h[idx]
        _, (_, s_dlat, s_dlon) = rational_gradient(camera.samp_num, camera.samp_den, hh, la, lo)
        _, (_, l_dlat, l_dlon) = rational_gradient(camera.line_num, camera.line_den, hh, la, lo)
        det = s_dlat * l_dlon - s_dlon * l_dlat
        bad = np.abs(det) < 1e-14
        if np.any(bad):
            raise SingularJacobian(int(idx[np.argmax(bad)]))
        a_rs, a_rl = rs[idx], rl[idx]
        d_lat = (l_dlon * a_rs - s_dlon * a_rl) / det
        d_lon = (-l_dlat * a_rs + s_dlat * a_rl) / det
        step = np.ones(idx.size)
        old = res[idx]
        n_lat, n_lon = la - d_lat, lo - d_lon
        n_rs, n_rl, n_res = residual(n_lat, n_lon, hh, ts[idx], tl[idx])
        for _ in range(8):
            worse = n_res > old
            if not np.any(worse):
                break
            step[worse] *= 0.5
            w = np.flatnonzero(worse)
            n_lat[w] = la[w] - step[w] * d_lat[w]
            n_lon[w] = lo[w] - step[w] * d_lon[w]
            w_rs, w_rl, w_res = residual(n_lat[w], n_lon[w], hh[w], ts[idx][w], tl[idx][w])
            n_rs[w], n_rl[w], n_res[w] = w_rs, w_rl, w_res
        lat[idx], lon[idx] = n_lat, n_lon
        rs[idx], rl[idx], res[idx] = n_rs, n_rl, n_res
        iters[idx] += 1
        active = res > tol
    if np.any(active):
        first = int(np.argmax(active))
        raise NoConvergence(first, float(res[first]))
    ground = GroundPointBatch((lat * camera.lat_scale + camera.lat_off).reshape(shape),
                              (lon * camera.lon_scale + camera.lon_off).reshape(shape),
                              pts.hei)
    if return_iterations:
        return ground, iters.reshape(shape)
    return ground


def localize(camera: RpcCamera, pts: PixelPointBatch) -> GroundPointBatch:
    """Inverse model when available, Newton iteration otherwise."""
    if camera.has_inverse:
        return localize_inverse(camera, pts)
    return localize_iterative(camera, pts)


@dataclasses.dataclass(frozen=True)
class VirtualGrid:
    """Regular lattice of ground points (deg, deg, m)."""

    lat_range: tuple[float, float]
    lon_range: tuple[float, float]
    hei_range: tuple[float, float]
    counts: tuple[int, int, int]

    def __post_init__(self):
        if any(int(c) < 1 for c in self.counts):
            raise ValueError("grid counts must be >= 1")

    @classmethod
    def from_camera(cls, camera: RpcCamera, counts=(20, 20, 10), hei_range=None):
        """Grid spanning the camera's normalization box."""
        if hei_range is None:
            hei_range = (camera.hei_off - camera.hei_scale, camera.hei_off + camera.hei_scale)
        return cls((camera.lat_off - camera.lat_scale, camera.lat_off + camera.lat_scale),
                   (camera.lon_off - camera.lon_scale, camera.lon_off + camera.lon_scale),
                   tuple(hei_range), tuple(counts))

    def points(self) -> GroundPointBatch:
        axes = [np.linspace(lo, hi, int(n)) if n > 1 else np.array([(lo + hi) / 2.0])
                for (lo, hi), n in zip((self.lat_range, self.lon_range, self.hei_range), self.counts)]
        lat, lon, hei = np.meshgrid(*axes, indexing="ij")
        return GroundPointBatch(lat.ravel(), lon.ravel(), hei.ravel())


def _basis(degree: int) -> list[int]:
    return [n for n, e in enumerate(TERM_EXPONENTS) if sum(e) <= degree]


def _monomials(terms, side, x0, x1, x2) -> np.ndarray:
    v = (_powers(x0), _powers(x1), _powers(x2))
    cols = []
    for n in terms:
        i, j, k = tensor_index(n, side)
        cols.append(v[0][i] * v[1][j] * v[2][k])
    return np.stack(cols, axis=1)


def _column_rank(m: np.ndarray) -> int:
    norms = np.linalg.norm(m, axis=0)
    if np.any(norms == 0):
        return int(np.count_nonzero(norms))
    return int(np.linalg.matrix_rank(m / norms, tol=1e-9 * math.sqrt(m.shape[1])))


def _scaled_lstsq(a: np.ndarray, b: np.ndarray, rcond: float) -> np.ndarray:
    norms = np.linalg.norm(a, axis=0)
    norms[norms == 0] = 1.0
    x, *_ = np.linalg.lstsq(a / norms, b, rcond=rcond)
    return x / norms


def fit_rational(terms, side, x0, x1, x2, target, rcond=1e-10):
    """Cross-multiplied linear least squares for ``target = num/den``.

    The constant denominator term is fixed to 1.  Returns (num, den) tensors.
    Common-factor directions of the system are removed by the minimum-norm
    solution.
    """
    m = _monomials(terms, side, x0, x1, x2)
    a = np.hstack([m, -target[:, None] * m[:, 1:]])
    x = _scaled_lstsq(a, target, rcond)
    num = np.zeros((4, 4, 4))
    den = np.zeros((4, 4, 4))
    nb = len(terms)
    for c, n in zip(x[:nb], terms):
        num[tensor_index(n, side)] = c
    den[tensor_index(0, side)] = 1.0
    for c, n in zip(x[nb:], terms[1:]):
        den[tensor_index(n, side)] = c
    return num, den


def fit_polynomial(terms, side, x0, x1, x2, target, rcond=1e-12):
    """Plain polynomial least squares (denominator identically 1)."""
    m = _monomials(terms, side, x0, x1, x2)
    x = _scaled_lstsq(m, target, rcond)
    num = np.zeros((4, 4, 4))
    for c, n in zip(x, terms):
        num[tensor_index(n, side)] = c
    den = np.zeros((4, 4, 4))
    den[tensor_index(0, side)] = 1.0
    return num, den


def round_trip_residual(camera: RpcCamera, ground: GroundPointBatch):
    """Max |project(localize_inverse(p)) - p| (px) and max ground error (deg)."""
    px = project(camera, ground)
    back = localize_inverse(camera, px)
    again = project(camera, back)
    px_res = float(np.max(np.hypot(again.samp - px.samp, again.line - px.line)))
    deg_res = float(max(np.max(np.abs(back.lat - ground.lat)), np.max(np.abs(back.lon - ground.lon))))
    return px_res, deg_res


def fit_inverse(camera: RpcCamera, grid: VirtualGrid, degree: int = 3,
                tol: Optional[float] = None) -> RpcCamera:
    """Fit localization polynomials over a projected virtual grid.

    ``tol`` bounds the round-trip residual in pixels; exceeding it raises
    :class:`ResidualAboveTolerance`.
    """
    ground = grid.points()
    px = project(camera, ground)
    keep = np.isfinite(px.samp) & np.isfinite(px.line)
    ground, px = ground[keep], px[keep]
    terms = _basis(degree)
    if len(ground) < len(terms):
        raise RankDeficientSystem(len(ground), len(terms))
    s, l, h = camera.normalize_image(px.samp, px.line, px.hei)
    lat_n, lon_n, _ = camera.normalize_ground(ground.lat, ground.lon, ground.hei)
    rank = _column_rank(_monomials(terms, "image", h, s, l))
    if rank < len(terms):
        raise RankDeficientSystem(rank, len(terms))
    lat_num, lat_den = fit_rational(terms, "image", h, s, l, lat_n)
    lon_num, lon_den = fit_rational(terms, "image", h, s, l, lon_n)
    fitted = dataclasses.replace(camera, lat_num=lat_num, lat_den=lat_den,
                                 lon_num=lon_num, lon_den=lon_den)
    px_res, deg_res = round_trip_residual(fitted, ground)
    fitted.inverse_residual = px_res
    fitted.inverse_ground_residual = deg_res
    if tol is not None and px_res > tol:
        raise ResidualAboveTolerance(px_res, tol)
    return fitted


# --- text format -------------------------------------------------------------

def _parse_number(key, text, lineno):
    tok = text.split()[0] if text.split() else ""
    if not _NUMBER.match(tok):
        raise MalformedNumber(key, text, lineno)
    return float(tok)


def parse_rpc(text: str) -> RpcCamera:
    """Parse ``KEY: value`` RPC text.  Unknown keys are ignored.

    Besides the standard ``*_COEFF_1..20`` keys, a polynomial may be given in
    the extended form ``<BLOCK>_TERM_ijk`` (tensor index digits), which can
    populate any of the 64 entries.
    """
    values: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise RpcFormatError(f"line {lineno}: expected 'KEY: value', got {raw!r}")
        key, _, val = line.partition(":")
        key = key.strip()
        values[key] = _parse_number(key, val.strip(), lineno)

    kwargs = {}
    for key, attr in OFFSET_SCALE_KEYS:
        if key not in values:
            raise MissingKey(key)
        kwargs[attr] = values[key]
        if attr.endswith("_scale") and not values[key] > 0:
            raise NonPositiveScale(key, values[key])

    def block(prefix, side, required):
        ext = {k: v for k, v in values.items() if k.startswith(prefix + "_TERM_")}
        std_keys = [f"{prefix}_COEFF_{n}" for n in range(1, 21)]
        have_std = [k in values for k in std_keys]
        if not any(have_std) and not ext:
            if required:
                raise MissingKey(std_keys[0])
            return None
        t = np.zeros((4, 4, 4))
        if any(have_std) or not ext:
            for n, k in enumerate(std_keys):
                if k not in values:
                    raise MissingKey(k)
                t[tensor_index(n, side)] = values[k]
        for k, v in ext.items():
            digits = k[len(prefix) + len("_TERM_"):]
            if len(digits) != 3 or not digits.isdigit() or max(digits) > "3":
                raise RpcFormatError(f"bad extended term key {k!r}")
            t[tuple(int(d) for d in digits)] = v
        return t

    for prefix, attr in FORWARD_BLOCKS:
        kwargs[attr] = block(prefix, "ground", True)
    inverse = {attr: block(prefix, "image", False) for prefix, attr in INVERSE_BLOCKS}
    present = [v is not None for v in inverse.values()]
    if any(present) and not all(present):
        missing = next(p for (p, a) in INVERSE_BLOCKS if inverse[a] is None)
        raise MissingKey(f"{missing}_COEFF_1")
    if all(present):
        kwargs.update(inverse)
    return RpcCamera(**kwargs)


def serialize_rpc(camera: RpcCamera) -> str:
    """Standard 20-term text; never emits the extended variant."""
    lines = [f"{key}: {getattr(camera, attr)!r}" for key, attr in OFFSET_SCALE_KEYS]
    blocks = [(p, a, "ground") for p, a in FORWARD_BLOCKS]
    if camera.has_inverse:
        blocks += [(p, a, "image") for p, a in INVERSE_BLOCKS]
    for prefix, attr, side in blocks:
        coeffs = tensor_to_coeffs(getattr(camera, attr), side)
        lines += [f"{prefix}_COEFF_{n + 1}: {float(c)!r}" for n, c in enumerate(coeffs)]
    return "\n".join(lines) + "\n"


def read_rpc_file(path) -> RpcCamera:
    with open(path, encoding="utf-8") as f:
        return parse_rpc(f.read())


def write_rpc_file(camera: RpcCamera, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_rpc(camera))
