"""Training losses with analytic gradients.

Every loss returns a scalar; with ``return_grad=True`` it also returns the
gradient with respect to its differentiable inputs so the scene fitter can
chain them without an autodiff framework.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from rpckit.errors import (
    DimMismatch,
    EmptyMask,
    ImageTooSmall,
    MissingTerm,
    NonPositiveHeight,
    OutOfBoundsPoint,
)
from rpckit.frustum_warp import BilinearTaps, reproject_via_altitude, transport_map

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclasses.dataclass
class LossWeights:
    rgb: float = 1.0
    ssim: float = 1.0
    reproj: float = 1.0
    pts: float = 1.0

    def __post_init__(self):
        for name in ("rgb", "ssim", "reproj", "pts"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def _check_same(a, b):
    if np.shape(a) != np.shape(b):
        raise DimMismatch(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def loss_rgb_l1(pred, gt, mask=None, return_grad: bool = False):
    """Mean absolute difference over unmasked pixels and channels."""
    pred = np.asarray(pred, float)
    gt = np.asarray(gt, float)
    _check_same(pred, gt)
    m = np.ones(pred.shape[:2], bool) if mask is None else np.asarray(mask, bool)
    if m.shape != pred.shape[:2]:
        raise DimMismatch(f"mask {m.shape} does not match raster {pred.shape[:2]}")
    channels = pred.shape[2] if pred.ndim == 3 else 1
    count = int(m.sum()) * channels
    if count == 0:
        raise EmptyMask("no valid pixels for L1 loss")
    mm = m[..., None] if pred.ndim == 3 else m
    diff = pred - gt
    value = float(np.sum(np.abs(diff) * mm) / count)
    if not return_grad:
        return value
    return value, np.sign(diff) * mm / count


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


_KERNEL = gaussian_kernel()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian correlation keeping only full windows."""
    rows = sliding_window_view(img, SSIM_WINDOW, axis=0) @ _KERNEL
    return sliding_window_view(rows, SSIM_WINDOW, axis=1) @ _KERNEL


def _filter_valid_adjoint(grad: np.ndarray) -> np.ndarray:
    pad = SSIM_WINDOW - 1
    g = np.pad(grad, pad)
    rows = sliding_window_view(g, SSIM_WINDOW, axis=0) @ _KERNEL[::-1]
    return sliding_window_view(rows, SSIM_WINDOW, axis=1) @ _KERNEL[::-1]


def to_gray(img):
    img = np.asarray(img, float)
    return img.mean(axis=-1) if img.ndim == 3 else img


def _ssim_parts(x, y):
    if min(x.shape) < SSIM_WINDOW:
        raise ImageTooSmall(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {x.shape}")
    mx, my = _filter_valid(x), _filter_valid(y)
    vx = _filter_valid(x * x) - mx * mx
    vy = _filter_valid(y * y) - my * my
    cxy = _filter_valid(x * y) - mx * my
    n1 = 2 * mx * my + SSIM_C1
    n2 = 2 * cxy + SSIM_C2
    d1 = mx * mx + my * my + SSIM_C1
    d2 = vx + vy + SSIM_C2
    s = n1 * n2 / (d1 * d2)
    return s, (mx, my, n1, n2, d1, d2)


def ssim(pred, gt, return_grad: bool = False):
    """Mean SSIM over valid 11x11 Gaussian windows of the channel-mean images.

    With ``return_grad`` the gradient is with respect to ``pred`` in its
    original (possibly 3-channel) shape.
    """
    pred = np.asarray(pred, float)
    gt = np.asarray(gt, float)
    _check_same(pred, gt)
    x, y = to_gray(pred), to_gray(gt)
    s, (mx, my, n1, n2, d1, d2) = _ssim_parts(x, y)
    value = float(s.mean())
    if not return_grad:
        return value
    scale = 1.0 / s.size
    d_mx = (2 * my * n2 / (d1 * d2) - s * 2 * mx / d1) * scale
    d_vx = -s / d2 * scale
    d_cxy = 2 * n1 / (d1 * d2) * scale
    # v_x = E[x^2] - mx^2, c_xy = E[xy] - mx my
    g_mean = d_mx - 2 * mx * d_vx - my * d_cxy
    gx = _filter_valid_adjoint(g_mean) + 2 * x * _filter_valid_adjoint(d_vx) + y * _filter_valid_adjoint(d_cxy)
    if pred.ndim == 3:
        gx = np.repeat(gx[..., None] / pred.shape[2], pred.shape[2], axis=2)
    return value, gx


def loss_ssim(pred, gt, return_grad: bool = False):
    """1 - SSIM."""
    if not return_grad:
        return 1.0 - ssim(pred, gt)
    value, grad = ssim(pred, gt, return_grad=True)
    return 1.0 - value, -grad


@dataclasses.dataclass(eq=False)
class ReprojectionLoss:
    value: float
    coverage: float
    grad_height: Optional[np.ndarray] = None  # (H, W) destination frame
    grad_image: Optional[np.ndarray] = None  # (H, W, C) source frame


def loss_reprojection(rendered_height, image, gt_view, src_cam, dst_cam, height_mask=None,
                      return_grad: bool = False) -> ReprojectionLoss:
    """L1 between ``image`` carried into the ``gt_view`` frame and ``gt_view``.

    ``rendered_height`` is the altitude map of the destination (``gt_view``)
    frame; for every destination pixel the source image is sampled where that
    altitude projects in ``src_cam``.  Gradients flow into the altitude map
    (through the sampling position) and into the source image (through the
    sampled values).
    """
    gt_view = np.asarray(gt_view, float)
    rendered_height = np.asarray(rendered_height, float)
    if rendered_height.shape != gt_view.shape[:2]:
        raise DimMismatch("rendered height must match the ground-truth view dims")
    tr = reproject_via_altitude(image, rendered_height, src_cam, dst_cam, height_mask=height_mask)
    if not tr.mask.any():
        raise EmptyMask("reprojection has no overlap between the views")
    if not return_grad:
        value = loss_rgb_l1(tr.image, gt_view, mask=tr.mask)
        return ReprojectionLoss(value, tr.coverage)
    value, g_out = loss_rgb_l1(tr.image, gt_view, mask=tr.mask, return_grad=True)
    image = np.asarray(image, float)
    hs, ws = image.shape[:2]
    flat = image.reshape(hs * ws, -1)
    x, y = tr.coords[..., 0], tr.coords[..., 1]
    taps = BilinearTaps.build(x, y, (hs, ws))
    h, w = rendered_height.shape
    line, samp = np.mgrid[0:h, 0:w].astype(float)
    _, _, dx_dh, dy_dh = transport_map(src_cam, dst_cam, samp, line, tr.heights, with_grad=True)
    di_dx, di_dy = taps.coord_gradient(flat)
    g_out = g_out.reshape(h, w, -1)
    grad_height = np.sum(g_out * (di_dx * dx_dh[..., None] + di_dy * dy_dh[..., None]), axis=-1)
    grad_height *= tr.mask
    grad_image = taps.scatter(g_out, channels=flat.shape[1]).reshape(image.shape)
    return ReprojectionLoss(value, tr.coverage, grad_height, grad_image)


def loss_sparse_points(height, pts, offset: float = 0.0, return_grad: bool = False):
    """Mean |ln a - ln H(r, c)| over sparse altitude samples.

    ``offset`` shifts both the rendered and the sample altitudes into the
    positive domain used for height sampling.
    """
    height = np.asarray(height, float)
    h, w = height.shape
    n = len(pts)
    if n == 0:
        raise EmptyMask("no sparse points")
    rows, cols = pts.rows, pts.cols
    bad = (rows < 0) | (rows >= h) | (cols < 0) | (cols >= w)
    if bad.any():
        i = int(np.argmax(bad))
        raise OutOfBoundsPoint(i, int(rows[i]), int(cols[i]))
    rendered = height[rows, cols] + offset
    alt = pts.altitudes + offset
    for arr in (rendered, alt):
        nonpos = ~(arr > 0)
        if nonpos.any():
            i = int(np.argmax(nonpos))
            raise NonPositiveHeight(i, float(arr[i]))
    diff = np.log(rendered) - np.log(alt)
    value = float(np.mean(np.abs(diff)))
    if not return_grad:
        return value
    grad = np.zeros_like(height)
    np.add.at(grad, (rows, cols), np.sign(diff) / rendered / n)
    return value, grad


SINGLE_TERMS = ("rgb_ref", "ssim_ref")
MULTI_TERMS = ("rgb_ref", "ssim_ref", "rgb_tgt", "ssim_tgt")


def combine_losses(terms: dict, weights: LossWeights, mode: str = "single", with_reproj: bool = False,
                   with_pts: bool = False):
    """Weighted total loss and the per-term weighted contributions.

    ``single``: rgb_ref, ssim_ref [+ reproj] [+ pts_ref].
    ``multi``:  rgb_ref + rgb_tgt, ssim_ref + ssim_tgt [+ reproj] [+ pts_ref (+ pts_tgt)].
    """
    if mode not in ("single", "multi"):
        raise ValueError(f"mode must be 'single' or 'multi', got {mode!r}")
    needed = list(SINGLE_TERMS if mode == "single" else MULTI_TERMS)
    if with_reproj:
        needed.append("reproj")
    if with_pts:
        needed.append("pts_ref")
    for name in needed:
        if name not in terms:
            raise MissingTerm(name)
    lam = {"rgb": weights.rgb, "ssim": weights.ssim, "reproj": weights.reproj, "pts": weights.pts}
    breakdown = {}
    for name in needed:
        breakdown[name] = lam[name.split("_")[0]] * terms[name]
    if mode == "multi" and with_pts and "pts_tgt" in terms:
        breakdown["pts_tgt"] = weights.pts * terms["pts_tgt"]
    return float(sum(breakdown.values())), breakdown
