"""Explicit MPI fitting by gradient descent with hand-written gradients.

The frustum of the reference view is parameterized directly: densities go
through a softplus and colours through a sigmoid, so every iterate is a valid
MPI.  Gradients are chained by hand through rendering, frustum warping and
the losses, then fed to Adam.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from typing import Optional

import numpy as np
from scipy.special import expit

from rpckit.errors import BadConfig, NonFiniteLoss, ShapeMismatch
from rpckit.frustum_warp import BilinearTaps, build_warp_grid, reproject_via_altitude, warp_planes, warp_planes_backward
from rpckit.losses import (
    LossWeights,
    combine_losses,
    loss_reprojection,
    loss_rgb_l1,
    loss_sparse_points,
    loss_ssim,
)
from rpckit.metrics import DEFAULT_THRESHOLDS, compute_metrics
from rpckit.mpi_field import HeightSampling, MpiFrustum, render_planar, render_planar_backward, sample_heights
from rpckit.scene import Scene, SparsePoints

COLOR_EPS = 1e-3


@dataclasses.dataclass
class FitConfig:
    n_iters: int = 500
    learning_rate: float = 0.05
    sigma_lr_scale: float = 1.0
    color_lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mode: str = "single"  # single | multi
    path: str = "bf"  # bf: warp the frustum, bp: carry the rendered image through altitude
    reproj: bool = False
    pts: bool = False
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    seed: int = 0
    n_planes: int = 16
    n_points: int = 100
    snapshot_every: int = 0  # 0: final snapshot only
    lr_milestones: tuple = ()
    lr_gamma: float = 0.1
    thresholds: tuple = DEFAULT_THRESHOLDS
    far_background: bool = True  # leftover transmittance ends at the lowest plane

    def validate(self) -> None:
        for name in ("learning_rate", "sigma_lr_scale", "color_lr_scale"):
            if not getattr(self, name) > 0:
                raise BadConfig(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 < b < 1:
                raise BadConfig(f"{name} must lie in (0, 1), got {b}")
        if self.n_iters < 0:
            raise BadConfig("n_iters must be >= 0")
        if self.n_planes < 2:
            raise BadConfig("n_planes must be >= 2")
        if self.mode not in ("single", "multi"):
            raise BadConfig(f"mode must be single or multi, got {self.mode!r}")
        if self.path not in ("bf", "bp"):
            raise BadConfig(f"path must be bf or bp, got {self.path!r}")
        if self.snapshot_every < 0:
            raise BadConfig("snapshot_every must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["thresholds"] = list(self.thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BadConfig(f"unknown config keys: {sorted(unknown)}")
        if "weights" in d and isinstance(d["weights"], dict):
            try:
                d["weights"] = LossWeights(**d["weights"])
            except (TypeError, ValueError) as exc:
                raise BadConfig(str(exc)) from exc
        for key in ("lr_milestones", "thresholds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclasses.dataclass(eq=False)
class FitState:
    sigma_pre: np.ndarray  # (N, H, W)
    color_pre: np.ndarray  # (N, H, W, 3)
    m: dict
    v: dict
    sampling: HeightSampling
    iteration: int = 0
    history: list = dataclasses.field(default_factory=list)

    def params(self) -> dict:
        return {"sigma_pre": self.sigma_pre, "color_pre": self.color_pre}

    def copy(self) -> "FitState":
        return FitState(self.sigma_pre.copy(), self.color_pre.copy(),
                        {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()},
                        self.sampling, self.iteration, [dict(h) for h in self.history])


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return expit(x)


def logit(p):
    return np.log(p) - np.log1p(-p)


def activations(state: FitState):
    return softplus(state.sigma_pre), sigmoid(state.color_pre)


def to_mpi(state: FitState, camera=None) -> MpiFrustum:
    sigmas, colors = activations(state)
    return MpiFrustum(colors, sigmas, state.sampling, camera)


def scene_sampling(scene: Scene, n_planes: int) -> HeightSampling:
    h_near, h_far = scene.height_range
    return sample_heights(h_near, h_far, n_planes)


def init_state(scene: Scene, cfg: FitConfig) -> FitState:
    """Uniform per-plane opacity 1/N and colours that reproduce the reference image.

    With opacity 1/N per plane the accumulated weight is 1 - (1 - 1/N)^N
    (about 0.64 for N = 16), so colours are set to ref / sum(w) and the
    initial render matches the reference up to clipping.
    """
    cfg.validate()
    sampling = scene_sampling(scene, cfg.n_planes)
    n = cfg.n_planes
    h, w = scene.dims
    sigma0 = -math.log1p(-1.0 / n) / sampling.spacings
    sigma_pre = np.broadcast_to(softplus_inv(sigma0)[:, None, None], (n, h, w)).copy()
    total_w = 1.0 - (1.0 - 1.0 / n) ** n
    color = np.clip(scene.ref.image / total_w, COLOR_EPS, 1.0 - COLOR_EPS)
    color_pre = np.broadcast_to(logit(color)[None], (n, h, w, 3)).copy()
    zeros = {"sigma_pre": np.zeros_like(sigma_pre), "color_pre": np.zeros_like(color_pre)}
    return FitState(sigma_pre, color_pre, zeros, {k: a.copy() for k, a in zeros.items()}, sampling)


def _points(scene: Scene, cfg: FitConfig):
    pts = scene.sparse_points
    if pts is None or len(pts) == 0:
        raise BadConfig("pts loss requested but the scene has no sparse points")
    if cfg.n_points < len(pts):
        rng = np.random.default_rng(cfg.seed)
        keep = np.sort(rng.choice(len(pts), cfg.n_points, replace=False))
        pts = SparsePoints(pts.rows[keep], pts.cols[keep], pts.altitudes[keep])
    return pts


def _photo_terms(pred, gt, tag, terms, grads, need_grad):
    if need_grad:
        terms["rgb_" + tag], g1 = loss_rgb_l1(pred, gt, return_grad=True)
        terms["ssim_" + tag], g2 = loss_ssim(pred, gt, return_grad=True)
        grads[tag] = (g1, g2)
    else:
        terms["rgb_" + tag] = loss_rgb_l1(pred, gt)
        terms["ssim_" + tag] = loss_ssim(pred, gt)


def background(sampling: HeightSampling, cfg: FitConfig):
    return float(sampling.heights[-1]) if cfg.far_background else None


def render_frustum(colors, sigmas, sampling, cfg):
    return render_planar(MpiFrustum(colors, sigmas, sampling), background(sampling, cfg))


def _backward(sigmas, colors, sampling, cfg, grad_image=None, grad_height=None):
    bg = background(sampling, cfg)
    heights = sampling.heights if bg is None else sampling.heights - bg
    return render_planar_backward(sigmas, colors, heights, sampling.spacings, grad_image, grad_height)


def render_target(sigmas, colors, sampling, scene: Scene, view, cfg: FitConfig, ref_render=None):
    """Novel view of ``view`` from the reference frustum; returns (image, height, aux)."""
    ref = scene.ref
    if cfg.path == "bf":
        grid = build_warp_grid(ref.camera, view.camera, sampling, view.image.shape[:2], scene.dims)
        wc, ws = warp_planes(colors, sigmas, grid)
        image, height, _ = render_frustum(wc, ws, sampling, cfg)
        return image, height, (grid, wc, ws)
    if ref_render is None:
        ref_image, ref_height, _ = render_frustum(colors, sigmas, sampling, cfg)
    else:
        ref_image, ref_height = ref_render
    tr = reproject_via_altitude(ref_image, ref_height, ref.camera, view.camera, height_in="src")
    return tr.image, np.where(tr.mask, tr.heights, np.nan), tr


def forward_backward(state: FitState, scene: Scene, cfg: FitConfig, need_grad: bool = True):
    """Weighted loss breakdown (with ``total``) and gradients w.r.t. the pre-activations."""
    sigmas, colors = activations(state)
    sampling = state.sampling
    ref = scene.ref
    ref_image, ref_height, _ = render_frustum(colors, sigmas, sampling, cfg)
    terms, pgrads = {}, {}
    _photo_terms(ref_image, ref.image, "ref", terms, pgrads, need_grad)
    lam = cfg.weights
    g_img = lam.rgb * pgrads["ref"][0] + lam.ssim * pgrads["ref"][1] if need_grad else None
    g_hei = np.zeros_like(ref_height) if need_grad else None
    g_sig = np.zeros_like(sigmas) if need_grad else None
    g_col = np.zeros_like(colors) if need_grad else None

    targets = scene.train_targets
    if cfg.reproj:
        vals = []
        for view in targets:
            r = loss_reprojection(ref_height, view.image, ref.image, view.camera, ref.camera, return_grad=need_grad)
            vals.append(r.value)
            if need_grad:
                g_hei += lam.reproj * r.grad_height / len(targets)
        terms["reproj"] = float(np.mean(vals))
    if cfg.pts:
        pts = _points(scene, cfg)
        if need_grad:
            terms["pts_ref"], gp = loss_sparse_points(ref_height, pts, sampling.offset, return_grad=True)
            g_hei += lam.pts * gp
        else:
            terms["pts_ref"] = loss_sparse_points(ref_height, pts, sampling.offset)
    if cfg.mode == "multi":
        if not targets:
            raise BadConfig("multi mode needs at least one training target view")
        tgt_terms = []
        for view in targets:
            t_terms, t_grads = {}, {}
            image, _, aux = render_target(sigmas, colors, sampling, scene, view, cfg, (ref_image, ref_height))
            _photo_terms(image, view.image, "tgt", t_terms, t_grads, need_grad)
            tgt_terms.append(t_terms)
            if not need_grad:
                continue
            gi = (lam.rgb * t_grads["tgt"][0] + lam.ssim * t_grads["tgt"][1]) / len(targets)
            if cfg.path == "bf":
                grid, wc, ws = aux
                gs_w, gc_w = _backward(ws, wc, sampling, cfg, grad_image=gi)
                gc, gs = warp_planes_backward(grid, gc_w, gs_w)
                g_col += gc
                g_sig += gs
            else:
                tr = aux
                h, w = scene.dims
                taps = BilinearTaps.build(tr.coords[..., 0], tr.coords[..., 1], (h, w))
                g_img += taps.scatter(gi * tr.mask[..., None], channels=3).reshape(h, w, 3)
        for key in ("rgb_tgt", "ssim_tgt"):
            terms[key] = float(np.mean([t[key] for t in tgt_terms]))

    for name, value in terms.items():
        if not math.isfinite(value):
            raise NonFiniteLoss(name, value, state.iteration)
    total, breakdown = combine_losses(terms, lam, cfg.mode, cfg.reproj, cfg.pts)
    breakdown = dict(breakdown, total=total)
    if not need_grad:
        return breakdown, None
    gs, gc = _backward(sigmas, colors, sampling, cfg, g_img, g_hei)
    g_sig += gs
    g_col += gc
    grads = {
        "sigma_pre": g_sig * sigmoid(state.sigma_pre),
        "color_pre": g_col * colors * (1.0 - colors),
    }
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss("grad_" + name, float("nan"), state.iteration)
    return breakdown, grads


def total_loss(state: FitState, scene: Scene, cfg: FitConfig) -> float:
    return forward_backward(state, scene, cfg, need_grad=False)[0]["total"]


def learning_rate_at(cfg: FitConfig, iteration: int) -> float:
    passed = sum(1 for m in cfg.lr_milestones if iteration >= m)
    return cfg.learning_rate * cfg.lr_gamma ** passed


def adam_step(state: FitState, grads: dict, cfg: FitConfig) -> FitState:
    """One bias-corrected Adam update, in place; returns ``state``."""
    params = state.params()
    for name, p in params.items():
        if name not in grads or np.shape(grads[name]) != p.shape:
            raise ShapeMismatch(f"gradient for {name} must have shape {p.shape}")
    t = state.iteration + 1
    lr = learning_rate_at(cfg, state.iteration)
    b1, b2 = cfg.beta1, cfg.beta2
    scale = {"sigma_pre": cfg.sigma_lr_scale, "color_pre": cfg.color_lr_scale}
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= lr * scale[name] * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    state.iteration = t
    return state


def gradient_check(state: FitState, scene: Scene, cfg: FitConfig, n_coords: int = 200, eps: float = 1e-4,
                   seed: int = 0):
    """Central differences at random pre-activation coordinates.

    Returns a list of ``(param, index, analytic, numeric, rel_error)``.
    """
    _, grads = forward_backward(state, scene, cfg)
    rng = np.random.default_rng(seed)
    out = []
    names = ["sigma_pre", "color_pre"]
    for k in range(n_coords):
        name = names[k % 2]
        arr = getattr(state, name)
        idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + eps
        lp = total_loss(state, scene, cfg)
        arr[idx] = orig - eps
        lm = total_loss(state, scene, cfg)
        arr[idx] = orig
        num = (lp - lm) / (2 * eps)
        ana = float(grads[name][idx])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        out.append((name, idx, ana, num, rel))
    return out


@dataclasses.dataclass
class FitReport:
    config: dict
    loss_curves: dict
    snapshots: list
    timing: list = dataclasses.field(default_factory=list)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {"config": self.config, "loss_curves": self.loss_curves, "snapshots": self.snapshots}
        if include_timing:
            d["timing_s_per_iter"] = self.timing
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    @property
    def final(self) -> dict:
        return self.snapshots[-1]


def evaluate(state: FitState, scene: Scene, cfg: FitConfig) -> dict:
    """Metrics of the current frustum against whatever truth the scene carries."""
    sigmas, colors = activations(state)
    ref = scene.ref
    ref_image, ref_height, _ = render_frustum(colors, sigmas, state.sampling, cfg)
    out = {"iteration": state.iteration}
    out["ref"] = compute_metrics(ref_image, ref.image, ref_height if ref.height is not None else None,
                                 ref.height, ref.height_mask, cfg.thresholds).to_dict()
    for view in scene.views:
        if view.role != "tgt":
            continue
        image, _, _ = render_target(sigmas, colors, state.sampling, scene, view, cfg, (ref_image, ref_height))
        out[view.name] = compute_metrics(image, view.image).to_dict()
    return out


def fit_scene(scene: Scene, cfg: FitConfig, state: Optional[FitState] = None):
    """Optimize the reference frustum; returns ``(MpiFrustum, FitReport, FitState)``.

    On a non-finite loss the exception carries the state at failure as
    ``exc.state``.
    """
    cfg.validate()
    if cfg.mode == "multi" and len(scene.views) < 2:
        raise BadConfig("multi mode needs at least two views")
    state = init_state(scene, cfg) if state is None else state
    curves: dict = {}
    snapshots = []
    timing = []
    for it in range(cfg.n_iters):
        t0 = time.perf_counter()
        try:
            breakdown, grads = forward_backward(state, scene, cfg)
        except NonFiniteLoss as exc:
            exc.state = state
            raise
        for key, value in breakdown.items():
            curves.setdefault(key, []).append(value)
        state.history.append(breakdown)
        adam_step(state, grads, cfg)
        timing.append(time.perf_counter() - t0)
        if cfg.snapshot_every and state.iteration % cfg.snapshot_every == 0 and state.iteration < cfg.n_iters:
            snapshots.append(evaluate(state, scene, cfg))
    snapshots.append(evaluate(state, scene, cfg))
    report = FitReport(cfg.to_dict(), curves, snapshots, timing)
    return to_mpi(state, scene.ref.camera), report, state
