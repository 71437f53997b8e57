import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from conftest import affine_rpc
from rpckit.errors import (
    DimMismatch,
    EmptyMask,
    ImageTooSmall,
    MissingTerm,
    NonPositiveHeight,
    OutOfBoundsPoint,
)
from rpckit.losses import (
    LossWeights,
    combine_losses,
    loss_reprojection,
    loss_rgb_l1,
    loss_sparse_points,
    loss_ssim,
    ssim,
)
from rpckit.scene import SparsePoints


def l1_double_loop(a, b):
    total = 0.0
    for r in range(a.shape[0]):
        for c in range(a.shape[1]):
            for k in range(a.shape[2]):
                total += abs(a[r, c, k] - b[r, c, k])
    return total / a.size


def ssim_scalar(x, y, win=11, sigma=1.5):
    """Window-by-window SSIM with an explicit 2-D Gaussian weight array."""
    x, y = x.mean(-1), y.mean(-1)
    ax = np.arange(win) - (win - 1) / 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for r in range(x.shape[0] - win + 1):
        for c in range(x.shape[1] - win + 1):
            px, py = x[r:r + win, c:c + win], y[r:r + win, c:c + win]
            mx, my = (g * px).sum(), (g * py).sum()
            vx = (g * (px - mx) ** 2).sum()
            vy = (g * (py - my) ** 2).sum()
            cxy = (g * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


# --- RGB L1 ---

def test_l1_examples():
    rng = np.random.default_rng(0)
    gt = rng.uniform(size=(6, 7, 3))
    assert loss_rgb_l1(gt, gt) == 0.0
    assert loss_rgb_l1(gt + 0.5, gt) == pytest.approx(0.5, abs=1e-15)
    pred = rng.uniform(size=(6, 7, 3))
    assert abs(loss_rgb_l1(pred, gt) - l1_double_loop(pred, gt)) < 1e-12


def test_l1_mask_and_errors():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 5, 5, 3))
    m = np.zeros((5, 5), bool)
    m[1:3, 2:4] = True
    assert loss_rgb_l1(a, b, m) == pytest.approx(np.abs(a - b)[m].mean())
    with pytest.raises(EmptyMask):
        loss_rgb_l1(a, b, np.zeros((5, 5), bool))
    with pytest.raises(DimMismatch):
        loss_rgb_l1(a, b[:4])


def test_l1_gradient():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(2, 4, 4, 3))
    _, g = loss_rgb_l1(a, b, return_grad=True)
    np.testing.assert_allclose(g, np.sign(a - b) / a.size)


# --- SSIM ---

def test_ssim_identity_and_inverse_checkerboard():
    img = np.indices((32, 32)).sum(0) % 2
    img = np.repeat(img[..., None], 3, axis=2).astype(float)
    assert loss_ssim(img, img) == pytest.approx(0.0, abs=1e-12)
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    assert ssim(1 - img, img) < -0.95
    assert loss_ssim(1 - img, img) > 1.95


def test_ssim_scalar_and_library_oracles():
    rng = np.random.default_rng(3)
    for _ in range(3):
        a, b = rng.uniform(size=(2, 32, 32, 3))
        b = 0.6 * a + 0.4 * b
        ours = ssim(a, b)
        assert abs(ours - ssim_scalar(a, b)) < 1e-6
        lib = structural_similarity(a.mean(-1), b.mean(-1), gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=1.0)
        assert abs(ours - lib) < 1e-6


def test_ssim_errors():
    with pytest.raises(ImageTooSmall):
        ssim(np.zeros((10, 40, 3)), np.zeros((10, 40, 3)))
    with pytest.raises(DimMismatch):
        ssim(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(2, 16, 18, 3))
    _, g = loss_ssim(a, b, return_grad=True)
    e = 1e-6
    for _ in range(25):
        idx = tuple(int(rng.integers(0, s)) for s in a.shape)
        ap, am = a.copy(), a.copy()
        ap[idx] += e
        am[idx] -= e
        num = (loss_ssim(ap, b) - loss_ssim(am, b)) / (2 * e)
        assert g[idx] == pytest.approx(num, rel=1e-5, abs=1e-9)


# --- reprojection ---

def test_reprojection_identity_equals_l1():
    _, cam = affine_rpc(0.0, (20, 22))
    rng = np.random.default_rng(5)
    img, gt = rng.uniform(size=(2, 20, 22, 3))
    out = loss_reprojection(rng.uniform(0, 20, (20, 22)), img, gt, cam, cam)
    assert out.coverage == pytest.approx(1.0)
    assert out.value == pytest.approx(loss_rgb_l1(img, gt), abs=1e-6)


def test_reprojection_prefers_oracle_height(small_scene):
    ref = small_scene.ref
    tgt = small_scene.train_targets[0]
    good = loss_reprojection(tgt.height, ref.image, tgt.image, ref.camera, tgt.camera)
    bad = loss_reprojection(tgt.height + 5.0, ref.image, tgt.image, ref.camera, tgt.camera)
    assert good.value < bad.value


def test_reprojection_no_overlap():
    _, a = affine_rpc(0.0, (16, 16))
    _, b = affine_rpc(0.0, (16, 16), anchor=(1.0, 1.01))
    with pytest.raises(EmptyMask):
        loss_reprojection(np.full((16, 16), 5.0), np.ones((16, 16, 3)), np.ones((16, 16, 3)), a, b)


def test_reprojection_gradients(small_scene):
    ref = small_scene.ref
    tgt = small_scene.train_targets[0]
    rng = np.random.default_rng(6)
    height = tgt.height + rng.normal(0, 1.0, tgt.height.shape)
    img = ref.image

    def value(hh, ii):
        return loss_reprojection(hh, ii, tgt.image, ref.camera, tgt.camera).value

    out = loss_reprojection(height, img, tgt.image, ref.camera, tgt.camera, return_grad=True)
    e = 1e-6
    checked = 0
    for r, c in zip(*np.nonzero(out.grad_height)):
        if checked == 15:
            break
        hp, hm = height.copy(), height.copy()
        hp[r, c] += e
        hm[r, c] -= e
        num = (value(hp, img) - value(hm, img)) / (2 * e)
        assert out.grad_height[r, c] == pytest.approx(num, rel=1e-4, abs=1e-9)
        checked += 1
    assert checked == 15
    for _ in range(15):
        idx = tuple(int(rng.integers(2, s - 2)) for s in img.shape[:2]) + (int(rng.integers(0, 3)),)
        ip, im = img.copy(), img.copy()
        ip[idx] += e
        im[idx] -= e
        num = (value(height, ip) - value(height, im)) / (2 * e)
        assert out.grad_image[idx] == pytest.approx(num, rel=1e-4, abs=1e-9)


# --- sparse points ---

def test_sparse_point_examples():
    height = np.full((5, 5), 10.0)
    pts = SparsePoints([0, 2, 4], [1, 3, 4], [10.0, 10.0, 10.0])
    assert loss_sparse_points(height, pts) == 0.0
    half = SparsePoints([0, 2, 4], [1, 3, 4], [5.0, 5.0, 5.0])
    assert loss_sparse_points(height, half) == pytest.approx(np.log(2.0), abs=1e-15)
    with pytest.raises(OutOfBoundsPoint) as exc:
        loss_sparse_points(height, SparsePoints([0, 5], [0, 0], [1.0, 1.0]))
    assert exc.value.index == 1
    with pytest.raises(NonPositiveHeight):
        loss_sparse_points(height, SparsePoints([0], [0], [-3.0]), offset=1.0)
    assert loss_sparse_points(np.zeros((2, 2)), SparsePoints([0], [0], [0.0]), offset=1.0) == 0.0


def test_sparse_point_gradient():
    rng = np.random.default_rng(7)
    height = rng.uniform(5, 15, (6, 6))
    pts = SparsePoints(rng.integers(0, 6, 10), rng.integers(0, 6, 10), rng.uniform(5, 15, 10))
    _, g = loss_sparse_points(height, pts, offset=1.0, return_grad=True)
    e = 1e-6
    for r in range(6):
        for c in range(6):
            hp, hm = height.copy(), height.copy()
            hp[r, c] += e
            hm[r, c] -= e
            num = (loss_sparse_points(hp, pts, 1.0) - loss_sparse_points(hm, pts, 1.0)) / (2 * e)
            assert g[r, c] == pytest.approx(num, abs=1e-7)


# --- combination ---

def test_combine_examples():
    zero = LossWeights(0, 0, 0, 0)
    terms = {"rgb_ref": 0.1, "ssim_ref": 0.2, "reproj": 0.3}
    assert combine_losses(terms, zero, "single", with_reproj=True)[0] == 0.0
    total, parts = combine_losses(terms, LossWeights(), "single", with_reproj=True)
    assert total == pytest.approx(0.6)
    assert set(parts) == {"rgb_ref", "ssim_ref", "reproj"}


def test_combine_multi_terms_and_errors():
    terms = {"rgb_ref": 1.0, "ssim_ref": 2.0, "rgb_tgt": 3.0, "ssim_tgt": 4.0, "reproj": 5.0,
             "pts_ref": 6.0, "pts_tgt": 7.0}
    w = LossWeights(rgb=1, ssim=10, reproj=100, pts=1000)
    total, parts = combine_losses(terms, w, "multi", with_reproj=True, with_pts=True)
    assert total == 1 + 20 + 3 + 40 + 500 + 6000 + 7000
    assert set(parts) == set(terms)
    with pytest.raises(MissingTerm):
        combine_losses({"rgb_ref": 1.0, "ssim_ref": 1.0}, w, "multi")
    with pytest.raises(ValueError):
        combine_losses(terms, w, "triple")
    with pytest.raises(ValueError):
        LossWeights(rgb=-1)


@settings(max_examples=50, deadline=None)
@given(t=st.lists(st.floats(0, 10), min_size=4, max_size=4), k=st.floats(0, 5),
       w=st.lists(st.floats(0, 3), min_size=2, max_size=2))
def test_combine_is_linear(t, k, w):
    terms = dict(zip(("rgb_ref", "ssim_ref", "rgb_tgt", "ssim_tgt"), t))
    weights = LossWeights(rgb=w[0], ssim=w[1])
    base, _ = combine_losses(terms, weights, "multi")
    scaled, _ = combine_losses({n: k * v for n, v in terms.items()}, weights, "multi")
    assert scaled == pytest.approx(k * base, rel=1e-12, abs=1e-12)
    doubled, _ = combine_losses(terms, LossWeights(rgb=2 * w[0], ssim=2 * w[1]), "multi")
    assert doubled == pytest.approx(2 * base, rel=1e-12, abs=1e-12)
