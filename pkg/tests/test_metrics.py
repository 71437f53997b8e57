import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpckit.errors import DimMismatch, EmptyMask
from rpckit.metrics import DEFAULT_THRESHOLDS, MetricReport, compute_metrics, psnr, threshold_key


def sorted_median(values):
    v = sorted(values)
    n = len(v)
    return v[n // 2] if n % 2 else 0.5 * (v[n // 2 - 1] + v[n // 2])


def test_constant_offset():
    rng = np.random.default_rng(0)
    gt = rng.uniform(90, 110, (20, 20))
    r = compute_metrics(pred_height=gt + 1.0, gt_height=gt)
    assert r.mae == pytest.approx(1.0, abs=1e-12)
    assert r.me == pytest.approx(1.0, abs=1e-12)
    assert r.pct_below[2.5] == 100.0
    assert r.valid_pixel_count == 400


def test_identical_images():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(16, 16, 3))
    r = compute_metrics(img, img)
    assert r.ssim == pytest.approx(1.0, abs=1e-12)
    assert r.psnr == math.inf
    assert r.to_dict()["psnr"] == "inf"


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(1, 60))
def test_median_matches_sort_oracle(seed, n):
    rng = np.random.default_rng(seed)
    gt = rng.normal(0, 5, n).reshape(1, n)
    pred = gt + rng.normal(0, 3, n)
    r = compute_metrics(pred_height=pred, gt_height=gt)
    assert r.me == pytest.approx(sorted_median(np.abs(pred - gt).ravel().tolist()), abs=1e-12)
    pct = [r.pct_below[t] for t in sorted(r.pct_below)]
    assert all(a <= b for a, b in zip(pct, pct[1:]))
    assert r.mae >= 0


def test_no_data_excluded():
    gt = np.full((4, 4), 10.0)
    pred = gt.copy()
    pred[0, 0] = 1000.0
    gt_nan = gt.copy()
    gt_nan[0, 0] = np.nan
    assert compute_metrics(pred_height=pred, gt_height=gt_nan).mae == 0.0
    mask = np.ones((4, 4), bool)
    mask[0, 0] = False
    r = compute_metrics(pred_height=pred, gt_height=gt, gt_mask=mask)
    assert r.mae == 0.0 and r.valid_pixel_count == 15
    with pytest.raises(EmptyMask):
        compute_metrics(pred_height=pred, gt_height=gt, gt_mask=np.zeros((4, 4), bool))
    with pytest.raises(DimMismatch):
        compute_metrics(pred_height=pred[:3], gt_height=gt)


def test_threshold_is_strict():
    gt = np.zeros((1, 4))
    pred = np.array([[0.0, 2.5, 2.4, 8.0]])
    r = compute_metrics(pred_height=pred, gt_height=gt)
    assert r.pct_below[2.5] == 50.0
    assert r.pct_below[7.5] == 75.0


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(2)
    img = rng.uniform(0.2, 0.8, (24, 24, 3))
    noise = rng.uniform(-1, 1, img.shape)
    values = [psnr(img + a * noise, img) for a in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert psnr(img + 0.1, img) == pytest.approx(20.0)


def test_report_json_keys():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(12, 12, 3))
    h = rng.uniform(size=(12, 12))
    d = json.loads(compute_metrics(img, img * 0.9, h, h + 3.0).to_json())
    expected = {"psnr", "ssim", "lpips", "mae", "me", "valid_pixel_count"} | {threshold_key(t) for t in DEFAULT_THRESHOLDS}
    assert set(d) == expected
    assert d["lpips"] == "n/a"
    assert threshold_key(2.5) == "pct_below_2_5" and threshold_key(5.0) == "pct_below_5"
    back = MetricReport.from_dict(d)
    assert back.pct_below == {2.5: 0.0, 5.0: 100.0, 7.5: 100.0}


def test_default_thresholds_follow_tables():
    assert DEFAULT_THRESHOLDS == (2.5, 5.0, 7.5)
