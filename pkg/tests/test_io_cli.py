import json

import numpy as np
import pytest

from conftest import affine_rpc
from rpckit.cli import main
from rpckit.errors import BadConfig, CorruptFile, UnsupportedFormat
from rpckit.io import (
    Raster,
    load_raster,
    load_scene,
    read_points_csv,
    read_sparse_points,
    save_raster,
    write_scene_bundle,
    write_sparse_points,
)
from rpckit.mpi_field import MpiFrustum, read_mpi, sample_heights, write_mpi
from rpckit.rpc_camera import read_rpc_file, write_rpc_file
from rpckit.scene import SparsePoints
from rpckit.synthetic import build_scene


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    scene = build_scene("plateau", seed=1, dims=(20, 20), n_points=25)
    return scene, write_scene_bundle(scene, out)


def test_pfm_is_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    for shape in ((7, 9), (5, 6, 3)):
        data = rng.normal(size=shape).astype(np.float32)
        save_raster(Raster(data), tmp_path / "a.pfm")
        back = load_raster(tmp_path / "a.pfm")
        assert back.data.reshape(shape).tobytes() == data.tobytes()


def test_pfm_no_data_becomes_mask(tmp_path):
    data = np.ones((4, 5), np.float32)
    mask = np.ones((4, 5), bool)
    mask[1, 2] = False
    save_raster(Raster(data, mask, "m"), tmp_path / "h.pfm")
    back = load_raster(tmp_path / "h.pfm")
    np.testing.assert_array_equal(back.mask, mask)
    assert np.isnan(back.data[1, 2, 0])


def test_big_endian_pfm(tmp_path):
    data = np.arange(6, dtype=np.float32).reshape(2, 3)
    (tmp_path / "b.pfm").write_bytes(b"Pf\n3 2\n1.0\n" + data[::-1].astype(">f4").tobytes())
    np.testing.assert_array_equal(load_raster(tmp_path / "b.pfm").array(), data)


def test_png_quantization(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.uniform(size=(8, 9, 3))
    save_raster(Raster(data), tmp_path / "a.png")
    back = load_raster(tmp_path / "a.png")
    assert np.max(np.abs(back.array() - data)) <= 1 / 510 + 1e-7


def test_raster_errors(tmp_path):
    (tmp_path / "bad.pfm").write_bytes(b"P7\n1 1\n-1.0\n\0\0\0\0")
    with pytest.raises(CorruptFile):
        load_raster(tmp_path / "bad.pfm")
    (tmp_path / "short.pfm").write_bytes(b"Pf\n2 2\n-1.0\n\0\0\0\0")
    with pytest.raises(CorruptFile):
        load_raster(tmp_path / "short.pfm")
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(CorruptFile):
        load_raster(tmp_path / "bad.png")
    with pytest.raises(UnsupportedFormat):
        save_raster(Raster(np.zeros((2, 2))), tmp_path / "a.tif")
    with pytest.raises(FileNotFoundError):
        load_raster(tmp_path / "missing.png")


def test_points_csv(tmp_path):
    pts = SparsePoints([1, 2], [3, 4], [100.25, 101.5])
    write_sparse_points(pts, tmp_path / "p.csv")
    back = read_sparse_points(tmp_path / "p.csv")
    assert back.to_list() == pts.to_list()
    (tmp_path / "q.csv").write_text("row,col\n1,2\n")
    with pytest.raises(CorruptFile):
        read_sparse_points(tmp_path / "q.csv")
    (tmp_path / "r.csv").write_text("row,col,altitude\n1,x,3\n")
    with pytest.raises(CorruptFile):
        read_sparse_points(tmp_path / "r.csv")


def test_scene_bundle_round_trip(bundle):
    scene, path = bundle
    back, config = load_scene(path)
    assert config == {}
    assert back.height_range == scene.height_range
    assert [v.name for v in back.views] == [v.name for v in scene.views]
    assert back.views[2].holdout
    for a, b in zip(scene.views, back.views):
        assert np.max(np.abs(a.image - b.image)) <= 1 / 510 + 1e-7
        assert a.camera.samp_num.tobytes() == b.camera.samp_num.tobytes()
        np.testing.assert_array_equal(a.height.astype(np.float32), b.height)
    assert back.sparse_points.to_list() == scene.sparse_points.to_list()


def test_manifest_errors(tmp_path, bundle):
    _, path = bundle
    manifest = json.loads(path.read_text())
    for mutate in (lambda m: m.pop("views"),
                   lambda m: m["views"][1].update(role="ref"),
                   lambda m: m["views"][0].update(image="nope.png"),
                   lambda m: m.update(dims=[5, 5])):
        m = json.loads(json.dumps(manifest))
        mutate(m)
        bad = path.parent / "bad.json"
        bad.write_text(json.dumps(m))
        with pytest.raises(BadConfig):
            load_scene(bad)


def test_mpi_render_and_warp_commands(tmp_path, capsys):
    _, a = affine_rpc(0.0, (16, 16))
    _, b = affine_rpc(0.5, (16, 16))
    write_rpc_file(a, tmp_path / "a.rpc")
    write_rpc_file(b, tmp_path / "b.rpc")
    rng = np.random.default_rng(2)
    mpi = MpiFrustum(rng.uniform(size=(4, 16, 16, 3)), rng.exponential(0.5, (4, 16, 16)),
                     sample_heights(20.0, 0.0, 4))
    write_mpi(mpi, tmp_path / "m.mpi")
    assert main(["render", "--mpi", str(tmp_path / "m.mpi"), "--out-img", str(tmp_path / "r.png"),
                 "--out-height", str(tmp_path / "r.pfm")]) == 0
    assert load_raster(tmp_path / "r.pfm").channels == 1
    assert main(["warp", "--mpi", str(tmp_path / "m.mpi"), "--ref-rpc", str(tmp_path / "a.rpc"),
                 "--tgt-rpc", str(tmp_path / "a.rpc"), "--out", str(tmp_path / "w.mpi")]) == 0
    w = read_mpi(tmp_path / "w.mpi")
    np.testing.assert_allclose(w.colors[:, 1:-1, 1:-1], mpi.colors[:, 1:-1, 1:-1].astype(np.float32), atol=1e-4)


def test_rpc_commands(tmp_path, capsys):
    _, a = affine_rpc(0.5, (16, 16))
    write_rpc_file(a, tmp_path / "a.rpc")
    assert main(["rpc", "fit-inverse", "--rpc", str(tmp_path / "a.rpc"), "--grid", "10x10x5",
                 "--out", str(tmp_path / "inv.rpc")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["inverse_residual_px"] < 1e-6
    assert read_rpc_file(tmp_path / "inv.rpc").has_inverse
    (tmp_path / "g.csv").write_text("lat,lon,hei\n%r,%r,5.0\n" % (a.lat_off, a.lon_off))
    assert main(["rpc", "project", "--rpc", str(tmp_path / "a.rpc"), "--points", str(tmp_path / "g.csv")]) == 0
    out = capsys.readouterr().out
    (tmp_path / "p.csv").write_text(out)
    samp, _, hei = read_points_csv(tmp_path / "p.csv", ("samp", "line", "hei"))
    assert hei[0] == 5.0 and np.isfinite(samp[0])
    assert main(["rpc", "localize", "--rpc", str(tmp_path / "inv.rpc"), "--points", str(tmp_path / "p.csv")]) == 0
    (tmp_path / "l.csv").write_text(capsys.readouterr().out)
    lat, lon, _ = read_points_csv(tmp_path / "l.csv", ("lat", "lon", "hei"))
    assert abs(lat[0] - a.lat_off) < 1e-9 and abs(lon[0] - a.lon_off) < 1e-9


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 2
    assert main(["fit", "--scene", "x.json", "--flags", "bf,bp", "--out", str(tmp_path)]) == 2
    assert main(["fit", "--scene", "x.json", "--flags", "warp", "--out", str(tmp_path)]) == 2
    assert main(["eval"]) == 2
    capsys.readouterr()
    assert main(["render", "--mpi", str(tmp_path / "missing.mpi"), "--out-img", str(tmp_path / "o.png")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileNotFoundError"
    (tmp_path / "bad.mpi").write_bytes(b"junk")
    assert main(["render", "--mpi", str(tmp_path / "bad.mpi"), "--out-img", str(tmp_path / "o.png")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "CorruptFile"


def test_eval_identical_inputs(tmp_path, bundle, capsys):
    _, path = bundle
    d = path.parent
    out = tmp_path / "rep.json"
    assert main(["eval", "--pred-img", str(d / "ref.png"), "--gt-img", str(d / "ref.png"),
                 "--pred-height", str(d / "ref_height.pfm"), "--gt-height", str(d / "ref_height.pfm"),
                 "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["ssim"] == pytest.approx(1.0) and rep["mae"] == 0.0 and rep["psnr"] == "inf"
    assert main(["eval", "--pred-height", str(d / "ref_height.pfm"), "--gt-height", str(d / "ref_height.pfm"),
                 "--thresholds", "1,2.5,7.5"]) == 0
    assert "pct_below_1" in json.loads(capsys.readouterr().out)


def test_config_precedence(tmp_path, bundle):
    from rpckit.cli import build_parser, fit_config
    _, path = bundle
    manifest_cfg = {"n_iters": 7, "learning_rate": 0.2, "weights": {"ssim": 0.5}}
    args = build_parser().parse_args(["fit", "--scene", str(path), "--iters", "3", "--lambda-rgb", "2",
                                      "--out", str(tmp_path)])
    cfg = fit_config(args, manifest_cfg)
    assert cfg.n_iters == 3 and cfg.learning_rate == 0.2
    assert cfg.weights.rgb == 2.0 and cfg.weights.ssim == 0.5 and cfg.weights.pts == 1.0
    args = build_parser().parse_args(["fit", "--scene", str(path), "--flags", "bp,pts", "--out", str(tmp_path)])
    cfg = fit_config(args, {"reproj": True})
    assert cfg.path == "bp" and cfg.pts and not cfg.reproj


def test_synth_and_fit_are_deterministic(tmp_path, capsys):
    assert main(["synth", "--seed", "2", "--dims", "20x20", "--points", "20", "--out", str(tmp_path / "s")]) == 0
    manifest = tmp_path / "s" / "scene.json"
    reports = []
    for k in range(2):
        out = tmp_path / f"fit{k}"
        assert main(["fit", "--scene", str(manifest), "--mode", "multi", "--flags", "bf,reproj,pts",
                     "--iters", "5", "--planes", "6", "--snapshot-every", "5", "--out", str(out)]) == 0
        reports.append((out / "report.json").read_bytes())
        for name in ("mpi.bin", "ref_render.png", "ref_height.pfm", "timing.json"):
            assert (out / name).exists()
    assert reports[0] == reports[1]
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert {"ref_psnr", "ref_mae", "tgt_1_psnr", "tgt_2_psnr"} <= set(summary)
