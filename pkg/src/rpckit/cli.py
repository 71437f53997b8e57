"""Command-line entry point: ``rpckit <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from rpckit.errors import RpcKitError
from rpckit.frustum_warp import build_warp_grid, warp_frustum
from rpckit.io import (
    load_array,
    load_scene,
    read_points_csv,
    save_array,
    write_points_csv,
    write_scene_bundle,
)
from rpckit.metrics import DEFAULT_THRESHOLDS, compute_metrics
from rpckit.mpi_field import read_mpi, render_planar, write_mpi
from rpckit.rpc_camera import (
    GroundPointBatch,
    PixelPointBatch,
    VirtualGrid,
    fit_inverse,
    localize,
    project,
    read_rpc_file,
    write_rpc_file,
)
from rpckit.scene_fit import FitConfig, fit_scene, render_frustum
from rpckit.synthetic import PRESETS, build_scene

FIT_FLAGS = ("bf", "bp", "reproj", "pts", "lpipsoff")


class UsageError(Exception):
    """Bad argument values detected after parsing."""


def _dims(text: str):
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NxM..., got {text!r}") from None
    if any(p < 1 for p in parts):
        raise argparse.ArgumentTypeError(f"dimensions must be positive, got {text!r}")
    return parts


def _grid(text: str):
    parts = _dims(text)
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"grid must be AxBxC, got {text!r}")
    return parts


def _floats(text: str):
    try:
        return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _flags(text: str):
    flags = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in flags if f not in FIT_FLAGS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown flags {bad}; choose from {','.join(FIT_FLAGS)}")
    if "bf" in flags and "bp" in flags:
        raise argparse.ArgumentTypeError("bf and bp are mutually exclusive")
    return flags


def _json_dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_rpc_fit_inverse(args) -> int:
    camera = read_rpc_file(args.rpc)
    grid = VirtualGrid.from_camera(camera, counts=args.grid)
    fitted = fit_inverse(camera, grid, tol=args.tol)
    write_rpc_file(fitted, args.out)
    print(json.dumps({"inverse_residual_px": fitted.inverse_residual,
                      "inverse_ground_residual_deg": fitted.inverse_ground_residual}))
    return 0


def cmd_rpc_project(args) -> int:
    camera = read_rpc_file(args.rpc)
    lat, lon, hei = read_points_csv(args.points, ("lat", "lon", "hei"))
    px = project(camera, GroundPointBatch(lat, lon, hei))
    write_points_csv(sys.stdout, ("samp", "line", "hei"), (px.samp, px.line, px.hei))
    return 0


def cmd_rpc_localize(args) -> int:
    camera = read_rpc_file(args.rpc)
    samp, line, hei = read_points_csv(args.points, ("samp", "line", "hei"))
    g = localize(camera, PixelPointBatch(samp, line, hei))
    write_points_csv(sys.stdout, ("lat", "lon", "hei"), (g.lat, g.lon, g.hei))
    return 0


def cmd_synth(args) -> int:
    scene = build_scene(args.preset, seed=args.seed, dims=args.dims, baseline=args.baseline,
                        n_points=args.points)
    path = write_scene_bundle(scene, args.out)
    print(str(path))
    return 0


def cmd_render(args) -> int:
    mpi = read_mpi(args.mpi)
    image, height, _ = render_planar(mpi)
    save_array(image, args.out_img)
    if args.out_height:
        save_array(height, args.out_height, units="m")
    return 0


def cmd_warp(args) -> int:
    ref_cam = read_rpc_file(args.ref_rpc)
    tgt_cam = read_rpc_file(args.tgt_rpc)
    mpi = read_mpi(args.mpi, camera=ref_cam)
    grid = build_warp_grid(ref_cam, tgt_cam, mpi.sampling, mpi.dims)
    write_mpi(warp_frustum(mpi, grid, camera=tgt_cam), args.out)
    return 0


def fit_config(args, manifest_config: dict) -> FitConfig:
    """Defaults, overridden by the manifest ``config`` block, overridden by flags."""
    merged = FitConfig().to_dict()
    for key, value in manifest_config.items():
        if key == "weights":
            merged["weights"] = dict(merged["weights"], **value)
        else:
            merged[key] = value
    cli = {"mode": args.mode, "n_iters": args.iters, "learning_rate": args.lr, "seed": args.seed,
           "n_planes": args.planes, "snapshot_every": args.snapshot_every, "n_points": args.n_points}
    merged.update({k: v for k, v in cli.items() if v is not None})
    if args.flags is not None:
        flags = set(args.flags)
        merged["path"] = "bp" if "bp" in flags else "bf"
        merged["reproj"] = "reproj" in flags
        merged["pts"] = "pts" in flags
    for name in ("rgb", "ssim", "reproj", "pts"):
        value = getattr(args, f"lambda_{name}")
        if value is not None:
            merged["weights"][name] = value
    cfg = FitConfig.from_dict(merged)
    cfg.validate()
    return cfg


def cmd_fit(args) -> int:
    scene, manifest_config = load_scene(args.scene)
    cfg = fit_config(args, manifest_config)
    mpi, report, _ = fit_scene(scene, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_mpi(mpi, out / "mpi.bin")
    image, height, _ = render_frustum(mpi.colors, mpi.sigmas, mpi.sampling, cfg)
    save_array(image, out / "ref_render.png")
    save_array(height, out / "ref_height.pfm", units="m")
    (out / "report.json").write_text(report.to_json() + "\n")
    _json_dump({"seconds_per_iteration": report.timing, "total_seconds": float(sum(report.timing))},
               out / "timing.json")
    final = report.final
    summary = {"ref_psnr": final["ref"]["psnr"], "ref_mae": final["ref"]["mae"]}
    for v in scene.views:
        if v.role == "tgt":
            summary[f"{v.name}_psnr"] = final[v.name]["psnr"]
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    have_img = args.pred_img is not None and args.gt_img is not None
    have_hei = args.pred_height is not None and args.gt_height is not None
    if not (have_img or have_hei):
        raise UsageError("eval needs --pred-img/--gt-img and/or --pred-height/--gt-height")
    pred_img = gt_img = pred_h = gt_h = gt_mask = None
    if have_img:
        pred_img, _ = load_array(args.pred_img)
        gt_img, _ = load_array(args.gt_img)
    if have_hei:
        pred_h, _ = load_array(args.pred_height)
        gt_h, gt_mask = load_array(args.gt_height)
    report = compute_metrics(pred_img, gt_img, pred_h, gt_h, gt_mask, thresholds=args.thresholds)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rpckit", description="RPC cameras and multiplane frusta for satellite views.")
    sub = p.add_subparsers(dest="command", required=True)

    rpc = sub.add_parser("rpc", help="RPC model utilities")
    rsub = rpc.add_subparsers(dest="rpc_command", required=True)
    fi = rsub.add_parser("fit-inverse", help="fit the inverse (localization) polynomials")
    fi.add_argument("--rpc", required=True)
    fi.add_argument("--grid", type=_grid, default=(20, 20, 10), help="virtual grid counts AxBxC")
    fi.add_argument("--out", required=True)
    fi.add_argument("--tol", type=float, default=None, help="max round-trip residual in px")
    fi.set_defaults(func=cmd_rpc_fit_inverse)
    for name, func, cols in (("project", cmd_rpc_project, "lat,lon,hei"),
                             ("localize", cmd_rpc_localize, "samp,line,hei")):
        sp = rsub.add_parser(name, help=f"read a {cols} CSV and write the mapped CSV to stdout")
        sp.add_argument("--rpc", required=True)
        sp.add_argument("--points", required=True, help=f"CSV with header {cols}")
        sp.set_defaults(func=func)

    sy = sub.add_parser("synth", help="write a synthetic scene bundle")
    sy.add_argument("--preset", choices=sorted(PRESETS), default="plateau")
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--dims", type=_dims, default=(64, 64))
    sy.add_argument("--baseline", type=float, default=0.25, help="side-view shear in px per metre")
    sy.add_argument("--points", type=int, default=100, help="number of sparse altitude samples")
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synth)

    rd = sub.add_parser("render", help="render an MPI file")
    rd.add_argument("--mpi", required=True)
    rd.add_argument("--out-img", required=True)
    rd.add_argument("--out-height")
    rd.set_defaults(func=cmd_render)

    wp = sub.add_parser("warp", help="warp an MPI into another camera")
    wp.add_argument("--mpi", required=True)
    wp.add_argument("--ref-rpc", required=True)
    wp.add_argument("--tgt-rpc", required=True)
    wp.add_argument("--out", required=True)
    wp.set_defaults(func=cmd_warp)

    ft = sub.add_parser("fit", help="fit an explicit MPI to a scene")
    ft.add_argument("--scene", required=True, help="path to scene.json")
    ft.add_argument("--mode", choices=("single", "multi"))
    ft.add_argument("--flags", type=_flags, help=f"comma-separated subset of {','.join(FIT_FLAGS)}")
    ft.add_argument("--iters", type=int)
    ft.add_argument("--lr", type=float)
    ft.add_argument("--seed", type=int)
    ft.add_argument("--planes", type=int)
    ft.add_argument("--n-points", type=int)
    ft.add_argument("--snapshot-every", type=int)
    for name in ("rgb", "ssim", "reproj", "pts"):
        ft.add_argument(f"--lambda-{name}", type=float)
    ft.add_argument("--out", required=True)
    ft.set_defaults(func=cmd_fit)

    ev = sub.add_parser("eval", help="image and altitude metrics as JSON")
    ev.add_argument("--pred-img")
    ev.add_argument("--gt-img")
    ev.add_argument("--pred-height")
    ev.add_argument("--gt-height")
    ev.add_argument("--thresholds", type=_floats, default=DEFAULT_THRESHOLDS)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)
    return p


def _fail(exc: BaseException) -> int:
    msg = {"error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(msg) + "\n")
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return int(args.func(args))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"rpckit: error: {exc}\n")
        return 2
    except (RpcKitError, OSError, ValueError) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
