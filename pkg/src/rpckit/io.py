"""Raster files, point CSVs and scene bundles."""

from __future__ import annotations

import csv
import dataclasses
import json
import re
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from rpckit.errors import BadConfig, CorruptFile, UnsupportedFormat
from rpckit.rpc_camera import read_rpc_file, write_rpc_file
from rpckit.scene import Scene, SparsePoints, View

MANIFEST_NAME = "scene.json"


@dataclasses.dataclass(eq=False)
class Raster:
    data: np.ndarray  # (H, W, C) float32
    mask: Optional[np.ndarray] = None  # (H, W) True where valid
    units: str = "unitless"  # "unitless" for RGB, "m" for altitude

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"raster must be (H, W, 1|3), got {data.shape}")
        self.data = data
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != data.shape[:2]:
                raise ValueError("mask dims must match the raster")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def array(self) -> np.ndarray:
        """float64 view: (H, W) for one channel, (H, W, 3) otherwise."""
        a = self.data.astype(float)
        return a[..., 0] if self.channels == 1 else a


def _suffix(path) -> str:
    ext = Path(path).suffix.lower().lstrip(".")
    if ext not in ("png", "pfm"):
        raise UnsupportedFormat(f"{path}: unsupported raster extension {ext!r} (png or pfm)")
    return ext


_PFM_HEADER = re.compile(rb"\A(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")


def read_pfm(path) -> Raster:
    raw = Path(path).read_bytes()
    m = _PFM_HEADER.match(raw)
    if m is None:
        raise CorruptFile(f"{path}: not a PFM file (bad magic or header)")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError as exc:
        raise CorruptFile(f"{path}: bad PFM scale") from exc
    if scale == 0:
        raise CorruptFile(f"{path}: zero PFM scale")
    body = raw[m.end():]
    count = w * h * channels
    if len(body) != 4 * count:
        raise CorruptFile(f"{path}: expected {4 * count} data bytes, found {len(body)}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(body, dtype=dtype).reshape(h, w, channels)[::-1].astype(np.float32)
    finite = np.isfinite(data).all(axis=2)
    mask = None if finite.all() else finite
    return Raster(data, mask, "m" if channels == 1 else "unitless")


def write_pfm(raster: Raster, path) -> None:
    data = raster.data.copy()
    if raster.mask is not None:
        data[~raster.mask] = np.nan
    magic = b"PF" if raster.channels == 3 else b"Pf"
    header = magic + b"\n%d %d\n-1.0\n" % (raster.width, raster.height)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_png(path) -> Raster:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except FileNotFoundError:
        raise
    except (OSError, SyntaxError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    return Raster(arr.astype(np.float32) / 255.0)


def write_png(raster: Raster, path) -> None:
    q = np.round(np.clip(np.nan_to_num(raster.data), 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "RGB" if raster.channels == 3 else "L"
    Image.fromarray(q if mode == "RGB" else q[..., 0], mode=mode).save(path)


def load_raster(path) -> Raster:
    return read_pfm(path) if _suffix(path) == "pfm" else read_png(path)


def save_raster(raster: Raster, path) -> None:
    if _suffix(path) == "pfm":
        write_pfm(raster, path)
    else:
        write_png(raster, path)


def load_array(path):
    """(array, mask) with NO-DATA cells set to NaN in the array."""
    r = load_raster(path)
    return r.array(), r.mask


def save_array(array, path, mask=None, units: str = "unitless") -> None:
    save_raster(Raster(array, mask, units), path)


def read_points_csv(path, columns):
    """Rows of a headed CSV as float columns in the requested order."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise CorruptFile(f"{path}: empty CSV")
        header = [c.strip() for c in reader.fieldnames]
        missing = [c for c in columns if c not in header]
        if missing:
            raise CorruptFile(f"{path}: CSV header lacks {missing}")
        cols = {c: [] for c in columns}
        for lineno, row in enumerate(reader, start=2):
            row = {k.strip(): v for k, v in row.items() if k is not None}
            for c in columns:
                try:
                    cols[c].append(float(row[c]))
                except (TypeError, ValueError) as exc:
                    raise CorruptFile(f"{path}:{lineno}: bad number in column {c!r}") from exc
    return [np.array(cols[c]) for c in columns]


def write_points_csv(path_or_file, columns, arrays) -> None:
    own = isinstance(path_or_file, (str, Path))
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in zip(*arrays):
            writer.writerow([repr(float(v)) for v in row])
    finally:
        if own:
            f.close()


def read_sparse_points(path) -> SparsePoints:
    rows, cols, alts = read_points_csv(path, ("row", "col", "altitude"))
    return SparsePoints(rows.astype(int), cols.astype(int), alts)


def write_sparse_points(pts: SparsePoints, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("row", "col", "altitude"))
        for r, c, a in zip(pts.rows, pts.cols, pts.altitudes):
            writer.writerow((int(r), int(c), repr(float(a))))


def write_scene_bundle(scene: Scene, out_dir, config: Optional[dict] = None) -> Path:
    """Write images, RPCs, truth heights, points and the manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views = []
    for v in scene.views:
        entry = {"name": v.name, "image": f"{v.name}.png", "rpc": f"{v.name}.rpc", "role": v.role,
                 "holdout": bool(v.holdout)}
        save_array(v.image, out / entry["image"])
        write_rpc_file(v.camera, out / entry["rpc"])
        if v.height is not None:
            entry["height"] = f"{v.name}_height.pfm"
            save_array(v.height, out / entry["height"], v.height_mask, units="m")
        views.append(entry)
    manifest = {"dims": list(scene.dims), "height_range": [float(x) for x in scene.height_range], "views": views}
    if scene.sparse_points is not None:
        manifest["points"] = "points.csv"
        write_sparse_points(scene.sparse_points, out / "points.csv")
    if config:
        manifest["config"] = config
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_scene(manifest_path):
    """Scene and the manifest's optional ``config`` block."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{manifest_path}: {exc}") from exc
    base = manifest_path.parent
    for key in ("views", "height_range"):
        if key not in manifest:
            raise BadConfig(f"{manifest_path}: manifest lacks {key!r}")
    if sum(1 for v in manifest["views"] if v.get("role") == "ref") != 1:
        raise BadConfig(f"{manifest_path}: manifest needs exactly one ref view")

    def resolve(rel):
        p = base / rel
        if not p.exists():
            raise BadConfig(f"{manifest_path}: missing file {rel}")
        return p

    views = []
    for entry in manifest["views"]:
        image, _ = load_array(resolve(entry["image"]))
        camera = read_rpc_file(resolve(entry["rpc"]))
        height = mask = None
        if entry.get("height"):
            height, mask = load_array(resolve(entry["height"]))
        views.append(View(name=entry.get("name", Path(entry["image"]).stem), image=image, camera=camera,
                          role=entry["role"], holdout=bool(entry.get("holdout", False)), height=height,
                          height_mask=mask))
    points = read_sparse_points(resolve(manifest["points"])) if manifest.get("points") else None
    h_near, h_far = manifest["height_range"]
    scene = Scene(views=views, height_range=(float(h_near), float(h_far)), sparse_points=points)
    dims = manifest.get("dims")
    if dims is not None and tuple(dims) != tuple(scene.dims):
        raise BadConfig(f"{manifest_path}: manifest dims {dims} differ from images {list(scene.dims)}")
    return scene, dict(manifest.get("config") or {})
