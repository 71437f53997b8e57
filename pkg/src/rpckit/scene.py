"""Multi-view scene containers shared by the fitter, CLI and generators."""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from rpckit.rpc_camera import RpcCamera


@dataclasses.dataclass(eq=False)
class SparsePoints:
    """Sparse altitude samples (row px, col px, altitude m) in one view."""

    rows: np.ndarray
    cols: np.ndarray
    altitudes: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=int)
        self.cols = np.asarray(self.cols, dtype=int)
        self.altitudes = np.asarray(self.altitudes, dtype=float)
        if not (self.rows.shape == self.cols.shape == self.altitudes.shape) or self.rows.ndim != 1:
            raise ValueError("rows, cols and altitudes must be 1-d arrays of equal length")

    def __len__(self):
        return self.rows.size

    def subset(self, n: int) -> "SparsePoints":
        return SparsePoints(self.rows[:n], self.cols[:n], self.altitudes[:n])

    def to_list(self):
        return [[int(r), int(c), float(a)] for r, c, a in zip(self.rows, self.cols, self.altitudes)]

    @classmethod
    def from_list(cls, items):
        items = list(items)
        if not items:
            return cls(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
        r, c, a = zip(*items)
        return cls(np.array(r), np.array(c), np.array(a))


@dataclasses.dataclass(eq=False)
class View:
    name: str
    image: np.ndarray  # (H, W, 3) in [0, 1]
    camera: RpcCamera
    role: str = "tgt"  # "ref" or "tgt"
    holdout: bool = False
    height: Optional[np.ndarray] = None  # truth altitude in this view, if known
    height_mask: Optional[np.ndarray] = None  # True where height is valid

    def __post_init__(self):
        if self.role not in ("ref", "tgt"):
            raise ValueError(f"view role must be 'ref' or 'tgt', got {self.role!r}")
        self.image = np.asarray(self.image, dtype=float)


@dataclasses.dataclass(eq=False)
class Scene:
    views: list
    height_range: tuple  # (h_near, h_far): highest and lowest altitude, metres
    sparse_points: Optional[SparsePoints] = None

    def __post_init__(self):
        refs = [v for v in self.views if v.role == "ref"]
        if len(refs) != 1:
            raise ValueError(f"scene needs exactly one reference view, got {len(refs)}")
        dims = {v.image.shape[:2] for v in self.views}
        if len(dims) != 1:
            raise ValueError(f"all views must share dims, got {sorted(dims)}")

    @property
    def ref(self) -> View:
        return next(v for v in self.views if v.role == "ref")

    @property
    def dims(self):
        return self.ref.image.shape[:2]

    @property
    def train_targets(self) -> list:
        return [v for v in self.views if v.role == "tgt" and not v.holdout]

    @property
    def holdout_targets(self) -> list:
        return [v for v in self.views if v.role == "tgt" and v.holdout]
