"""Multiplane-image frusta: altitude sampling, height embedding and rendering.

Planes are always stored front-to-back: plane 0 is the highest altitude,
nearest to a nadir-looking sensor.
"""

from __future__ import annotations

import dataclasses
import struct
from typing import Optional

import numpy as np

from rpckit.errors import CorruptFile, DegenerateRange, DimMismatch

DEFAULT_NUM_PLANES = 32
DEFAULT_EMBED_FREQS = 10
MPI_MAGIC = b"MPI1"


def plane_spacings(heights) -> np.ndarray:
    """delta_i = |h_{i+1} - h_i|, the last plane reusing its predecessor's."""
    h = np.asarray(heights, dtype=float)
    d = np.abs(np.diff(h))
    return np.append(d, d[-1])


@dataclasses.dataclass(eq=False)
class HeightSampling:
    heights: np.ndarray  # (N,) strictly decreasing, metres
    spacings: np.ndarray  # (N,) metres
    offset: float = 0.0  # shift making all altitudes >= 1

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=float)
        self.spacings = np.asarray(self.spacings, dtype=float)
        if self.heights.ndim != 1 or self.heights.size < 2:
            raise ValueError("need at least two planes")
        if self.spacings.shape != self.heights.shape:
            raise ValueError("spacings must match heights")
        if not np.all(self.spacings > 0):
            raise ValueError("plane spacings must be positive")
        if not np.all(np.diff(self.heights) < 0):
            raise ValueError("heights must be strictly decreasing (front to back)")

    @classmethod
    def from_heights(cls, heights) -> "HeightSampling":
        h = np.asarray(heights, dtype=float)
        return cls(h, plane_spacings(h), max(0.0, 1.0 - float(h.min())))

    def __len__(self):
        return self.heights.size

    def fingerprint(self) -> bytes:
        return self.heights.tobytes() + self.spacings.tobytes()


def reciprocal_altitudes(h_near: float, h_far: float, n: int) -> np.ndarray:
    """1/h_i = 1/h_far + (i-1)/n * (1/h_near - 1/h_far), i = 1..n, as written."""
    i = np.arange(1, n + 1)
    return 1.0 / (1.0 / h_far + (i - 1) / n * (1.0 / h_near - 1.0 / h_far))


def sample_heights(h_near: float, h_far: float, n: int = DEFAULT_NUM_PLANES) -> HeightSampling:
    """``n`` altitude hypotheses uniform in reciprocal (shifted) altitude.

    ``h_near`` is the highest altitude.  Altitudes are shifted by
    ``max(0, 1 - h_far)`` before taking reciprocals so the formula stays finite
    for ranges touching or crossing zero.
    """
    if not h_near > h_far:
        raise DegenerateRange(f"need h_near > h_far, got {h_near} <= {h_far}")
    if n < 2:
        raise ValueError("need at least two planes")
    offset = max(0.0, 1.0 - h_far)
    shifted = reciprocal_altitudes(h_near + offset, h_far + offset, n)
    heights = shifted[::-1] - offset
    return HeightSampling(heights, plane_spacings(heights), offset)


def embed_height(x, n_freqs: int = DEFAULT_EMBED_FREQS) -> np.ndarray:
    """Frequency encoding [sin(2^0 pi x), cos(2^0 pi x), ..., cos(2^(L-1) pi x)].

    ``x`` may be a scalar or an array; the encoding is appended as a last
    axis of length ``2 * n_freqs``.
    """
    if n_freqs < 1:
        raise ValueError("n_freqs must be >= 1")
    x = np.asarray(x, dtype=float)
    angles = np.pi * x[..., None] * (2.0 ** np.arange(n_freqs))
    out = np.empty(x.shape + (2 * n_freqs,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def plane_embeddings(n_planes: int, n_freqs: int = DEFAULT_EMBED_FREQS) -> np.ndarray:
    """Embeddings of the relative sample indices i / (N - 1), i = 0..N-1."""
    return embed_height(np.arange(n_planes) / max(n_planes - 1, 1), n_freqs)


@dataclasses.dataclass(eq=False)
class MpiFrustum:
    colors: np.ndarray  # (N, H, W, 3) in [0, 1]
    sigmas: np.ndarray  # (N, H, W) >= 0, 1/m
    sampling: HeightSampling
    camera: Optional[object] = None  # reference RpcCamera

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=float)
        self.sigmas = np.asarray(self.sigmas, dtype=float)
        n = len(self.sampling)
        if self.colors.ndim != 4 or self.colors.shape[0] != n or self.colors.shape[-1] != 3:
            raise DimMismatch(f"colors must be ({n}, H, W, 3), got {self.colors.shape}")
        if self.sigmas.shape != self.colors.shape[:3]:
            raise DimMismatch(f"sigmas must be {self.colors.shape[:3]}, got {self.sigmas.shape}")
        if np.any(self.sigmas < 0):
            raise ValueError("densities must be non-negative")

    @property
    def dims(self):
        return self.sigmas.shape[1:]


def composite_alpha(colors, alphas, depths):
    """Classic MPI over-compositing of an RGBA stack.

    Inputs are front-to-back; compositing runs back to front so each layer is
    attenuated by every layer in front of it.  Returns ``(image, disparity)``
    with disparity accumulated from ``1 / depth``.
    """
    colors = np.asarray(colors, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    depths = np.asarray(depths, dtype=float)
    # transmittance in front of plane i (front-to-back order)
    front = np.cumprod(np.concatenate([np.ones_like(alphas[:1]), 1.0 - alphas[:-1]]), axis=0)
    w = alphas * front
    image = np.einsum("n...,n...c->...c", w, colors)
    disparity = np.tensordot(1.0 / depths, w, axes=1)
    return image, disparity


def planar_weights(sigmas, spacings):
    """Weights, transmittance and per-plane survival exp(-sigma delta)."""
    sigmas = np.asarray(sigmas, dtype=float)
    delta = np.asarray(spacings, dtype=float).reshape((-1,) + (1,) * (sigmas.ndim - 1))
    tau = sigmas * delta
    survive = np.exp(-tau)
    acc = np.cumsum(tau, axis=0)
    trans = np.exp(-np.concatenate([np.zeros_like(tau[:1]), acc[:-1]], axis=0))
    return trans * (1.0 - survive), trans, survive


def render_planar(mpi: MpiFrustum, background_height: Optional[float] = None):
    """Planar volume rendering; returns ``(image, height, weights)``.

    By default the height is the plain weighted sum of plane altitudes.  With
    ``background_height`` the transmittance left after the last plane is
    assigned to that altitude: ``H = sum(w h) + (1 - sum(w)) * background``.
    """
    w, _, _ = planar_weights(mpi.sigmas, mpi.sampling.spacings)
    image = np.einsum("nhw,nhwc->hwc", w, mpi.colors)
    if background_height is None:
        height = np.tensordot(mpi.sampling.heights, w, axes=1)
    else:
        height = np.tensordot(mpi.sampling.heights - background_height, w, axes=1) + background_height
    return image, height, w


def render_planar_backward(sigmas, colors, heights, spacings, grad_image=None, grad_height=None):
    """Vector-Jacobian product of :func:`render_planar`.

    Returns ``(grad_sigmas, grad_colors)`` for upstream gradients on the
    rendered image (H, W, 3) and height (H, W).  For a render with a
    background altitude b pass ``heights - b``.
    """
    w, trans, survive = planar_weights(sigmas, spacings)
    gw = np.zeros_like(w)
    grad_colors = np.zeros_like(colors)
    if grad_image is not None:
        gw += np.einsum("nhwc,hwc->nhw", colors, grad_image)
        grad_colors = w[..., None] * grad_image[None]
    if grad_height is not None:
        gw += np.asarray(heights, float)[:, None, None] * grad_height[None]
    wg = w * gw
    # behind[k] = sum_{i>k} w_i g_i
    behind = np.cumsum(wg[::-1], axis=0)[::-1] - wg
    delta = np.asarray(spacings, float)[:, None, None]
    grad_sigmas = delta * (trans * survive * gw - behind)
    return grad_sigmas, grad_colors


def write_mpi(mpi: MpiFrustum, path) -> None:
    """Binary MPI: magic, u32 N/H/W, float64 heights, float32 RGB then sigma."""
    n, h, w = mpi.sigmas.shape
    with open(path, "wb") as f:
        f.write(MPI_MAGIC)
        f.write(struct.pack("<III", n, h, w))
        f.write(mpi.sampling.heights.astype("<f8").tobytes())
        f.write(mpi.colors.astype("<f4").tobytes())
        f.write(mpi.sigmas.astype("<f4").tobytes())


def read_mpi(path, camera=None) -> MpiFrustum:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MPI_MAGIC:
        raise CorruptFile(f"{path}: bad MPI magic {data[:4]!r}")
    if len(data) < 16:
        raise CorruptFile(f"{path}: truncated header")
    n, h, w = struct.unpack("<III", data[4:16])
    expect = 16 + 8 * n + 4 * n * h * w * 3 + 4 * n * h * w
    if len(data) != expect:
        raise CorruptFile(f"{path}: expected {expect} bytes, found {len(data)}")
    pos = 16
    heights = np.frombuffer(data, "<f8", n, pos).astype(float)
    pos += 8 * n
    colors = np.frombuffer(data, "<f4", n * h * w * 3, pos).reshape(n, h, w, 3).astype(float)
    pos += 4 * n * h * w * 3
    sigmas = np.frombuffer(data, "<f4", n * h * w, pos).reshape(n, h, w).astype(float)
    return MpiFrustum(colors, sigmas, HeightSampling.from_heights(heights), camera)
