"""Differentiable bilinear sampling, transitive flow/matchability composition,
image warping, and the on-disk formats for flows and masks.

Coordinate convention: discrete pixels sit at integer coordinates
(1..W, 1..H); a flow field stores per-pixel offsets (channel 0 = x,
channel 1 = y) and the point corresponding to p is q = p + F(p).
Sample locations outside [1,W]x[1,H] are clamped to the boundary.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import autodiff as ad
from .autodiff import Tensor, astensor


@dataclass
class FlowField:
    """Dense correspondence offsets, grid [H,W,2] in pixel units."""

    grid: Tensor

    def __post_init__(self):
        self.grid = astensor(self.grid)
        if self.grid.data.ndim != 3 or self.grid.data.shape[2] != 2:
            raise ValueError(f"FlowField grid must be [H,W,2], got {self.grid.data.shape}")

    @property
    def shape(self):
        return self.grid.data.shape[:2]

    @property
    def values(self) -> np.ndarray:
        return self.grid.data


@dataclass
class MatchMap:
    """Per-pixel matchability probabilities, grid [H,W] in [0,1]."""

    grid: Tensor

    def __post_init__(self):
        self.grid = astensor(self.grid)
        if self.grid.data.ndim != 2:
            raise ValueError(f"MatchMap grid must be [H,W], got {self.grid.data.shape}")
        if self.grid.data.min() < 0.0 or self.grid.data.max() > 1.0:
            raise ValueError("MatchMap values must lie in [0,1]")

    @property
    def shape(self):
        return self.grid.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.grid.data


@dataclass
class GroundTruthEdge:
    """Known flow plus a binary supervision mask on the same grid."""

    flow: FlowField
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.shape != self.flow.shape:
            raise ValueError("mask and flow shapes disagree")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask must be binary")


def pixel_grid(H: int, W: int) -> np.ndarray:
    """[H,W,2] array of pixel coordinates: (x=1..W, y=1..H)."""
    xs, ys = np.meshgrid(np.arange(1.0, W + 1.0), np.arange(1.0, H + 1.0))
    return np.stack([xs, ys], axis=-1)


# ---------------------------------------------------------------------------
# bilinear sampling (the one differentiable gather everything builds on)


def _bilinear_parts(H: int, W: int, coords: np.ndarray):
    """Clamp coords to the domain and return corner indices plus weights."""
    if not np.isfinite(coords).all():
        raise ad.NonFiniteError("sample coordinates contain NaN/Inf")
    if H < 2 or W < 2:
        raise ValueError("bilinear sampling needs a grid of at least 2x2")
    x = np.clip(coords[..., 0], 1.0, float(W)) - 1.0
    y = np.clip(coords[..., 1], 1.0, float(H)) - 1.0
    i0 = np.minimum(np.floor(x), W - 2).astype(np.intp)
    j0 = np.minimum(np.floor(y), H - 2).astype(np.intp)
    wx = x - i0
    wy = y - j0
    # gradient w.r.t. the coordinate is zero where the clamp is active
    gx_mask = (coords[..., 0] >= 1.0) & (coords[..., 0] <= float(W))
    gy_mask = (coords[..., 1] >= 1.0) & (coords[..., 1] <= float(H))
    return i0, j0, wx, wy, gx_mask, gy_mask


def grid_sample(field, coords) -> Tensor:
    """Bilinearly sample a [H,W] or [H,W,C] field at continuous points.

    coords is a Tensor or array shaped [...,2] holding (x, y) in the
    1-based pixel domain; integer coordinates reproduce grid values
    exactly.  Differentiable in both the field values and the
    coordinates (one-sided at cell boundaries).
    """
    field = astensor(field)
    coords = astensor(coords)
    fdata = field.data
    squeeze = fdata.ndim == 2
    if squeeze:
        fdata = fdata[..., None]
    if fdata.ndim != 3:
        raise ValueError("grid_sample: field must be [H,W] or [H,W,C]")
    if coords.data.shape[-1] != 2:
        raise ValueError("grid_sample: coords must have a trailing axis of 2")
    H, W, C = fdata.shape
    lead = coords.data.shape[:-1]
    pts = coords.data.reshape(-1, 2)
    i0, j0, wx, wy, gxm, gym = _bilinear_parts(H, W, pts)
    i1, j1 = i0 + 1, j0 + 1
    f00 = fdata[j0, i0]
    f01 = fdata[j0, i1]
    f10 = fdata[j1, i0]
    f11 = fdata[j1, i1]
    w00 = ((1.0 - wx) * (1.0 - wy))[:, None]
    w01 = (wx * (1.0 - wy))[:, None]
    w10 = ((1.0 - wx) * wy)[:, None]
    w11 = (wx * wy)[:, None]
    out = w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11

    def bw(g):
        gm = g.reshape(-1, C)
        if field.requires_grad or field._backward is not None:
            gf = np.zeros((H, W, C))
            np.add.at(gf, (j0, i0), gm * w00)
            np.add.at(gf, (j0, i1), gm * w01)
            np.add.at(gf, (j1, i0), gm * w10)
            np.add.at(gf, (j1, i1), gm * w11)
            ad._accum(field, gf[..., 0] if squeeze else gf)
        if coords.requires_grad or coords._backward is not None:
            dwx = (1.0 - wy)[:, None] * (f01 - f00) + wy[:, None] * (f11 - f10)
            dwy = (1.0 - wx)[:, None] * (f10 - f00) + wx[:, None] * (f11 - f01)
            gc = np.empty_like(pts)
            gc[:, 0] = (gm * dwx).sum(axis=1) * gxm
            gc[:, 1] = (gm * dwy).sum(axis=1) * gym
            ad._accum(coords, gc.reshape(lead + (2,)))

    out_shape = lead if squeeze else lead + (C,)
    return ad._make(out.reshape(out_shape), "grid_sample", (field, coords), bw)


def sample_flow(F: FlowField, points) -> Tensor:
    """Continuous flow lookup: bilinear blend of the four neighbor pixels."""
    return grid_sample(F.grid, points)


def sample_match(M: MatchMap, points) -> Tensor:
    """Continuous matchability lookup with the same bilinear kernel."""
    return grid_sample(M.grid, points)


# ---------------------------------------------------------------------------
# transitive composition


def compose_flow(Fab: FlowField, Fbc: FlowField) -> FlowField:
    """Transitive composition: out(p) = Fab(p) + Fbc(p + Fab(p))."""
    if Fab.shape != Fbc.shape:
        raise ValueError(f"compose_flow: grids disagree {Fab.shape} vs {Fbc.shape}")
    H, W = Fab.shape
    base = Tensor(pixel_grid(H, W))
    target = ad.add(base, Fab.grid)
    return FlowField(ad.add(Fab.grid, grid_sample(Fbc.grid, target)))


def compose_match(Mab: MatchMap, Mbc: MatchMap, Fab: FlowField) -> MatchMap:
    """Multiplicative composition: out(p) = Mab(p) * Mbc(p + Fab(p))."""
    if Mab.shape != Mbc.shape:
        raise ValueError(f"compose_match: grids disagree {Mab.shape} vs {Mbc.shape}")
    if Fab.shape != Mab.shape:
        raise ValueError("compose_match: flow grid disagrees with match grids")
    H, W = Mab.shape
    base = Tensor(pixel_grid(H, W))
    target = ad.add(base, Fab.grid)
    return MatchMap(ad.mul(Mab.grid, grid_sample(Mbc.grid, target)))


def warp_image(img, F: FlowField) -> Tensor:
    """Backward-warp: out(p) = img sampled at p + F(p), boundary clamped."""
    img = astensor(img)
    if img.data.ndim not in (2, 3):
        raise ValueError("warp_image: img must be [H,W] or [H,W,C]")
    H, W = F.shape
    if img.data.shape[:2] != (H, W):
        raise ValueError("warp_image: image and flow sizes disagree")
    base = Tensor(pixel_grid(H, W))
    target = ad.add(base, F.grid)
    return grid_sample(img, target)


# ---------------------------------------------------------------------------
# file formats

FLO_MAGIC = 202021.25


def write_flo(path, flow: np.ndarray) -> None:
    """Middlebury .flo: magic float, width i32, height i32, then
    row-major interleaved (u, v) float32 pairs, little-endian."""
    arr = np.asarray(flow, dtype=np.float32)
    if isinstance(flow, FlowField):
        arr = flow.values.astype(np.float32)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError("write_flo expects [H,W,2]")
    H, W = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", W, H))
        fh.write(arr.astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (magic,) = struct.unpack("<f", fh.read(4))
        if magic != np.float32(FLO_MAGIC):
            raise IOError(f"{path}: bad .flo magic {magic!r}")
        W, H = struct.unpack("<ii", fh.read(8))
        data = np.frombuffer(fh.read(8 * W * H), dtype="<f4")
        if data.size != 2 * W * H:
            raise IOError(f"{path}: truncated .flo payload")
    return data.reshape(H, W, 2).astype(np.float32)


def write_mask_png(path, mask: np.ndarray) -> None:
    """Store a [0,1] map as 8-bit grayscale PNG (255 == 1.0)."""
    arr = np.asarray(mask, dtype=np.float64)
    img = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    return img / 255.0
