"""Procedural training-quartet generation with exact ground truth.

Shapes are depth-ordered sets of parametric 2D parts (ellipse,
rectangle, capsule) in a canonical unit square.  A category fixes the
part skeleton, per-shape parameters vary it, and per-instance jitter
plus texturing stands in for the synthetic-to-real appearance gap.
Because every image is an affine view of parametric parts, dense
correspondence between ANY two renders of one category is available in
closed form per part, which supplies the supervised edge of each
quartet, the init-phase oracle, and keypoint/segmentation annotations.

Pixel coordinates are 1-based, matching the sampling convention.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .warpcomp import (FlowField, GroundTruthEdge, read_flo, read_mask_png,
                       write_flo, write_mask_png)

PART_KINDS = ("ellipse", "rectangle", "capsule")
EDGES = ("s1r1", "r1r2", "r2s2")


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class PartSpec:
    label: int
    kind: str
    cx: float
    cy: float
    w: float
    h: float
    angle: float
    depth: int

    def __post_init__(self):
        if self.kind not in PART_KINDS:
            raise ValueError(f"unknown part kind {self.kind!r}")
        if self.label < 1:
            raise ValueError("part labels start at 1")
        if self.w <= 0 or self.h <= 0:
            raise ValueError("part extents must be positive")


@dataclass(frozen=True)
class ShapeSpec:
    category: str
    shape_id: str
    parts: tuple

    def __post_init__(self):
        if not self.parts:
            raise ValueError("a shape needs at least one part")
        labels = [p.label for p in self.parts]
        if len(set(labels)) != len(labels):
            raise ValueError("part labels must be distinct")
        object.__setattr__(self, "parts", tuple(self.parts))

    def part(self, label: int) -> PartSpec:
        for p in self.parts:
            if p.label == label:
                return p
        raise KeyError(label)


@dataclass(frozen=True)
class RenderParams:
    rotation: float = 0.0
    scale: tuple = (1.0, 1.0)
    translation: tuple = (0.0, 0.0)
    shear: float = 0.0
    texture_seed: int = 0
    lighting_gain: float = 1.0
    clutter_density: float = 1.0
    noise_level: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "scale", tuple(self.scale))
        object.__setattr__(self, "translation", tuple(self.translation))
        if abs(self.scale[0] * self.scale[1]) <= 0.1:
            raise ValueError("view warp is too close to degenerate (|det| <= 0.1)")

    def matrix(self, size: int) -> np.ndarray:
        """2x3 affine taking canonical [0,1]^2 coords to 1-based pixels."""
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        shear = np.array([[1.0, self.shear], [0.0, 1.0]])
        sc = np.diag(self.scale)
        lin = rot @ shear @ sc * size
        center = (size + 1) / 2.0
        off = np.array([center + self.translation[0], center + self.translation[1]])
        off = off - lin @ np.array([0.5, 0.5])
        return np.column_stack([lin, off])


# ---------------------------------------------------------------------------
# affine helpers (2x3 row-major [A | b], point maps x -> A x + b)


def apply_affine(M: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ M[:, :2].T + M[:, 2]


def invert_affine(M: np.ndarray) -> np.ndarray:
    A = M[:, :2]
    Ainv = np.linalg.inv(A)
    return np.column_stack([Ainv, -Ainv @ M[:, 2]])


def compose_affine(M2: np.ndarray, M1: np.ndarray) -> np.ndarray:
    """Affine of 'first M1 then M2'."""
    A = M2[:, :2] @ M1[:, :2]
    b = M2[:, :2] @ M1[:, 2] + M2[:, 2]
    return np.column_stack([A, b])


def _part_to_canonical(part: PartSpec) -> np.ndarray:
    c, s = np.cos(part.angle), np.sin(part.angle)
    rot = np.array([[c, -s], [s, c]])
    lin = rot @ np.diag([part.w / 2.0, part.h / 2.0])
    return np.column_stack([lin, [part.cx, part.cy]])


def pixel_from_local(shape: ShapeSpec, view: RenderParams, label: int,
                     size: int) -> np.ndarray:
    """Affine taking part-local coords of `label` to pixels."""
    return compose_affine(view.matrix(size), _part_to_canonical(shape.part(label)))


def part_map(shape_a: ShapeSpec, view_a: RenderParams,
             shape_b: ShapeSpec, view_b: RenderParams,
             label: int, size: int) -> np.ndarray:
    """Exact pixel correspondence for one shared part label: A -> B."""
    fwd = pixel_from_local(shape_b, view_b, label, size)
    back = invert_affine(pixel_from_local(shape_a, view_a, label, size))
    return compose_affine(fwd, back)


# ---------------------------------------------------------------------------
# rasterization


def _pixel_coords(size: int) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(1.0, size + 1.0), np.arange(1.0, size + 1.0))
    return np.stack([xs, ys], axis=-1).reshape(-1, 2)


def _inside(part: PartSpec, frame_pts: np.ndarray) -> np.ndarray:
    """Inside test in the part's unscaled frame (origin center, unrotated)."""
    fx, fy = frame_pts[:, 0], frame_pts[:, 1]
    if part.kind == "ellipse":
        return (2 * fx / part.w) ** 2 + (2 * fy / part.h) ** 2 <= 1.0
    if part.kind == "rectangle":
        return (np.abs(fx) <= part.w / 2.0) & (np.abs(fy) <= part.h / 2.0)
    # capsule: segment along local x with round caps
    half = max(part.w - part.h, 0.0) / 2.0
    seg = np.clip(fx, -half, half)
    return (fx - seg) ** 2 + fy ** 2 <= (part.h / 2.0) ** 2


def label_map(shape: ShapeSpec, view: RenderParams, size: int) -> np.ndarray:
    """[S,S] int array of front-most part labels (0 = background)."""
    pts = _pixel_coords(size)
    canon = apply_affine(invert_affine(view.matrix(size)), pts)
    labels = np.zeros(size * size, dtype=np.int32)
    for part in sorted(shape.parts, key=lambda p: p.depth):
        c, s = np.cos(part.angle), np.sin(part.angle)
        rot_inv = np.array([[c, s], [-s, c]])
        frame = (canon - [part.cx, part.cy]) @ rot_inv.T
        labels[_inside(part, frame)] = part.label
    return labels.reshape(size, size)


def _palette(label: int) -> np.ndarray:
    """Fixed, saturated flat color per part label."""
    hue = (0.11 + 0.19 * label) % 1.0
    return _hsv(hue, 0.55, 0.85)


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def _texture_field(rng, canon: np.ndarray, size: int) -> np.ndarray:
    """Smooth periodic field over canonical coords, in [-1, 1]-ish."""
    out = np.zeros(canon.shape[0])
    for _ in range(3):
        freq = rng.uniform(2.0, 9.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.3, 1.0)
        out += amp * np.sin(2.0 * np.pi * (canon @ freq) + phase)
    return out / 3.0


def render_view(shape: ShapeSpec, view: RenderParams, style: str, size: int):
    """Rasterize one view; returns (img [S,S,3], label map, visibility mask).

    clean: uniform light background, flat palette colors (the synthetic
    look).  textured: per-instance color jitter, a smooth multiplicative
    texture that rides on the object, background clutter, and pixel
    noise (the "real" look).  Deterministic given the inputs.
    """
    if style not in ("clean", "textured"):
        raise ValueError(f"unknown style {style!r}")
    labels = label_map(shape, view, size)
    flat = labels.reshape(-1)
    img = np.empty((size * size, 3))
    if style == "clean":
        img[:] = 0.94
        for part in shape.parts:
            img[flat == part.label] = _palette(part.label)
        out = img.reshape(size, size, 3)
    else:
        rng = np.random.default_rng([int(view.texture_seed), 7919])
        pts = _pixel_coords(size)
        canon = apply_affine(invert_affine(view.matrix(size)), pts)
        # cluttered background
        img[:] = np.clip(0.5 + 0.25 * rng.normal(size=3), 0.15, 0.9)
        n_blobs = int(round(6 * view.clutter_density))
        for _ in range(n_blobs):
            center = rng.uniform(1, size, size=2)
            sig = rng.uniform(0.04, 0.16) * size
            color = rng.uniform(0.1, 0.9, size=3)
            w = np.exp(-((pts - center) ** 2).sum(axis=1) / (2 * sig * sig))
            img += w[:, None] * (color - img) * 0.8
        # object parts: jittered hue + smooth texture, consistent across
        # views because the field lives in canonical coordinates
        tex = _texture_field(rng, canon, size)
        gain = view.lighting_gain
        for part in shape.parts:
            base = _palette(part.label)
            jit = rng.uniform(-0.12, 0.12, size=3)
            m = flat == part.label
            img[m] = np.clip((base + jit) * gain * (1.0 + 0.25 * tex[m, None]), 0, 1)
        img += rng.normal(scale=view.noise_level, size=img.shape)
        out = np.clip(img, 0.0, 1.0).reshape(size, size, 3)
    return out, labels, (labels > 0)


# ---------------------------------------------------------------------------
# exact correspondence


def gt_flow_between(shape_a: ShapeSpec, view_a: RenderParams,
                    shape_b: ShapeSpec, view_b: RenderParams, size: int,
                    labels_a=None, labels_b=None):
    """Dense exact flow A->B with visibility mask.

    flow(p) = M_label(p) - p on foreground (0 on background); the mask is
    1 iff p is foreground, its target lands inside the frame, and the
    nearest pixel of B carries the same part label (front-most and
    unoccluded there).
    """
    if labels_a is None:
        labels_a = label_map(shape_a, view_a, size)
    if labels_b is None:
        labels_b = label_map(shape_b, view_b, size)
    pts = _pixel_coords(size)
    flat_a = labels_a.reshape(-1)
    flow = np.zeros((size * size, 2))
    mask = np.zeros(size * size, dtype=bool)
    for part in shape_a.parts:
        sel = flat_a == part.label
        if not sel.any():
            continue
        M = part_map(shape_a, view_a, shape_b, view_b, part.label, size)
        q = apply_affine(M, pts[sel])
        flow[sel] = q - pts[sel]
        inframe = ((q[:, 0] >= 1.0) & (q[:, 0] <= size)
                   & (q[:, 1] >= 1.0) & (q[:, 1] <= size))
        vis = np.zeros(sel.sum(), dtype=bool)
        qi = np.rint(q[inframe]).astype(int)
        vis[inframe] = labels_b[qi[:, 1] - 1, qi[:, 0] - 1] == part.label
        mask[sel] = vis
    return flow.reshape(size, size, 2), mask.reshape(size, size).astype(np.float64)


def gt_flow(shape: ShapeSpec, view1: RenderParams, view2: RenderParams,
            size: int) -> GroundTruthEdge:
    """Exact flow between two views of one shape, as a supervised edge."""
    flow, mask = gt_flow_between(shape, view1, shape, view2, size)
    return GroundTruthEdge(FlowField(Tensor(flow)), mask)


_ANCHORS = (("c", (0.0, 0.0)), ("a", (0.7, 0.0)), ("b", (-0.7, 0.0)))


def keypoints_for(shape: ShapeSpec, view: RenderParams, size: int,
                  labels=None) -> dict:
    """Named anchor points per part; None when not cleanly visible.

    A keypoint is visible iff all four surrounding pixels are in-frame
    and carry its part label, which also makes bilinear lookups of any
    part-wise flow exact at the keypoint.
    """
    if labels is None:
        labels = label_map(shape, view, size)
    out = {}
    for part in shape.parts:
        M = pixel_from_local(shape, view, part.label, size)
        for tag, local in _ANCHORS:
            p = apply_affine(M, np.array([local]))[0]
            name = f"p{part.label}{tag}"
            x0, y0 = int(np.floor(p[0])), int(np.floor(p[1]))
            if x0 < 1 or y0 < 1 or x0 + 1 > size or y0 + 1 > size:
                out[name] = None
                continue
            corners = labels[y0 - 1:y0 + 1, x0 - 1:x0 + 1]
            out[name] = [float(p[0]), float(p[1])] \
                if (corners == part.label).all() else None
    return out


# ---------------------------------------------------------------------------
# HOG descriptor and retrieval


def hog_descriptor(img: np.ndarray, cell: int = 8, bins: int = 9) -> np.ndarray:
    """Orientation histograms over cells with 2x2-block L2 normalization.

    Grayscale conversion happens internally; image dims must divide the
    cell size.  Unsigned gradient orientations vote linearly into the
    two nearest of `bins` bins.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    H, W = arr.shape
    if H % cell or W % cell:
        raise ValueError(f"image dims {arr.shape} not divisible by cell={cell}")
    gx = np.zeros_like(arr)
    gy = np.zeros_like(arr)
    gx[:, 1:-1] = (arr[:, 2:] - arr[:, :-2]) / 2.0
    gx[:, 0] = arr[:, 1] - arr[:, 0]
    gx[:, -1] = arr[:, -1] - arr[:, -2]
    gy[1:-1, :] = (arr[2:, :] - arr[:-2, :]) / 2.0
    gy[0, :] = arr[1, :] - arr[0, :]
    gy[-1, :] = arr[-1, :] - arr[-2, :]
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    pos = ang / np.pi * bins
    b0 = np.floor(pos).astype(int) % bins
    frac = pos - np.floor(pos)
    b1 = (b0 + 1) % bins
    ch, cw = H // cell, W // cell
    hist = np.zeros((ch, cw, bins))
    cell_row = np.arange(H) // cell
    cell_col = np.arange(W) // cell
    rr = np.repeat(cell_row, W)
    cc = np.tile(cell_col, H)
    np.add.at(hist, (rr, cc, b0.reshape(-1)), (mag * (1 - frac)).reshape(-1))
    np.add.at(hist, (rr, cc, b1.reshape(-1)), (mag * frac).reshape(-1))
    blocks = []
    eps = 1e-9
    for i in range(ch - 1):
        for j in range(cw - 1):
            blk = hist[i:i + 2, j:j + 2].reshape(-1)
            blocks.append(blk / np.sqrt((blk * blk).sum() + eps * eps))
    return np.concatenate(blocks) if blocks else hist.reshape(-1)


def hog_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b))


# ---------------------------------------------------------------------------
# shape catalog


def make_base_shape(category: str, shape_idx: int, seed: int) -> ShapeSpec:
    rng = np.random.default_rng([seed, hash_name(category), shape_idx])

    def var(v, lo=0.85, hi=1.15):
        return v * rng.uniform(lo, hi)

    def nudge(v, d=0.03):
        return v + rng.uniform(-d, d)

    if category == "wagon":
        parts = (
            PartSpec(1, "rectangle", nudge(0.50), nudge(0.64), var(0.80), var(0.28),
                     rng.uniform(-0.06, 0.06), 1),
            PartSpec(2, "rectangle", nudge(0.36), nudge(0.42), var(0.34), var(0.23),
                     rng.uniform(-0.08, 0.08), 2),
            PartSpec(3, "ellipse", nudge(0.26, 0.02), nudge(0.84, 0.02), var(0.21),
                     var(0.21), 0.0, 3),
            PartSpec(4, "ellipse", nudge(0.74, 0.02), nudge(0.84, 0.02), var(0.21),
                     var(0.21), 0.0, 3),
            PartSpec(5, "capsule", nudge(0.68), nudge(0.36), var(0.28), var(0.11),
                     rng.uniform(-0.4, -0.1), 2),
        )
    elif category == "rocket":
        parts = (
            PartSpec(1, "capsule", nudge(0.50), nudge(0.59), var(0.68), var(0.24),
                     np.pi / 2 + rng.uniform(-0.06, 0.06), 1),
            PartSpec(2, "ellipse", nudge(0.50), nudge(0.16), var(0.24), var(0.27),
                     0.0, 2),
            PartSpec(3, "rectangle", nudge(0.36), nudge(0.90), var(0.16), var(0.24),
                     rng.uniform(0.15, 0.45), 2),
            PartSpec(4, "rectangle", nudge(0.64), nudge(0.90), var(0.16), var(0.24),
                     rng.uniform(-0.45, -0.15), 2),
            PartSpec(5, "ellipse", nudge(0.50, 0.015), nudge(0.50, 0.015), var(0.12),
                     var(0.12), 0.0, 3),
        )
    else:
        raise ValueError(f"unknown category {category!r}")
    return ShapeSpec(category, f"{category}{shape_idx}", parts)


def hash_name(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def jitter_shape(shape: ShapeSpec, rng, amount: float = 0.10) -> ShapeSpec:
    """Per-instance variation of a base shape (same part skeleton)."""
    parts = []
    for p in shape.parts:
        parts.append(PartSpec(
            p.label, p.kind,
            p.cx + rng.uniform(-0.02, 0.02), p.cy + rng.uniform(-0.02, 0.02),
            p.w * rng.uniform(1 - amount, 1 + amount),
            p.h * rng.uniform(1 - amount, 1 + amount),
            p.angle + rng.uniform(-0.08, 0.08), p.depth))
    return ShapeSpec(shape.category, shape.shape_id + "*", tuple(parts))


def sample_view(rng, texture_seed: int, cfg: "GenConfig") -> RenderParams:
    sx = rng.uniform(*cfg.scale_range)
    return RenderParams(
        rotation=rng.uniform(-cfg.rotation_range, cfg.rotation_range),
        scale=(sx, sx * rng.uniform(0.92, 1.08)),
        translation=(rng.uniform(-cfg.translation_px, cfg.translation_px),
                     rng.uniform(-cfg.translation_px, cfg.translation_px)),
        shear=rng.uniform(-cfg.shear_range, cfg.shear_range),
        texture_seed=texture_seed,
        lighting_gain=rng.uniform(0.85, 1.15),
        clutter_density=rng.uniform(0.5, 1.5) * cfg.clutter,
        noise_level=cfg.noise)


@dataclass
class GenConfig:
    categories: list = field(default_factory=lambda: ["wagon", "rocket"])
    shapes_per_category: int = 5
    instances_per_category: int = 120
    val_instances_per_category: int = 12
    image_size: int = 64
    retrieval_k: int = 20
    num_quartets: int = 200
    seed: int = 0
    rotation_range: float = 1.1
    scale_range: tuple = (0.65, 1.35)
    translation_px: float = 12.0
    shear_range: float = 0.12
    jitter: float = 0.10
    clutter: float = 1.0
    noise: float = 0.02
    db_views_per_shape: int = 8

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by the HOG cell (8)")
        if self.val_instances_per_category >= self.instances_per_category:
            raise ValueError("val split must leave at least one training instance")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "GenConfig":
        return cls(**raw)


@dataclass(frozen=True)
class Instance:
    instance_id: str
    category: str
    base_shape_id: str
    shape: ShapeSpec
    view: RenderParams


def build_instances(cfg: GenConfig, shapes_by_cat: dict) -> dict:
    """Per category, instances_per_category jittered/textured instances."""
    out = {}
    for cat in cfg.categories:
        shapes = shapes_by_cat[cat]
        items = []
        for i in range(cfg.instances_per_category):
            rng = np.random.default_rng([cfg.seed, hash_name(cat), 1000 + i])
            base = shapes[int(rng.integers(0, len(shapes)))]
            inst_shape = jitter_shape(base, rng, cfg.jitter)
            tex_seed = int(rng.integers(0, 2 ** 31))
            view = sample_view(rng, tex_seed, cfg)
            items.append(Instance(f"{cat}_i{i:03d}", cat, base.shape_id,
                                  inst_shape, view))
        out[cat] = items
    return out


@dataclass
class QuartetRecord:
    category: str
    shape: ShapeSpec
    inst1: Instance
    inst2: Instance

    @property
    def view1(self) -> RenderParams:
        return self.inst1.view

    @property
    def view2(self) -> RenderParams:
        return self.inst2.view


def rank_shapes_by_hog(img: np.ndarray, shapes, view: RenderParams, size: int):
    """Distances from img to each shape's clean render under `view`."""
    d_img = hog_descriptor(img)
    dists = []
    for s in shapes:
        ref, _, _ = render_view(s, view, "clean", size)
        dists.append(hog_distance(d_img, hog_descriptor(ref)))
    order = np.argsort(dists, kind="stable")
    return [(shapes[i].shape_id, dists[i]) for i in order]


def retrieve_shape_matches(instance: Instance, shapes, size: int, k: int):
    """K nearest base shapes by HOG distance, rendered at the instance view."""
    img, _, _ = render_view(instance.shape, instance.view, "textured", size)
    return rank_shapes_by_hog(img, shapes, instance.view, size)[:k]


def build_quartets(shapes, instances, k: int, n_max: int, size: int):
    """Pair same-category instances whose retrieval sets share a shape.

    For each unordered train-instance pair, the quartet uses the common
    retrieved shape with the smallest summed distance; output is capped
    at n_max in deterministic enumeration order.
    """
    by_id = {s.shape_id: s for s in shapes}
    cats = sorted({inst.category for inst in instances})
    matches = {}
    for inst in instances:
        cat_shapes = [s for s in shapes if s.category == inst.category]
        matches[inst.instance_id] = dict(
            retrieve_shape_matches(inst, cat_shapes, size, k))
    per_cat = {cat: [] for cat in cats}
    for cat in cats:
        cat_inst = [i for i in instances if i.category == cat]
        for a in range(len(cat_inst)):
            for b in range(a + 1, len(cat_inst)):
                i1, i2 = cat_inst[a], cat_inst[b]
                m1, m2 = matches[i1.instance_id], matches[i2.instance_id]
                common = set(m1) & set(m2)
                if not common:
                    continue
                best = min(sorted(common), key=lambda sid: m1[sid] + m2[sid])
                per_cat[cat].append(QuartetRecord(cat, by_id[best], i1, i2))
    # round-robin across categories so a cap keeps the mix balanced
    quartets = []
    idx = 0
    while len(quartets) < n_max and any(idx < len(v) for v in per_cat.values()):
        for cat in cats:
            if idx < len(per_cat[cat]) and len(quartets) < n_max:
                quartets.append(per_cat[cat][idx])
        idx += 1
    return quartets


# ---------------------------------------------------------------------------
# dataset serialization


def _spec_to_dict(shape: ShapeSpec) -> dict:
    return {"category": shape.category, "shape_id": shape.shape_id,
            "parts": [asdict(p) for p in shape.parts]}


def _spec_from_dict(raw: dict) -> ShapeSpec:
    return ShapeSpec(raw["category"], raw["shape_id"],
                     tuple(PartSpec(**p) for p in raw["parts"]))


def _view_to_dict(view: RenderParams) -> dict:
    return asdict(view)


def _view_from_dict(raw: dict) -> RenderParams:
    raw = dict(raw)
    raw["scale"] = tuple(raw["scale"])
    raw["translation"] = tuple(raw["translation"])
    return RenderParams(**raw)


def save_image_png(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_label_png(path, labels: np.ndarray) -> None:
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_label_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.int32)


def _write_quartet(qroot: str, out_dir: str, qi: int, rec: QuartetRecord,
                   size: int) -> dict:
    qdir = os.path.join(qroot, f"q{qi:05d}")
    os.makedirs(qdir, exist_ok=True)
    renders = {
        "s1": render_view(rec.shape, rec.view1, "clean", size),
        "s2": render_view(rec.shape, rec.view2, "clean", size),
        "r1": render_view(rec.inst1.shape, rec.view1, "textured", size),
        "r2": render_view(rec.inst2.shape, rec.view2, "textured", size),
    }
    kps = {}
    for tag, (img, labels, _) in renders.items():
        save_image_png(os.path.join(qdir, f"{tag}.png"), img)
        save_label_png(os.path.join(qdir, f"parts_{tag}.png"), labels)
        owner = {"s1": (rec.shape, rec.view1), "s2": (rec.shape, rec.view2),
                 "r1": (rec.inst1.shape, rec.view1),
                 "r2": (rec.inst2.shape, rec.view2)}[tag]
        kps[tag] = keypoints_for(owner[0], owner[1], size, labels)
    flow, mask = gt_flow_between(rec.shape, rec.view1, rec.shape, rec.view2,
                                 size, renders["s1"][1], renders["s2"][1])
    write_flo(os.path.join(qdir, "gt_flow.flo"), flow)
    write_mask_png(os.path.join(qdir, "gt_mask.png"), mask)
    with open(os.path.join(qdir, "keypoints.json"), "w") as fh:
        json.dump(kps, fh, indent=1, sort_keys=True)
    with open(os.path.join(qdir, "meta.json"), "w") as fh:
        json.dump({
            "category": rec.category,
            "shape": _spec_to_dict(rec.shape),
            "inst1": {"instance_id": rec.inst1.instance_id,
                      "shape": _spec_to_dict(rec.inst1.shape),
                      "view": _view_to_dict(rec.view1)},
            "inst2": {"instance_id": rec.inst2.instance_id,
                      "shape": _spec_to_dict(rec.inst2.shape),
                      "view": _view_to_dict(rec.view2)},
        }, fh, indent=1, sort_keys=True)
    return {"dir": os.path.relpath(qdir, out_dir), "category": rec.category,
            "shape_id": rec.shape.shape_id,
            "inst1": rec.inst1.instance_id, "inst2": rec.inst2.instance_id}


def generate_dataset(cfg: GenConfig, out_dir: str, jobs: int = 1) -> dict:
    """Write the full dataset tree and return the manifest dict.

    Quartets are independent, so with jobs > 1 their rendering fans out
    over a thread pool; outputs are identical regardless of parallelism.
    """
    os.makedirs(out_dir, exist_ok=True)
    size = cfg.image_size
    shapes_by_cat = {cat: [make_base_shape(cat, i, cfg.seed)
                           for i in range(cfg.shapes_per_category)]
                     for cat in cfg.categories}
    all_shapes = [s for cat in cfg.categories for s in shapes_by_cat[cat]]
    instances = build_instances(cfg, shapes_by_cat)
    train_inst, val_inst = [], []
    for cat in cfg.categories:
        items = instances[cat]
        train_inst.extend(items[:len(items) - cfg.val_instances_per_category])
        val_inst.extend(items[len(items) - cfg.val_instances_per_category:])

    quartets = build_quartets(all_shapes, train_inst, cfg.retrieval_k,
                              cfg.num_quartets, size)

    manifest = {
        "format_version": 1,
        "config": cfg.to_dict(),
        "image_size": size,
        "categories": list(cfg.categories),
        "quartets": [],
        "val_images": [],
        "shape_db": [],
    }

    qroot = os.path.join(out_dir, "quartets")
    os.makedirs(qroot, exist_ok=True)
    if jobs and jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(
                lambda a: _write_quartet(qroot, out_dir, a[0], a[1], size),
                enumerate(quartets)))
    else:
        entries = [_write_quartet(qroot, out_dir, qi, rec, size)
                   for qi, rec in enumerate(quartets)]
    manifest["quartets"].extend(entries)

    vroot = os.path.join(out_dir, "val_images")
    os.makedirs(vroot, exist_ok=True)
    for inst in val_inst:
        vdir = os.path.join(vroot, inst.instance_id)
        os.makedirs(vdir, exist_ok=True)
        img, labels, _ = render_view(inst.shape, inst.view, "textured", size)
        save_image_png(os.path.join(vdir, "img.png"), img)
        save_label_png(os.path.join(vdir, "parts.png"), labels)
        with open(os.path.join(vdir, "keypoints.json"), "w") as fh:
            json.dump(keypoints_for(inst.shape, inst.view, size, labels), fh,
                      indent=1, sort_keys=True)
        with open(os.path.join(vdir, "meta.json"), "w") as fh:
            json.dump({"instance_id": inst.instance_id, "category": inst.category,
                       "base_shape_id": inst.base_shape_id,
                       "shape": _spec_to_dict(inst.shape),
                       "view": _view_to_dict(inst.view)}, fh, indent=1,
                      sort_keys=True)
        manifest["val_images"].append({
            "dir": os.path.relpath(vdir, out_dir),
            "category": inst.category, "instance_id": inst.instance_id})

    dbroot = os.path.join(out_dir, "shape_db")
    os.makedirs(dbroot, exist_ok=True)
    for cat in cfg.categories:
        cdir = os.path.join(dbroot, cat)
        os.makedirs(cdir, exist_ok=True)
        for shape in shapes_by_cat[cat]:
            for v in range(cfg.db_views_per_shape):
                rot = -cfg.rotation_range + (2 * cfg.rotation_range) * (
                    v % 4) / 3.0
                sc = 0.9 if v < 4 else 1.1
                view = RenderParams(rotation=rot, scale=(sc, sc))
                img, labels, _ = render_view(shape, view, "clean", size)
                prefix = f"{shape.shape_id}_v{v}"
                save_image_png(os.path.join(cdir, prefix + ".png"), img)
                write_mask_png(os.path.join(cdir, prefix + "_mask.png"),
                               (labels > 0).astype(np.float64))
                manifest["shape_db"].append({
                    "category": cat, "shape_id": shape.shape_id, "view_idx": v,
                    "png": os.path.relpath(os.path.join(cdir, prefix + ".png"),
                                           out_dir),
                    "mask": os.path.relpath(
                        os.path.join(cdir, prefix + "_mask.png"), out_dir),
                    "view": _view_to_dict(view)})

    blob = json.dumps(manifest["config"], sort_keys=True).encode()
    manifest["config_hash"] = hashlib.sha256(blob).hexdigest()
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


class QuartetDataset:
    """Read-only view of a generated dataset directory, with caching."""

    def __init__(self, root: str):
        self.root = root
        with open(os.path.join(root, "manifest.json")) as fh:
            self.manifest = json.load(fh)
        self.image_size = self.manifest["image_size"]
        self._img_cache = {}
        self._gt_cache = {}
        self._meta_cache = {}
        self._pair_flow_cache = {}

    @property
    def num_quartets(self) -> int:
        return len(self.manifest["quartets"])

    def quartet_dir(self, i: int) -> str:
        return os.path.join(self.root, self.manifest["quartets"][i]["dir"])

    def load_quartet_images(self, i: int):
        if i not in self._img_cache:
            d = self.quartet_dir(i)
            self._img_cache[i] = tuple(
                load_image_png(os.path.join(d, f"{tag}.png"))
                for tag in ("s1", "r1", "r2", "s2"))
        return self._img_cache[i]

    def load_gt_edge(self, i: int) -> GroundTruthEdge:
        if i not in self._gt_cache:
            d = self.quartet_dir(i)
            flow = read_flo(os.path.join(d, "gt_flow.flo")).astype(np.float64)
            mask = np.round(read_mask_png(os.path.join(d, "gt_mask.png")))
            self._gt_cache[i] = GroundTruthEdge(FlowField(Tensor(flow)), mask)
        return self._gt_cache[i]

    def quartet_meta(self, i: int) -> dict:
        if i not in self._meta_cache:
            with open(os.path.join(self.quartet_dir(i), "meta.json")) as fh:
                raw = json.load(fh)
            self._meta_cache[i] = {
                "category": raw["category"],
                "shape": _spec_from_dict(raw["shape"]),
                "inst1_shape": _spec_from_dict(raw["inst1"]["shape"]),
                "inst2_shape": _spec_from_dict(raw["inst2"]["shape"]),
                "view1": _view_from_dict(raw["inst1"]["view"]),
                "view2": _view_from_dict(raw["inst2"]["view"]),
            }
        return self._meta_cache[i]

    def _image_geometry(self, i: int, tag: str):
        m = self.quartet_meta(i)
        return {
            "s1": (m["shape"], m["view1"]),
            "s2": (m["shape"], m["view2"]),
            "r1": (m["inst1_shape"], m["view1"]),
            "r2": (m["inst2_shape"], m["view2"]),
        }[tag]

    def gt_pair_flow(self, i: int, edge: str) -> np.ndarray:
        """Exact dense flow between any two images of quartet i.

        edge concatenates two of s1|s2|r1|r2, e.g. "r1r2" or "s1s2";
        foreground pixels carry the part-wise map, background is zero.
        """
        key = (i, edge)
        if key not in self._pair_flow_cache:
            tags = [edge[k:k + 2] for k in range(0, 4, 2)]
            if len(edge) != 4 or any(t not in ("s1", "s2", "r1", "r2")
                                     for t in tags) or tags[0] == tags[1]:
                raise ValueError(f"unknown edge {edge!r}")
            (sa, va) = self._image_geometry(i, tags[0])
            (sb, vb) = self._image_geometry(i, tags[1])
            flow, _ = gt_flow_between(sa, va, sb, vb, self.image_size)
            self._pair_flow_cache[key] = flow
        return self._pair_flow_cache[key]

    def load_quartet_keypoints(self, i: int) -> dict:
        with open(os.path.join(self.quartet_dir(i), "keypoints.json")) as fh:
            return json.load(fh)

    def val_records(self):
        """[(category, image, keypoints, label map, meta dict)] for the val split."""
        out = []
        for rec in self.manifest["val_images"]:
            d = os.path.join(self.root, rec["dir"])
            with open(os.path.join(d, "keypoints.json")) as fh:
                kps = json.load(fh)
            with open(os.path.join(d, "meta.json")) as fh:
                meta = json.load(fh)
            out.append((rec["category"], load_image_png(os.path.join(d, "img.png")),
                        kps, load_label_png(os.path.join(d, "parts.png")), meta))
        return out

    def shape_db_records(self):
        """[(category, image, mask, shape_id)] for segmentation transfer."""
        out = []
        for rec in self.manifest["shape_db"]:
            img = load_image_png(os.path.join(self.root, rec["png"]))
            mask = np.round(read_mask_png(os.path.join(self.root, rec["mask"])))
            out.append((rec["category"], img, mask, rec["shape_id"]))
        return out
