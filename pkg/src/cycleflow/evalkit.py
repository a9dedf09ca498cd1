"""Evaluation protocols: keypoint-transfer PCK, matchability accuracy,
shape-database segmentation transfer, and flow visualization.

All evaluation is read-only over a frozen parameter set.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from . import autodiff as ad
from .autodiff import Tensor
from .corrnet import NetConfig, ParamSet, forward_flow_batch, forward_pair
from .quartetgen import hog_descriptor, hog_distance
from .warpcomp import FlowField, sample_flow, warp_image
from . import warpcomp as wc


@dataclass
class PCKResult:
    alpha: float
    threshold_px: float
    per_category: dict
    counts: dict
    mean: float
    overall: float
    dump: list = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "alpha": self.alpha, "threshold_px": self.threshold_px,
            "per_category": self.per_category, "counts": self.counts,
            "mean": self.mean, "overall": self.overall}, indent=1, sort_keys=True)


@dataclass
class MatchabilityResult:
    threshold: float
    per_category: dict
    counts: dict
    mean: float
    overall: float
    chance_level: float = 0.5

    def to_json(self) -> str:
        return json.dumps({
            "threshold": self.threshold, "per_category": self.per_category,
            "counts": self.counts, "mean": self.mean, "overall": self.overall,
            "chance_level": self.chance_level}, indent=1, sort_keys=True)


def build_eval_pairs(val_records):
    """All ordered same-category pairs of held-out instances."""
    pairs = []
    for i, a in enumerate(val_records):
        for j, b in enumerate(val_records):
            if i != j and a[0] == b[0]:
                pairs.append((a, b))
    return pairs


def pck_threshold(H: int, W: int, alpha: float) -> float:
    return alpha * max(H, W)


def transfer_keypoints(flow: FlowField, kps_src: dict) -> dict:
    """Map named source keypoints through the flow (bilinear lookup)."""
    names = [n for n, v in kps_src.items() if v is not None]
    if not names:
        return {}
    pts = np.array([kps_src[n] for n in names], dtype=np.float64)
    with ad.no_grad():
        moved = pts + sample_flow(flow, pts).data
    return {n: moved[i] for i, n in enumerate(names)}


def _flow_fields_for_pairs(ps, cfg, pairs):
    imgs_a = [a[1] for a, b in pairs]
    imgs_b = [b[1] for a, b in pairs]
    with ad.no_grad():
        flows = forward_flow_batch(ps, cfg, imgs_a, imgs_b)
    return [FlowField(Tensor(np.ascontiguousarray(
        flows.data[i].transpose(1, 2, 0)))) for i in range(len(pairs))]


def pck(pairs, ps: ParamSet, cfg: NetConfig, alpha: float = 0.1,
        flows=None) -> PCKResult:
    """Percentage of correctly transferred keypoints over ordered pairs.

    A keypoint counts when annotated in both images; a transfer is
    correct iff the prediction lands inside the image and within
    alpha * max(H, W) pixels of the target annotation (ties correct).
    `flows` optionally supplies precomputed flow fields per pair.
    """
    H = W = cfg.input_size[0]
    thr = pck_threshold(H, W, alpha)
    if flows is None:
        flows = _flow_fields_for_pairs(ps, cfg, pairs)
    correct: dict = {}
    total: dict = {}
    dump = []
    for (rec_a, rec_b), flow in zip(pairs, flows):
        cat, _, kps_a = rec_a[0], rec_a[1], rec_a[2]
        kps_b = rec_b[2]
        moved = transfer_keypoints(flow, kps_a)
        for name, pred in moved.items():
            tgt = kps_b.get(name)
            if tgt is None:
                continue
            in_frame = 1.0 <= pred[0] <= W and 1.0 <= pred[1] <= H
            dist = float(np.hypot(pred[0] - tgt[0], pred[1] - tgt[1]))
            ok = bool(in_frame and dist <= thr)
            correct[cat] = correct.get(cat, 0) + int(ok)
            total[cat] = total.get(cat, 0) + 1
            dump.append({"category": cat, "keypoint": name,
                         "pred": [float(pred[0]), float(pred[1])],
                         "target": [float(tgt[0]), float(tgt[1])],
                         "threshold": thr, "H": H, "W": W, "correct": ok})
    per_cat = {c: correct[c] / total[c] for c in sorted(total)}
    n_all = sum(total.values())
    overall = sum(correct.values()) / n_all if n_all else 0.0
    mean = float(np.mean(list(per_cat.values()))) if per_cat else 0.0
    return PCKResult(alpha=alpha, threshold_px=thr, per_category=per_cat,
                     counts=dict(sorted(total.items())), mean=mean,
                     overall=overall, dump=dump)


def identity_flow_pck(pairs, size: int, alpha: float = 0.1) -> PCKResult:
    """Baseline: transfer every keypoint with the zero flow."""
    zero = FlowField(Tensor(np.zeros((size, size, 2))))
    return pck(pairs, None, _SizeOnly(size), alpha=alpha,
               flows=[zero] * len(pairs))


class _SizeOnly:
    """Duck-typed stand-in carrying just input_size for flow-less pck runs."""

    def __init__(self, size: int):
        self.input_size = (size, size)


def matchable_ground_truth(lab_src: np.ndarray, lab_tgt: np.ndarray) -> np.ndarray:
    """A source pixel is matchable iff its (nonzero) part label occurs
    anywhere in the target's label map; background is unmatchable."""
    present = np.unique(lab_tgt[lab_tgt > 0])
    return np.isin(lab_src, present) & (lab_src > 0)


def matchability_accuracy_maps(pred: np.ndarray, lab_src: np.ndarray,
                               lab_tgt: np.ndarray,
                               threshold: float = 0.5) -> float:
    """Pixel accuracy of (pred > threshold) against the label-based truth."""
    gt = matchable_ground_truth(lab_src, lab_tgt)
    return float(((pred > threshold) == gt).mean())


def matchability_accuracy(pairs, ps: ParamSet, cfg: NetConfig,
                          threshold: float = 0.5,
                          predictor=None) -> MatchabilityResult:
    """Matchability classification accuracy over ordered pairs.

    pairs hold label maps at index 3 of each record.  `predictor`
    optionally replaces the network with a callable (img_a, img_b) ->
    [H,W] probability map (used for constant-baseline checks).
    """
    acc: dict = {}
    cnt: dict = {}
    for rec_a, rec_b in pairs:
        cat = rec_a[0]
        if rec_a[3] is None or rec_b[3] is None:
            raise ValueError("matchability evaluation needs part label maps")
        if predictor is not None:
            pred = predictor(rec_a[1], rec_b[1])
        else:
            with ad.no_grad():
                _, mm = forward_pair(ps, cfg, rec_a[1], rec_b[1])
            pred = mm.values
        a = matchability_accuracy_maps(pred, rec_a[3], rec_b[3], threshold)
        acc[cat] = acc.get(cat, 0.0) + a
        cnt[cat] = cnt.get(cat, 0) + 1
    per_cat = {c: acc[c] / cnt[c] for c in sorted(cnt)}
    n_all = sum(cnt.values())
    overall = sum(acc.values()) / n_all if n_all else 0.0
    mean = float(np.mean(list(per_cat.values()))) if per_cat else 0.0
    return MatchabilityResult(threshold=threshold, per_category=per_cat,
                              counts=dict(sorted(cnt.items())), mean=mean,
                              overall=overall)


def segmentation_transfer(query_img: np.ndarray, db_records, ps: ParamSet,
                          cfg: NetConfig):
    """Retrieve the best-aligned rendered view and carry its mask over.

    For each database view, the net predicts the flow on the view's grid
    pointing into the query; warping the query by that flow puts it in
    the view's frame, where the HOG distance to the render scores the
    alignment.  The winner's foreground mask transfers back through the
    same correspondence by nearest-neighbor lookup.

    Returns (query mask, best index, distances).
    """
    if not db_records:
        raise ValueError("segmentation transfer needs a nonempty shape database")
    H = W = cfg.input_size[0]
    views = [r[1] for r in db_records]
    with ad.no_grad():
        flows = forward_flow_batch(ps, cfg, views, [query_img] * len(views))
    dists = []
    fields = []
    for i in range(len(db_records)):
        F = FlowField(Tensor(np.ascontiguousarray(flows.data[i].transpose(1, 2, 0))))
        fields.append(F)
        with ad.no_grad():
            warped = warp_image(Tensor(query_img), F).data
        dists.append(hog_distance(hog_descriptor(warped), hog_descriptor(views[i])))
    best = int(np.argmin(dists))
    F = fields[best]
    mask_view = db_records[best][2]
    grid = wc.pixel_grid(H, W) + F.values
    qx = np.rint(grid[..., 0]).astype(int)
    qy = np.rint(grid[..., 1]).astype(int)
    ok = (qx >= 1) & (qx <= W) & (qy >= 1) & (qy <= H) & (mask_view > 0)
    out = np.zeros((H, W))
    out[qy[ok] - 1, qx[ok] - 1] = 1.0
    return out, best, np.array(dists)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = float(((a > 0) & (b > 0)).sum())
    union = float(((a > 0) | (b > 0)).sum())
    return inter / union if union else 1.0


# ---------------------------------------------------------------------------
# visualization


def make_colorwheel() -> np.ndarray:
    """Standard 55-color optical-flow wheel (RY/YG/GC/CB/BM/MR ramps)."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0
    wheel[0:RY, 0] = 255
    wheel[0:RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel


def flow_to_rgb(flow: np.ndarray, max_mag=None) -> np.ndarray:
    """Hue encodes direction, saturation magnitude; white at zero flow.

    Magnitudes are normalized by max_mag (default: the field's maximum),
    so scaling flow and normalization together leaves the image unchanged.
    """
    u = np.asarray(flow[..., 0], dtype=np.float64)
    v = np.asarray(flow[..., 1], dtype=np.float64)
    rad = np.hypot(u, v)
    if max_mag is None:
        max_mag = rad.max()
    denom = max_mag if max_mag > 0 else 1.0
    u = u / denom
    v = v / denom
    rad = np.hypot(u, v)
    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.zeros(u.shape + (3,), dtype=np.uint8)
    for ch in range(3):
        col0 = wheel[k0, ch] / 255.0
        col1 = wheel[k1, ch] / 255.0
        col = (1 - f) * col0 + f * col1
        small = rad <= 1
        col[small] = 1 - rad[small] * (1 - col[small])
        col[~small] *= 0.75
        img[..., ch] = np.floor(255 * col)
    return img


def visualize_flow(flow, out_path, max_mag=None) -> np.ndarray:
    """Write the color-wheel rendering of a flow field to a PNG."""
    arr = flow.values if isinstance(flow, FlowField) else np.asarray(flow)
    if not np.isfinite(arr).all():
        raise ad.NonFiniteError("visualize_flow: non-finite flow")
    rgb = flow_to_rgb(arr, max_mag=max_mag)
    Image.fromarray(rgb).save(out_path)
    return rgb


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def cycle_trajectory_overlay(images, flows, gt_edge, out_path, n_points: int = 12,
                             seed: int = 0) -> None:
    """Panel plot of a quartet with sampled transit trajectories.

    images = (s1, r1, r2, s2); flows = (F_s1r1, F_r1r2, F_r2s2).  Points
    sampled on the supervised edge travel s1 -> r1 -> r2 -> s2 (dashed
    hops drawn as lines); the known target in s2 is marked for
    comparison.
    """
    s1, r1, r2, s2 = [_to_uint8(im) for im in images]
    H, W = s1.shape[:2]
    canvas = Image.new("RGB", (2 * W + 30, 2 * H + 30), (255, 255, 255))
    offsets = {"s1": (10, 10), "r1": (W + 20, 10),
               "r2": (W + 20, H + 20), "s2": (10, H + 20)}
    for tag, im in (("s1", s1), ("r1", r1), ("r2", r2), ("s2", s2)):
        canvas.paste(Image.fromarray(im), offsets[tag])
    draw = ImageDraw.Draw(canvas)
    rng = np.random.default_rng(seed)
    ys, xs = np.nonzero(gt_edge.mask)
    if len(xs) == 0:
        canvas.save(out_path)
        return
    sel = rng.choice(len(xs), size=min(n_points, len(xs)), replace=False)
    colors = [(220, 30, 30), (30, 120, 220), (30, 170, 60), (200, 140, 20),
              (150, 60, 200), (0, 160, 160)]

    def to_canvas(pt, tag):
        ox, oy = offsets[tag]
        return (ox + pt[0] - 1.0, oy + pt[1] - 1.0)

    with ad.no_grad():
        for idx, si in enumerate(sel):
            p0 = np.array([xs[si] + 1.0, ys[si] + 1.0])
            color = colors[idx % len(colors)]
            p1 = p0 + sample_flow(flows[0], p0[None]).data[0]
            p2 = p1 + sample_flow(flows[1], p1[None]).data[0]
            p3 = p2 + sample_flow(flows[2], p2[None]).data[0]
            gt = p0 + sample_flow(gt_edge.flow, p0[None]).data[0]
            path = [to_canvas(p0, "s1"), to_canvas(p1, "r1"),
                    to_canvas(p2, "r2"), to_canvas(p3, "s2")]
            for a, b in zip(path[:-1], path[1:]):
                draw.line([a, b], fill=color, width=1)
            for pt in path:
                draw.ellipse([pt[0] - 1.5, pt[1] - 1.5, pt[0] + 1.5, pt[1] + 1.5],
                             fill=color)
            gpt = to_canvas(gt, "s2")
            draw.ellipse([gpt[0] - 2.5, gpt[1] - 2.5, gpt[0] + 2.5, gpt[1] + 2.5],
                         outline=color, width=1)
    canvas.save(out_path)
