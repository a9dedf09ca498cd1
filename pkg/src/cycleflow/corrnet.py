"""Encoder / dual-decoder conv net mapping ordered image pairs to a dense
flow field and a matchability map.

One shared 8-layer conv encoder runs on each image; each decoder takes
the channel-concatenated bottleneck features of (source, target) through
9 transposed-conv layers back to input resolution.  ReLU follows every
layer except the decoder heads: the flow head is linear with 2 output
channels (pixel offsets), the matchability head ends in a sigmoid.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .warpcomp import FlowField, MatchMap

VALID_SIZES = (32, 64, 128)

# desk-scale default widths; the 8/9 layer counts and the stride pattern
# are the architecture's fixed skeleton, the widths are overridable
DEFAULT_ENCODER_CHANNELS = [4, 4, 8, 8, 16, 16, 32, 32]
DEFAULT_ENCODER_STRIDES = [1, 2, 1, 2, 1, 2, 1, 2]
DEFAULT_FLOW_DECODER_CHANNELS = [32, 32, 16, 16, 8, 8, 4, 4, 2]
DEFAULT_MATCH_DECODER_CHANNELS = [32, 32, 16, 16, 8, 8, 4, 4, 1]
DEFAULT_DECODER_STRIDES = [2, 1, 2, 1, 2, 1, 2, 1, 1]


@dataclass
class NetConfig:
    input_size: tuple = (64, 64)
    encoder_channels: list = field(default_factory=lambda: list(DEFAULT_ENCODER_CHANNELS))
    flow_decoder_channels: list = field(
        default_factory=lambda: list(DEFAULT_FLOW_DECODER_CHANNELS))
    match_decoder_channels: list = field(
        default_factory=lambda: list(DEFAULT_MATCH_DECODER_CHANNELS))
    encoder_strides: list = field(default_factory=lambda: list(DEFAULT_ENCODER_STRIDES))
    decoder_strides: list = field(default_factory=lambda: list(DEFAULT_DECODER_STRIDES))

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        H, W = self.input_size
        if H != W or H not in VALID_SIZES:
            raise ValueError(f"input_size must be square with side in {VALID_SIZES}")
        if len(self.encoder_channels) != 8 or len(self.encoder_strides) != 8:
            raise ValueError("encoder must have exactly 8 layers")
        for ch in (self.flow_decoder_channels, self.match_decoder_channels):
            if len(ch) != 9:
                raise ValueError("each decoder must have exactly 9 layers")
        if len(self.decoder_strides) != 9:
            raise ValueError("decoder_strides must list 9 entries")
        if self.flow_decoder_channels[-1] != 2:
            raise ValueError("flow decoder must end with 2 channels")
        if self.match_decoder_channels[-1] != 1:
            raise ValueError("matchability decoder must end with 1 channel")
        for s in self.encoder_strides + self.decoder_strides:
            if s not in (1, 2):
                raise ValueError("strides must be 1 or 2")
        down = int(np.prod(self.encoder_strides))
        up = int(np.prod(self.decoder_strides))
        if down != up:
            raise ValueError(
                f"stride products must match (down {down}, up {up}) so output "
                "resolution equals input resolution")
        if H % down != 0:
            raise ValueError("input size must be divisible by the total stride")

    @property
    def bottleneck_size(self) -> int:
        return self.input_size[0] // int(np.prod(self.encoder_strides))

    def layer_plan(self):
        """[(name, in_ch, out_ch, stride, kind)] for all 26 layers."""
        plan = []
        cin = 3
        for i, (c, s) in enumerate(zip(self.encoder_channels, self.encoder_strides)):
            plan.append((f"enc{i + 1}", cin, c, s, "conv"))
            cin = c
        for head, chans in (("flow", self.flow_decoder_channels),
                            ("match", self.match_decoder_channels)):
            cin = 2 * self.encoder_channels[-1]
            for i, (c, s) in enumerate(zip(chans, self.decoder_strides)):
                plan.append((f"{head}{i + 1}", cin, c, s, "tconv"))
                cin = c
        return plan

    def param_count(self) -> int:
        n = 0
        for _, cin, cout, _, _ in self.layer_plan():
            n += cin * cout * 9 + cout
        return n

    def to_json(self) -> str:
        return json.dumps({
            "input_size": list(self.input_size),
            "encoder_channels": self.encoder_channels,
            "flow_decoder_channels": self.flow_decoder_channels,
            "match_decoder_channels": self.match_decoder_channels,
            "encoder_strides": self.encoder_strides,
            "decoder_strides": self.decoder_strides,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetConfig":
        raw = json.loads(text)
        kwargs = {k: raw[k] for k in (
            "input_size", "encoder_channels", "flow_decoder_channels",
            "match_decoder_channels", "encoder_strides", "decoder_strides") if k in raw}
        return cls(**kwargs)


class ParamSet:
    """Named network parameters plus per-parameter ADAM moment buffers.

    Checkpoints round-trip bit exactly; the step counter rides along as a
    scalar record.
    """

    def __init__(self, params: "OrderedDict[str, Tensor]"):
        self.params = params
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    @classmethod
    def initialize(cls, cfg: NetConfig, seed: int = 0) -> "ParamSet":
        """He-scaled conv weights, zero biases; decoder heads start at
        exactly zero so the initial flow is 0 and matchability is 0.5."""
        rng = np.random.default_rng(seed)
        params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, cin, cout, _, kind in cfg.layer_plan():
            shape = (cout, cin, 3, 3) if kind == "conv" else (cin, cout, 3, 3)
            if name in ("flow9", "match9"):
                w = np.zeros(shape)
            else:
                w = rng.normal(size=shape) * np.sqrt(2.0 / (cin * 9))
            params[f"{name}.w"] = Tensor(w, requires_grad=True)
            params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)
        return cls(params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.params.values())

    def save(self, path) -> None:
        arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for k, t in self.params.items():
            arrays[f"param/{k}"] = t.data
        for k in self.params:
            arrays[f"adam_m/{k}"] = self.m[k]
            arrays[f"adam_v/{k}"] = self.v[k]
        arrays["adam_t"] = np.asarray(float(self.t))
        ad.save_checkpoint(path, arrays)

    @classmethod
    def load(cls, path) -> "ParamSet":
        arrays = ad.load_checkpoint(path)
        params: "OrderedDict[str, Tensor]" = OrderedDict()
        for key, arr in arrays.items():
            if key.startswith("param/"):
                params[key[len("param/"):]] = Tensor(arr, requires_grad=True)
        if not params:
            raise ad.CheckpointError(f"{path}: no parameters found")
        ps = cls(params)
        for key, arr in arrays.items():
            if key.startswith("adam_m/"):
                ps.m[key[len("adam_m/"):]] = arr
            elif key.startswith("adam_v/"):
                ps.v[key[len("adam_v/"):]] = arr
        ps.t = int(arrays.get("adam_t", np.asarray(0.0)))
        return ps


def _image_batch(images) -> Tensor:
    """Stack [H,W,3] float images into a planar [N,3,H,W] tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError("images must be [H,W,3]")
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def encode(ps: ParamSet, cfg: NetConfig, imgs: Tensor) -> Tensor:
    """Shared feature encoder: 8 conv+ReLU layers on [N,3,H,W]."""
    if imgs.data.shape[2:] != cfg.input_size:
        raise ValueError(
            f"encode: expected {cfg.input_size} input, got {imgs.data.shape[2:]}")
    h = imgs
    for i, s in enumerate(cfg.encoder_strides):
        h = ad.relu(ad.conv2d(h, ps[f"enc{i + 1}.w"], ps[f"enc{i + 1}.b"], s))
    return h


def _decode(ps: ParamSet, cfg: NetConfig, head: str, src: Tensor, tgt: Tensor) -> Tensor:
    h = ad.concat_channels([src, tgt])
    for i, s in enumerate(cfg.decoder_strides):
        h = ad.tconv2d(h, ps[f"{head}{i + 1}.w"], ps[f"{head}{i + 1}.b"], s)
        if i < 8:
            h = ad.relu(h)
    return h


def decode_flow(ps: ParamSet, cfg: NetConfig, src: Tensor, tgt: Tensor) -> Tensor:
    """[N,2,H,W] pixel offsets from concatenated bottleneck features."""
    return _decode(ps, cfg, "flow", src, tgt)


def decode_match(ps: ParamSet, cfg: NetConfig, src: Tensor, tgt: Tensor) -> Tensor:
    """[N,1,H,W] matchability probabilities, strictly inside (0,1)."""
    return ad.sigmoid(_decode(ps, cfg, "match", src, tgt))


def flow_to_field(flow_batch: Tensor, n: int) -> FlowField:
    """Batch element n of a [N,2,H,W] flow tensor as a [H,W,2] FlowField."""
    return FlowField(ad.permute(ad.index_batch(flow_batch, n), (1, 2, 0)))


def match_to_map(match_batch: Tensor, n: int) -> MatchMap:
    """Batch element n of a [N,1,H,W] tensor as a [H,W] MatchMap."""
    sel = ad.index_batch(match_batch, n)
    H, W = sel.data.shape[1:]
    return MatchMap(ad.reshape(sel, (H, W)))


def forward_pair(ps: ParamSet, cfg: NetConfig, img_a, img_b):
    """Run the net on one ordered pair of [H,W,3] images."""
    batch = _image_batch([img_a, img_b])
    feat = encode(ps, cfg, batch)
    src = ad.slice0(feat, 0, 1)
    tgt = ad.slice0(feat, 1, 2)
    flow = decode_flow(ps, cfg, src, tgt)
    match = decode_match(ps, cfg, src, tgt)
    return flow_to_field(flow, 0), match_to_map(match, 0)


def forward_flow_batch(ps: ParamSet, cfg: NetConfig, imgs_a, imgs_b) -> Tensor:
    """Flow predictions [N,2,H,W] for N ordered pairs (no match head)."""
    n = len(imgs_a)
    feat = encode(ps, cfg, _image_batch(list(imgs_a) + list(imgs_b)))
    return decode_flow(ps, cfg, ad.slice0(feat, 0, n), ad.slice0(feat, n, 2 * n))


def cycle_forward(ps: ParamSet, cfg: NetConfig, quartet_images, gts,
                  with_match: bool = True):
    """Forward the three cycle pairs for a batch of quartets.

    quartet_images is a list of (s1, r1, r2, s2) image tuples; gts the
    matching GroundTruthEdge list.  All four images per quartet go
    through one shared-weight encoder pass; the flow decoder runs on the
    pair batch [(s1,r1) | (r1,r2) | (r2,s2)] and the matchability decoder
    only on (r1,r2), the cycle's learnable middle edge.

    Returns a CycleBatch ready for the losses.
    """
    from .objectives import CycleBatch, CycleItem

    n = len(quartet_images)
    if n != len(gts):
        raise ValueError("one ground-truth edge per quartet required")
    stacked = []
    for pos in range(4):  # order: all s1, all r1, all r2, all s2
        stacked.extend(q[pos] for q in quartet_images)
    feat = encode(ps, cfg, _image_batch(stacked))
    src = ad.slice0(feat, 0, 3 * n)          # s1 | r1 | r2
    tgt = ad.slice0(feat, n, 4 * n)          # r1 | r2 | s2
    flows = decode_flow(ps, cfg, src, tgt)
    if with_match:
        match = decode_match(ps, cfg, ad.slice0(feat, n, 2 * n),
                             ad.slice0(feat, 2 * n, 3 * n))
    items = []
    H, W = cfg.input_size
    ones = MatchMap(Tensor(np.ones((H, W))))
    for i in range(n):
        items.append(CycleItem(
            f_s1r1=flow_to_field(flows, i),
            f_r1r2=flow_to_field(flows, n + i),
            f_r2s2=flow_to_field(flows, 2 * n + i),
            m_r1r2=match_to_map(match, i) if with_match else ones,
            gt=gts[i]))
    return CycleBatch(items)
