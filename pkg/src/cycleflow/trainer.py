"""Two-phase optimization: flow-mimic initialization against an oracle
flow source, then cycle-consistency fine-tuning of the whole network.

Everything is deterministic given (seed, config, dataset): one generator
drives batch sampling, oracle noise is a fixed function of the pair
identity, and checkpoints carry the sampler state so a resumed run
replays the exact step sequence of an uninterrupted one.
"""
from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corrnet import NetConfig, ParamSet, cycle_forward, forward_flow_batch
from .objectives import MATCH_WEIGHT, TRUNCATION_PX, total_loss

EDGES = ("s1r1", "r1r2", "r2s2")
# the init phase regresses on every ordered image pair of a quartet,
# matching "random pairs" teachers that see all of them
INIT_PAIRS = tuple(f"{a}{b}" for a in ("s1", "s2", "r1", "r2")
                   for b in ("s1", "s2", "r1", "r2") if a != b)


class DivergenceError(RuntimeError):
    """Init-phase loss blew up (running mean grew 5x over 200 steps)."""


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradients; the last good checkpoint survives."""

    def __init__(self, message: str, last_checkpoint=None, last_step: int = 0):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.last_step = last_step


@dataclass
class TrainConfig:
    phase: str = "finetune"            # init | finetune
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    step_size: int = 2000              # iterations between lr halvings
    step_mult: float = 0.5
    max_iters: int = 8000
    batch_init: int = 40               # image pairs per init step
    batch_ft: int = 10                 # quartets per fine-tune step
    seed: int = 0
    match_weight: float = MATCH_WEIGHT
    truncation: float = TRUNCATION_PX
    grad_clip: float = 100.0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.phase not in ("init", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0,1)")
        if self.batch_init < 1 or self.batch_ft < 1:
            raise ValueError("batch sizes must be >= 1")

    def lr_at(self, t: int) -> float:
        """Staircase schedule: lr * mult^(t // step_size), exactly."""
        return self.lr * self.step_mult ** (t // self.step_size)

    @classmethod
    def for_phase(cls, phase: str, **overrides) -> "TrainConfig":
        defaults = {"init": {"max_iters": 1000}, "finetune": {"max_iters": 8000}}
        kwargs = dict(defaults[phase])
        kwargs.update(overrides)
        return cls(phase=phase, **kwargs)


class OracleFlowSource:
    """Teacher flows for the init phase.

    gt-noisy: the generator's exact pair flow plus i.i.d. Gaussian noise
    (sigma px), drawn once per (quartet, edge) so the teacher behaves
    like a fixed imperfect matcher rather than fresh noise every epoch.
    external-file: precomputed flows read from <dir>/<idx>_<edge>.flo.
    """

    def __init__(self, mode: str = "gt-noisy", sigma: float = 3.0,
                 seed: int = 0, flow_dir=None):
        if mode not in ("gt-noisy", "external-file"):
            raise ValueError(f"unknown oracle mode {mode!r}")
        if mode == "external-file" and flow_dir is None:
            raise ValueError("external-file oracle needs flow_dir")
        self.mode = mode
        self.sigma = float(sigma)
        self.seed = int(seed)
        self.flow_dir = flow_dir

    def flow_for(self, dataset, qidx: int, edge: str) -> np.ndarray:
        if edge not in INIT_PAIRS:
            raise ValueError(f"unknown edge {edge!r}")
        if self.mode == "external-file":
            from .warpcomp import read_flo
            path = os.path.join(self.flow_dir, f"{qidx:05d}_{edge}.flo")
            return read_flo(path).astype(np.float64)
        base = dataset.gt_pair_flow(qidx, edge)
        rng = np.random.default_rng([self.seed, qidx, INIT_PAIRS.index(edge)])
        return base + rng.normal(scale=self.sigma, size=base.shape)


def _gather_grads(ps: ParamSet):
    grads = {}
    for name, t in ps.named():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise ad.NonFiniteError(f"non-finite gradient in {name}")
        grads[name] = g
    return grads


def _clip_global_norm(grads, max_norm: float) -> float:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adam_step(ps: ParamSet, cfg: TrainConfig, t: int) -> float:
    """Bias-corrected ADAM update at step t (1-based); returns lr used.

    Gradients are taken from the parameters' grad buffers, clipped by
    global norm, then cleared.
    """
    grads = _gather_grads(ps)
    _clip_global_norm(grads, cfg.grad_clip)
    lr = cfg.lr_at(t)
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, tensor in ps.named():
        g = grads[name]
        m = ps.m[name]
        v = ps.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    ps.t = t
    ps.zero_grad()
    return lr


def _rng_state_path(ckpt_path: str) -> str:
    return ckpt_path[: -len(".cycf")] + ".rng.json" if ckpt_path.endswith(".cycf") \
        else ckpt_path + ".rng.json"


def save_training_state(ps: ParamSet, rng, path: str) -> None:
    ps.save(path)
    with open(_rng_state_path(path), "w") as fh:
        json.dump(rng.bit_generator.state, fh)


def load_training_state(path: str):
    ps = ParamSet.load(path)
    rng = np.random.default_rng()
    state_path = _rng_state_path(path)
    if os.path.exists(state_path):
        with open(state_path) as fh:
            rng.bit_generator.state = json.load(fh)
    return ps, rng


class DivergenceWatch:
    """Flags a run whose loss running-mean grows 5x over 200 steps."""

    def __init__(self, window: int = 200, factor: float = 5.0):
        self.window = window
        self.factor = factor
        self._hist = deque(maxlen=2 * window)

    def update(self, value: float):
        """Record a loss value; returns (older_mean, newer_mean) when
        divergence is detected, else None."""
        self._hist.append(value)
        if len(self._hist) == 2 * self.window:
            older = float(np.mean(list(self._hist)[:self.window]))
            newer = float(np.mean(list(self._hist)[self.window:]))
            if newer > self.factor * older:
                return older, newer
        return None


class _Logger:
    def __init__(self, path):
        self.path = path
        self.fh = open(path, "a") if path else None

    def write(self, **rec):
        if self.fh:
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


def _checkpoint(ps, rng, out_dir, step) -> str:
    path = os.path.join(out_dir, f"ckpt_{step:06d}.cycf")
    save_training_state(ps, rng, path)
    return path


def init_phase(ps: ParamSet, net_cfg: NetConfig, dataset, oracle: OracleFlowSource,
               cfg: TrainConfig, out_dir=None, log_path=None, rng=None) -> ParamSet:
    """Regress the flow pathway onto the oracle's pair flows.

    Each step samples batch_init (quartet, edge) pairs and minimizes the
    mean squared flow error, averaged over batch and pixels.  The
    matchability decoder is untouched.  Aborts if the running-mean loss
    grows 5x over 200 steps.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    log = _Logger(log_path)
    watch = DivergenceWatch()
    last_ckpt = None
    n = dataset.num_quartets
    H, W = net_cfg.input_size
    try:
        for t in range(ps.t + 1, cfg.max_iters + 1):
            qidxs = rng.integers(0, n, size=cfg.batch_init)
            edges = rng.integers(0, len(INIT_PAIRS), size=cfg.batch_init)
            srcs, tgts, targets = [], [], []
            for qi, ei in zip(qidxs, edges):
                s1, r1, r2, s2 = dataset.load_quartet_images(int(qi))
                imgs = {"s1": s1, "s2": s2, "r1": r1, "r2": r2}
                pair = INIT_PAIRS[int(ei)]
                srcs.append(imgs[pair[:2]])
                tgts.append(imgs[pair[2:]])
                targets.append(oracle.flow_for(dataset, int(qi), pair))
            flows = forward_flow_batch(ps, net_cfg, srcs, tgts)
            tgt_arr = np.stack(targets).transpose(0, 3, 1, 2)  # [N,2,H,W]
            diff = ad.sub(flows, Tensor(tgt_arr))
            loss = ad.scale(ad.tsum(ad.square(diff)), 1.0 / (cfg.batch_init * H * W))
            loss.backward()
            lr = adam_step(ps, cfg, t)
            val = float(loss.data)
            log.write(step=t, loss=val, lr=lr, phase="init")
            diverged = watch.update(val)
            if diverged is not None:
                raise DivergenceError(
                    f"init loss rose from {diverged[0]:.4g} to {diverged[1]:.4g} "
                    f"over {watch.window} steps")
            if out_dir and cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                last_ckpt = _checkpoint(ps, rng, out_dir, t)
        if out_dir:
            last_ckpt = _checkpoint(ps, rng, out_dir, ps.t)
    except ad.NonFiniteError as e:
        raise TrainingAborted(str(e), last_checkpoint=last_ckpt, last_step=ps.t) from e
    finally:
        log.close()
    return ps


def finetune_phase(ps: ParamSet, net_cfg: NetConfig, dataset, cfg: TrainConfig,
                   out_dir=None, log_path=None, eval_hook=None, rng=None) -> ParamSet:
    """End-to-end cycle-consistency training.

    Each step samples batch_ft quartets, forwards the three cycle pairs
    with shared weights, and minimizes flow + match_weight * match loss.
    The two synthetic-real matchability edges stay pinned to ones, so
    the matchability decoder learns only through the middle pair.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    log = _Logger(log_path)
    last_ckpt = None
    n = dataset.num_quartets
    try:
        for t in range(ps.t + 1, cfg.max_iters + 1):
            qidxs = [int(q) for q in rng.integers(0, n, size=cfg.batch_ft)]
            images = [dataset.load_quartet_images(qi) for qi in qidxs]
            gts = [dataset.load_gt_edge(qi) for qi in qidxs]
            batch = cycle_forward(ps, net_cfg, images, gts,
                                  with_match=cfg.match_weight != 0.0)
            report = total_loss(batch, match_weight=cfg.match_weight,
                                T=cfg.truncation)
            report.node.backward()
            lr = adam_step(ps, cfg, t)
            log.write(step=t, flow_loss=report.flow_loss, match_loss=report.match_loss,
                      total=report.total, truncation_rate=report.truncation_rate,
                      lr=lr, phase="finetune")
            if out_dir and cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                last_ckpt = _checkpoint(ps, rng, out_dir, t)
            if eval_hook is not None and cfg.checkpoint_every \
                    and t % cfg.checkpoint_every == 0:
                eval_hook(t, ps)
        if out_dir:
            last_ckpt = _checkpoint(ps, rng, out_dir, ps.t)
    except ad.NonFiniteError as e:
        raise TrainingAborted(str(e), last_checkpoint=last_ckpt, last_step=ps.t) from e
    finally:
        log.close()
    return ps


def config_echo(cfg: TrainConfig) -> str:
    """One-line summary of the effective hyperparameters."""
    d = asdict(cfg)
    keys = ("phase", "lr", "beta1", "beta2", "adam_eps", "step_size", "step_mult",
            "max_iters", "batch_init", "batch_ft", "match_weight", "truncation",
            "grad_clip", "seed")
    return " ".join(f"{k}={d[k]}" for k in keys)
