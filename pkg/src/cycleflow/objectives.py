"""Cycle-consistency training losses.

A quartet contributes through the composed prediction chain: the flow
term penalizes the truncated squared endpoint error between the known
edge flow and the three-hop composition, and the matchability term is a
per-pixel cross entropy against the known edge mask, with the two
synthetic-to-real edges held at all-ones so only the middle map is
learned.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .warpcomp import (FlowField, GroundTruthEdge, MatchMap, compose_flow,
                       grid_sample, pixel_grid)

TRUNCATION_PX = 15.0
MATCH_WEIGHT = 100.0
CE_EPS = 1e-7


@dataclass
class CycleItem:
    """Predictions for one quartet plus its supervised edge."""

    f_s1r1: FlowField
    f_r1r2: FlowField
    f_r2s2: FlowField
    m_r1r2: MatchMap
    gt: GroundTruthEdge


@dataclass
class CycleBatch:
    items: list

    def __post_init__(self):
        if not self.items:
            raise ValueError("CycleBatch must hold at least one quartet")
        shp = self.items[0].gt.flow.shape
        for it in self.items:
            fields = (it.f_s1r1.shape, it.f_r1r2.shape, it.f_r2s2.shape,
                      it.m_r1r2.shape, it.gt.flow.shape)
            if any(s != shp for s in fields):
                raise ValueError("all quartet fields must share one resolution")

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)


@dataclass
class LossReport:
    """Scalar summary of one batch; `node` keeps the backward graph."""

    flow_loss: float
    match_loss: float
    total: float
    truncation_rate: float
    node: Tensor = field(repr=False, default=None)

    def to_json(self, **extra) -> str:
        rec = {"flow_loss": self.flow_loss, "match_loss": self.match_loss,
               "total": self.total, "truncation_rate": self.truncation_rate}
        rec.update(extra)
        return json.dumps(rec, sort_keys=True)


def _chan(t: Tensor, c: int) -> Tensor:
    """Select channel c of a [H,W,C] tensor as [H,W]."""
    def bw(g):
        gx = np.zeros_like(t.data)
        gx[:, :, c] = g
        ad._accum(t, gx)

    return ad._make(np.ascontiguousarray(t.data[:, :, c]), "chan", (t,), bw)


def _sqnorm(err: Tensor) -> Tensor:
    """[H,W,2] -> [H,W] squared vector norm, differentiable."""
    return ad.add(ad.square(_chan(err, 0)), ad.square(_chan(err, 1)))


def composed_flow(item: CycleItem) -> FlowField:
    """Three-hop transitive composition of the quartet's predictions."""
    return compose_flow(compose_flow(item.f_s1r1, item.f_r1r2), item.f_r2s2)


def flow_cycle_loss(batch: CycleBatch, T: float = TRUNCATION_PX):
    """Masked, truncated squared endpoint error of the composed chain.

    Per quartet, the sum over supervised pixels of min(|err|^2, T^2) is
    divided by the supervised pixel count; quartets are then summed.
    Capped pixels contribute zero gradient.  Returns (loss, trunc_rate).
    """
    total = None
    capped = 0
    supervised = 0
    for item in batch:
        mask = item.gt.mask
        n_sup = int(mask.sum())
        if n_sup == 0:
            continue
        fbar = composed_flow(item)
        err = ad.sub(Tensor(item.gt.flow.values), fbar.grid)
        sq = _sqnorm(err)
        capped += int((sq.data[mask == 1.0] >= T * T).sum())
        supervised += n_sup
        masked = ad.tsum(ad.mul(ad.minimum_const(sq, T * T), Tensor(mask)))
        term = ad.scale(masked, 1.0 / n_sup)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("flow_cycle_loss: no supervised pixels in the batch")
    return total, capped / supervised


def match_cycle_loss(batch: CycleBatch) -> Tensor:
    """Cross entropy between the edge mask and the composed matchability.

    With the two synthetic-real edges pinned to all-ones maps, the
    composition collapses to sampling the middle map at p + F_s1r1(p).
    Probabilities are clamped to [CE_EPS, 1-CE_EPS] before the logs; the
    result is averaged over all pixels per quartet, summed over quartets.
    """
    total = None
    for item in batch:
        H, W = item.gt.flow.shape
        base = Tensor(pixel_grid(H, W))
        target = ad.add(base, item.f_s1r1.grid)
        mbar = ad.clip(grid_sample(item.m_r1r2.grid, target), CE_EPS, 1.0 - CE_EPS)
        mask = item.gt.mask
        pos = ad.mul(ad.log(mbar), Tensor(mask))
        neg = ad.mul(ad.log(ad.shift(ad.neg(mbar), 1.0)), Tensor(1.0 - mask))
        ce = ad.scale(ad.neg(ad.add(ad.tsum(pos), ad.tsum(neg))), 1.0 / (H * W))
        total = ce if total is None else ad.add(total, ce)
    return total


def total_loss(batch: CycleBatch, match_weight: float = MATCH_WEIGHT,
               T: float = TRUNCATION_PX) -> LossReport:
    """flow term + match_weight * matchability term, backward-ready."""
    flow, trunc_rate = flow_cycle_loss(batch, T=T)
    match = match_cycle_loss(batch)
    node = ad.add(flow, ad.scale(match, match_weight))
    return LossReport(flow_loss=float(flow.data), match_loss=float(match.data),
                      total=float(node.data), truncation_rate=trunc_rate, node=node)
