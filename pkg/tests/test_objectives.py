import json

import numpy as np
import pytest

from cycleflow import autodiff as ad
from cycleflow import objectives as ob
from cycleflow import warpcomp as wc
from cycleflow.autodiff import Tensor


def make_item(Fa, Fb, Fc, M, gt_flow, gt_mask):
    return ob.CycleItem(
        wc.FlowField(ad.astensor(Fa)), wc.FlowField(ad.astensor(Fb)),
        wc.FlowField(ad.astensor(Fc)), wc.MatchMap(ad.astensor(M)),
        wc.GroundTruthEdge(wc.FlowField(Tensor(gt_flow)), gt_mask))


H = W = 8
Z = np.zeros((H, W, 2))
ONES = np.ones((H, W))
HALF = np.full((H, W), 0.5)


class TestFlowCycleLoss:
    def test_perfect_cycle_zero(self):
        loss, rate = ob.flow_cycle_loss(ob.CycleBatch(
            [make_item(Z, Z, Z, HALF, Z, ONES)]))
        assert float(loss.data) == 0.0 and rate == 0.0

    def test_pixel_contribution_345(self):
        gt = np.zeros((H, W, 2))
        gt[4, 4] = (3.0, 4.0)
        m = np.zeros((H, W))
        m[4, 4] = 1.0
        loss, rate = ob.flow_cycle_loss(ob.CycleBatch(
            [make_item(Z, Z, Z, HALF, gt, m)]))
        assert float(loss.data) == 25.0
        assert rate == 0.0

    def test_pixel_contribution_capped(self):
        gt = np.zeros((H, W, 2))
        gt[2, 3] = (20.0, 0.0)
        m = np.zeros((H, W))
        m[2, 3] = 1.0
        loss, rate = ob.flow_cycle_loss(ob.CycleBatch(
            [make_item(Z, Z, Z, HALF, gt, m)]), T=15.0)
        assert float(loss.data) == 225.0
        assert rate == 1.0

    def test_invariant_to_masked_out_gt(self):
        rng = np.random.default_rng(0)
        gt = rng.normal(size=(H, W, 2))
        mask = (rng.random((H, W)) > 0.5).astype(float)
        v1 = float(ob.flow_cycle_loss(ob.CycleBatch(
            [make_item(Z, Z, Z, HALF, gt, mask)]))[0].data)
        gt2 = gt.copy()
        gt2[mask == 0.0] = 12345.0
        v2 = float(ob.flow_cycle_loss(ob.CycleBatch(
            [make_item(Z, Z, Z, HALF, gt2, mask)]))[0].data)
        assert v1 == v2

    def test_capped_pixels_zero_gradient(self):
        gt = np.zeros((H, W, 2))
        gt[2, 2] = (40.0, 0.0)
        m = np.zeros((H, W))
        m[2, 2] = 1.0
        Fp = Tensor(np.zeros((H, W, 2)), requires_grad=True)
        item = ob.CycleItem(wc.FlowField(Fp), wc.FlowField(Tensor(Z)),
                            wc.FlowField(Tensor(Z)), wc.MatchMap(Tensor(HALF)),
                            wc.GroundTruthEdge(wc.FlowField(Tensor(gt)), m))
        loss, _ = ob.flow_cycle_loss(ob.CycleBatch([item]))
        loss.backward()
        assert Fp.grad is None or np.abs(Fp.grad).max() == 0.0

    def test_empty_supervision_raises(self):
        with pytest.raises(ValueError, match="no supervised"):
            ob.flow_cycle_loss(ob.CycleBatch(
                [make_item(Z, Z, Z, HALF, Z, np.zeros((H, W)))]))

    def test_per_quartet_normalization(self):
        # one supervised pixel with error 3 -> 9; two quartets sum
        gt = np.zeros((H, W, 2))
        gt[1, 1] = (3.0, 0.0)
        m = np.zeros((H, W))
        m[1, 1] = 1.0
        batch = ob.CycleBatch([make_item(Z, Z, Z, HALF, gt, m),
                               make_item(Z, Z, Z, HALF, gt, m)])
        loss, _ = ob.flow_cycle_loss(batch)
        assert float(loss.data) == 18.0


class TestMatchCycleLoss:
    def test_ln2_at_half(self):
        ce = ob.match_cycle_loss(ob.CycleBatch([make_item(Z, Z, Z, HALF, Z, ONES)]))
        assert abs(float(ce.data) - np.log(2.0)) < 1e-12

    def test_near_perfect_positive(self):
        m = np.full((H, W), 1.0 - 1e-7)
        ce = ob.match_cycle_loss(ob.CycleBatch([make_item(Z, Z, Z, m, Z, ONES)]))
        assert float(ce.data) < 1.2e-7

    def test_constant_map_closed_form(self):
        rng = np.random.default_rng(1)
        mixed = (rng.random((H, W)) > 0.35).astype(float)
        n1, n0 = mixed.sum(), (1 - mixed).sum()
        prob = 0.3
        ce = ob.match_cycle_loss(ob.CycleBatch(
            [make_item(Z, Z, Z, np.full((H, W), prob), Z, mixed)]))
        want = -(n1 * np.log(prob) + n0 * np.log(1 - prob)) / (H * W)
        assert abs(float(ce.data) - want) < 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            m = rng.uniform(size=(H, W))
            mask = (rng.random((H, W)) > 0.5).astype(float)
            F = rng.normal(size=(H, W, 2))
            ce = ob.match_cycle_loss(ob.CycleBatch([make_item(F, Z, Z, m, Z, mask)]))
            assert float(ce.data) >= 0.0

    def test_gradient_reaches_flow_via_sampling(self):
        # the matchability term moves with the first-hop flow coordinates
        rng = np.random.default_rng(3)
        m = rng.uniform(0.2, 0.8, size=(H, W))
        mask = (rng.random((H, W)) > 0.5).astype(float)
        Fa = Tensor(rng.normal(size=(H, W, 2)) * 0.5, requires_grad=True)
        item = ob.CycleItem(wc.FlowField(Fa), wc.FlowField(Tensor(Z)),
                            wc.FlowField(Tensor(Z)), wc.MatchMap(Tensor(m)),
                            wc.GroundTruthEdge(wc.FlowField(Tensor(Z)), mask))
        ce = ob.match_cycle_loss(ob.CycleBatch([item]))
        ce.backward()
        assert Fa.grad is not None and np.abs(Fa.grad).max() > 0.0


class TestTotalLoss:
    def test_weighted_sum_exact(self):
        rng = np.random.default_rng(4)
        item = make_item(rng.normal(size=(H, W, 2)) * 0.5,
                         rng.normal(size=(H, W, 2)) * 0.5,
                         rng.normal(size=(H, W, 2)) * 0.5,
                         np.clip(rng.random((H, W)), 0.01, 0.99),
                         rng.normal(size=(H, W, 2)),
                         (rng.random((H, W)) > 0.4).astype(float))
        rep = ob.total_loss(ob.CycleBatch([item]))
        assert rep.total == rep.flow_loss + 100.0 * rep.match_loss

    def test_lambda_zero(self):
        rng = np.random.default_rng(5)
        item = make_item(Z, Z, Z, np.clip(rng.random((H, W)), 0.01, 0.99),
                         rng.normal(size=(H, W, 2)), ONES)
        rep = ob.total_loss(ob.CycleBatch([item]), match_weight=0.0)
        assert rep.total == rep.flow_loss

    def test_perfect_predictions_near_zero(self):
        m = np.full((H, W), 1.0 - 1e-7)
        rep = ob.total_loss(ob.CycleBatch([make_item(Z, Z, Z, m, Z, ONES)]))
        assert rep.flow_loss == 0.0
        assert rep.total < 100 * 1.2e-7

    def test_report_json(self):
        rep = ob.total_loss(ob.CycleBatch([make_item(Z, Z, Z, HALF, Z, ONES)]))
        rec = json.loads(rep.to_json(step=3, lr=0.001))
        assert rec["step"] == 3 and "flow_loss" in rec and "truncation_rate" in rec

    def test_full_chain_gradcheck_16(self):
        rng = np.random.default_rng(6)
        n = 16
        FA = Tensor(rng.normal(size=(n, n, 2)) * 0.4, requires_grad=True)
        FB = Tensor(rng.normal(size=(n, n, 2)) * 0.4, requires_grad=True)
        FC = Tensor(rng.normal(size=(n, n, 2)) * 0.4, requires_grad=True)
        MM = Tensor(np.clip(rng.random((n, n)), 0.05, 0.95), requires_grad=True)
        gtf = rng.normal(size=(n, n, 2)) * 0.7
        msk = (rng.random((n, n)) > 0.3).astype(float)

        def f():
            item = ob.CycleItem(
                wc.FlowField(FA), wc.FlowField(FB), wc.FlowField(FC),
                wc.MatchMap(MM),
                wc.GroundTruthEdge(wc.FlowField(Tensor(gtf)), msk))
            return ob.total_loss(ob.CycleBatch([item])).node

        rep = ad.gradcheck(f, {"FA": FA, "FB": FB, "FC": FC, "MM": MM},
                           max_coords=25, seed=1)
        assert rep.passed

    def test_resolution_mismatch_rejected(self):
        small = np.zeros((4, 4, 2))
        with pytest.raises(ValueError, match="resolution"):
            ob.CycleBatch([ob.CycleItem(
                wc.FlowField(Tensor(small)), wc.FlowField(Tensor(Z)),
                wc.FlowField(Tensor(Z)), wc.MatchMap(Tensor(HALF)),
                wc.GroundTruthEdge(wc.FlowField(Tensor(Z)), ONES))])
