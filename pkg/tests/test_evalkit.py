import json
import subprocess
import sys
import os

import numpy as np
import pytest

from cycleflow import autodiff as ad
from cycleflow import corrnet as cn
from cycleflow import evalkit as ek
from cycleflow import quartetgen as qg
from cycleflow import warpcomp as wc
from cycleflow.autodiff import Tensor

SIZE = 64


@pytest.fixture(scope="module")
def eval_pairs(toy_dataset):
    return ek.build_eval_pairs(toy_dataset.val_records())


def perfect_flows(pairs, size):
    out = []
    for ra, rb in pairs:
        sa = qg._spec_from_dict(ra[4]["shape"])
        va = qg._view_from_dict(ra[4]["view"])
        sb = qg._spec_from_dict(rb[4]["shape"])
        vb = qg._view_from_dict(rb[4]["view"])
        flow, _ = qg.gt_flow_between(sa, va, sb, vb, size)
        out.append(wc.FlowField(Tensor(flow)))
    return out


class TestPck:
    def test_threshold_formula(self):
        assert ek.pck_threshold(128, 128, 0.1) == 12.8
        assert ek.pck_threshold(64, 64, 0.1) == 0.1 * 64

    def test_perfect_flow_scores_one(self, eval_pairs):
        flows = perfect_flows(eval_pairs, SIZE)
        res = ek.pck(eval_pairs, None, ek._SizeOnly(SIZE), flows=flows)
        assert res.overall == 1.0

    def test_identity_baseline_far_below_perfect(self, eval_pairs):
        res = ek.identity_flow_pck(eval_pairs, SIZE)
        assert 0.0 <= res.overall < 0.6

    def test_monotone_in_alpha(self, eval_pairs):
        flows = [wc.FlowField(Tensor(np.full((SIZE, SIZE, 2), 1.5)))] * len(eval_pairs)
        prev = -1.0
        for alpha in (0.02, 0.05, 0.1, 0.2, 0.4):
            res = ek.pck(eval_pairs, None, ek._SizeOnly(SIZE), alpha=alpha,
                         flows=flows)
            assert res.overall >= prev
            prev = res.overall

    def test_out_of_frame_prediction_incorrect(self):
        # target sits next to the border; a flow pushing out of frame must
        # count as incorrect even though the distance is tiny
        kps_a = {"k": [2.0, 2.0]}
        kps_b = {"k": [1.0, 2.0]}
        F = np.zeros((8, 8, 2))
        F[:, :, 0] = -1.5  # lands at x = 0.5, outside; 0.5 px from target
        pairs = [(("c", None, kps_a, None, None), ("c", None, kps_b, None, None))]
        res = ek.pck(pairs, None, ek._SizeOnly(8), alpha=0.2,
                     flows=[wc.FlowField(Tensor(F))])
        assert res.overall == 0.0

    def test_absent_target_excluded(self):
        kps_a = {"k": [3.0, 3.0], "m": [4.0, 4.0]}
        kps_b = {"k": [3.0, 3.0], "m": None}
        pairs = [(("c", None, kps_a, None, None), ("c", None, kps_b, None, None))]
        res = ek.pck(pairs, None, ek._SizeOnly(8),
                     flows=[wc.FlowField(Tensor(np.zeros((8, 8, 2))))])
        assert res.counts == {"c": 1}
        assert res.overall == 1.0

    def test_tie_at_threshold_correct(self):
        kps_a = {"k": [2.0, 2.0]}
        thr = ek.pck_threshold(8, 8, 0.25)
        kps_b = {"k": [2.0 + thr, 2.0]}
        pairs = [(("c", None, kps_a, None, None), ("c", None, kps_b, None, None))]
        res = ek.pck(pairs, None, ek._SizeOnly(8), alpha=0.25,
                     flows=[wc.FlowField(Tensor(np.zeros((8, 8, 2))))])
        assert res.overall == 1.0

    def test_recount_script_agrees(self, eval_pairs, tmp_path):
        rng = np.random.default_rng(0)
        flows = [wc.FlowField(Tensor(rng.normal(size=(SIZE, SIZE, 2)) * 4))
                 for _ in eval_pairs]
        res = ek.pck(eval_pairs, None, ek._SizeOnly(SIZE), flows=flows)
        dump = tmp_path / "dump.jsonl"
        with open(dump, "w") as fh:
            for rec in res.dump:
                fh.write(json.dumps(rec) + "\n")
        script = os.path.join(os.path.dirname(__file__), "recount_pck.py")
        out = subprocess.run([sys.executable, script, str(dump)],
                             capture_output=True, text=True, check=True)
        recount = json.loads(out.stdout)
        assert recount["overall"] == res.overall
        assert recount["per_category"] == res.per_category


class TestMatchability:
    def test_complementary_constants(self, eval_pairs):
        eps = 1e-6
        hi = ek.matchability_accuracy(eval_pairs, None, ek._SizeOnly(SIZE),
                                      predictor=lambda a, b: np.full((SIZE, SIZE),
                                                                     0.5 + eps))
        lo = ek.matchability_accuracy(eval_pairs, None, ek._SizeOnly(SIZE),
                                      predictor=lambda a, b: np.full((SIZE, SIZE),
                                                                     0.5 - eps))
        assert abs(hi.overall + lo.overall - 1.0) < 1e-12

    def test_all_matchable_constant_equals_matchable_fraction(self, eval_pairs):
        ra, rb = eval_pairs[0]
        frac = ek.matchable_ground_truth(ra[3], rb[3]).mean()
        acc = ek.matchability_accuracy_maps(np.full((SIZE, SIZE), 0.6),
                                            ra[3], rb[3])
        assert acc == frac

    def test_zero_predictor_equals_unmatchable_fraction(self, eval_pairs):
        ra, rb = eval_pairs[0]
        frac = 1.0 - ek.matchable_ground_truth(ra[3], rb[3]).mean()
        acc = ek.matchability_accuracy_maps(np.zeros((SIZE, SIZE)), ra[3], rb[3])
        assert acc == frac

    def test_perfect_predictor(self, eval_pairs):
        def perfect(a, b):
            for ra, rb in eval_pairs:
                if ra[1] is a and rb[1] is b:
                    return ek.matchable_ground_truth(ra[3], rb[3]).astype(float)
            raise AssertionError("pair not found")

        res = ek.matchability_accuracy(eval_pairs, None, ek._SizeOnly(SIZE),
                                       predictor=perfect)
        assert res.overall == 1.0

    def test_background_unmatchable(self):
        lab = np.zeros((4, 4), dtype=int)
        assert not ek.matchable_ground_truth(lab, lab).any()


class TestSegmentationTransfer:
    def test_identity_query_retrieved(self, toy_dataset, tiny_cfg):
        db = [r for r in toy_dataset.shape_db_records() if r[0] == "wagon"]
        # a zero-initialized net predicts exactly zero flow everywhere
        cfg = cn.NetConfig()
        ps = cn.ParamSet.initialize(cfg, seed=0)
        query = db[2][1]
        mask, best, dists = ek.segmentation_transfer(query, db, ps, cfg)
        assert best == 2
        assert dists[2] == 0.0
        assert ek.mask_iou(mask, db[2][2]) == 1.0

    def test_intensity_offset_invariant_retrieval(self, toy_dataset):
        db = [r for r in toy_dataset.shape_db_records() if r[0] == "wagon"][:4]
        cfg = cn.NetConfig()
        ps = cn.ParamSet.initialize(cfg, seed=0)
        query = db[1][1]
        _, best, dists = ek.segmentation_transfer(query, db, ps, cfg)
        shifted = [(c, np.clip(img + 0.07, 0, 1), m, s) for c, img, m, s in db]
        # constant offsets do not change gradients, hence not the ranking;
        # clip can bite, so only compare where no pixel saturates
        if all((img + 0.07 <= 1.0).all() for _, img, _, _ in db):
            _, best2, dists2 = ek.segmentation_transfer(query, shifted, ps, cfg)
            assert best2 == best

    def test_beats_identity_transfer_baseline(self, toy_dataset):
        # with exact flows the transferred mask beats copying the db mask
        recs = toy_dataset.val_records()
        cat, img, kps, labels, meta = recs[0]
        db = [r for r in toy_dataset.shape_db_records() if r[0] == cat]
        shape = qg._spec_from_dict(meta["shape"])
        view = qg._view_from_dict(meta["view"])
        man = toy_dataset.manifest["shape_db"]
        ious_gt, ious_id = [], []
        for rec_m in man:
            if rec_m["category"] != cat:
                continue
            db_shape = qg.make_base_shape(cat, int(rec_m["shape_id"][-1]),
                                          toy_dataset.manifest["config"]["seed"])
            db_view = qg._view_from_dict(rec_m["view"])
            flow, _ = qg.gt_flow_between(db_shape, db_view, shape, view, SIZE)
            F = wc.FlowField(Tensor(flow))
            grid = wc.pixel_grid(SIZE, SIZE) + F.values
            qx = np.rint(grid[..., 0]).astype(int)
            qy = np.rint(grid[..., 1]).astype(int)
            dbmask = np.round(wc.read_mask_png(
                os.path.join(toy_dataset.root, rec_m["mask"])))
            ok = (qx >= 1) & (qx <= SIZE) & (qy >= 1) & (qy <= SIZE) & (dbmask > 0)
            out = np.zeros((SIZE, SIZE))
            out[qy[ok] - 1, qx[ok] - 1] = 1.0
            ious_gt.append(ek.mask_iou(out, (labels > 0).astype(float)))
            ious_id.append(ek.mask_iou(dbmask, (labels > 0).astype(float)))
        assert np.mean(ious_gt) >= np.mean(ious_id)

    def test_empty_database_rejected(self, tiny_cfg):
        ps = cn.ParamSet.initialize(tiny_cfg, seed=0)
        with pytest.raises(ValueError, match="nonempty"):
            ek.segmentation_transfer(np.zeros((32, 32, 3)), [], ps, tiny_cfg)


class TestVisualization:
    def test_zero_flow_neutral(self, tmp_path):
        rgb = ek.visualize_flow(np.zeros((8, 8, 2)), tmp_path / "z.png")
        assert np.unique(rgb.reshape(-1, 3), axis=0).shape == (1, 3)
        assert np.all(rgb == 255)

    def test_constant_flow_single_hue(self, tmp_path):
        rgb = ek.visualize_flow(np.tile([2.0, -1.0], (8, 8, 1)), tmp_path / "c.png")
        assert np.unique(rgb.reshape(-1, 3), axis=0).shape[0] == 1

    def test_scaling_invariance_bytes(self, tmp_path):
        F = np.random.default_rng(1).normal(size=(12, 12, 2))
        ek.visualize_flow(F, tmp_path / "a.png", max_mag=3.0)
        ek.visualize_flow(2 * F, tmp_path / "b.png", max_mag=6.0)
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_nonfinite_rejected(self, tmp_path):
        bad = np.zeros((4, 4, 2))
        bad[0, 0, 0] = np.inf
        with pytest.raises(ad.NonFiniteError):
            ek.visualize_flow(bad, tmp_path / "x.png")

    def test_trajectory_overlay_deterministic(self, toy_dataset, tmp_path):
        imgs = toy_dataset.load_quartet_images(0)
        gt = toy_dataset.load_gt_edge(0)
        Z = wc.FlowField(Tensor(np.zeros((SIZE, SIZE, 2))))
        ek.cycle_trajectory_overlay(imgs, (Z, Z, Z), gt, tmp_path / "t1.png", seed=4)
        ek.cycle_trajectory_overlay(imgs, (Z, Z, Z), gt, tmp_path / "t2.png", seed=4)
        assert (tmp_path / "t1.png").read_bytes() == (tmp_path / "t2.png").read_bytes()
