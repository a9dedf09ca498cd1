import numpy as np
import pytest

from cycleflow import autodiff as ad
from cycleflow import warpcomp as wc
from cycleflow.autodiff import Tensor

from conftest import numerical_gradient


def bilinear_oracle(F, x, y):
    """Scalar re-implementation of clamped bilinear lookup."""
    H, W = F.shape[:2]
    x = min(max(x, 1.0), float(W)) - 1.0
    y = min(max(y, 1.0), float(H)) - 1.0
    i0 = min(int(np.floor(x)), W - 2)
    j0 = min(int(np.floor(y)), H - 2)
    wx, wy = x - i0, y - j0
    return ((1 - wx) * (1 - wy) * F[j0, i0] + wx * (1 - wy) * F[j0, i0 + 1]
            + (1 - wx) * wy * F[j0 + 1, i0] + wx * wy * F[j0 + 1, i0 + 1])


def compose_oracle(Fab, Fbc):
    """Per-pixel transitive walk."""
    H, W = Fab.shape[:2]
    out = np.zeros_like(Fab)
    for j in range(H):
        for i in range(W):
            q = np.array([i + 1.0, j + 1.0]) + Fab[j, i]
            out[j, i] = Fab[j, i] + bilinear_oracle(Fbc, q[0], q[1])
    return out


def compose_match_oracle(Mab, Mbc, Fab):
    H, W = Mab.shape
    out = np.zeros_like(Mab)
    for j in range(H):
        for i in range(W):
            q = np.array([i + 1.0, j + 1.0]) + Fab[j, i]
            out[j, i] = Mab[j, i] * bilinear_oracle(Mbc[..., None], q[0], q[1])[0]
    return out


class TestSampling:
    def test_integer_passthrough_exact(self):
        rng = np.random.default_rng(0)
        F = rng.normal(size=(6, 7, 2))
        ff = wc.FlowField(Tensor(F))
        pts = np.array([[3.0, 5.0], [1.0, 1.0], [7.0, 6.0]])
        got = wc.sample_flow(ff, pts).data
        want = np.array([F[4, 2], F[0, 0], F[5, 6]])
        assert np.array_equal(got, want)

    def test_cell_center_average(self):
        rng = np.random.default_rng(1)
        F = rng.normal(size=(4, 4, 2))
        got = wc.sample_flow(wc.FlowField(Tensor(F)), np.array([[2.5, 3.5]])).data[0]
        want = (F[2, 1] + F[2, 2] + F[3, 1] + F[3, 2]) / 4
        assert np.abs(got - want).max() < 1e-15

    def test_random_points_match_oracle(self):
        rng = np.random.default_rng(2)
        F = rng.normal(size=(8, 8, 2))
        pts = rng.uniform(-2.0, 11.0, size=(100, 2))
        got = wc.sample_flow(wc.FlowField(Tensor(F)), pts).data
        want = np.array([bilinear_oracle(F, x, y) for x, y in pts])
        assert np.abs(got - want).max() < 1e-12

    def test_piecewise_linear_on_grid_edge(self):
        rng = np.random.default_rng(3)
        F = rng.normal(size=(5, 5, 2))
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            got = wc.sample_flow(wc.FlowField(Tensor(F)),
                                 np.array([[2.0 + t, 3.0]])).data[0]
            want = (1 - t) * F[2, 1] + t * F[2, 2]
            assert np.abs(got - want).max() < 1e-14

    def test_out_of_domain_clamped(self):
        F = np.arange(32.0).reshape(4, 4, 2)
        ff = wc.FlowField(Tensor(F))
        got = wc.sample_flow(ff, np.array([[-5.0, 0.0], [99.0, 99.0]])).data
        assert np.array_equal(got[0], F[0, 0])
        assert np.array_equal(got[1], F[3, 3])

    def test_nan_coordinates_rejected(self):
        ff = wc.FlowField(Tensor(np.zeros((4, 4, 2))))
        with pytest.raises(ad.NonFiniteError):
            wc.sample_flow(ff, np.array([[np.nan, 1.0]]))

    def test_gradients_both_paths(self):
        rng = np.random.default_rng(4)
        field = Tensor(rng.normal(size=(6, 6, 2)), requires_grad=True)
        coords = Tensor(rng.uniform(1.3, 5.6, size=(7, 2)), requires_grad=True)
        mask = rng.normal(size=(7, 2))

        def f():
            return ad.tsum(ad.mul(wc.grid_sample(field, coords), Tensor(mask)))

        rep = ad.gradcheck(f, {"field": field, "coords": coords})
        assert rep.passed


class TestCompose:
    def test_identity_left_exact(self):
        rng = np.random.default_rng(5)
        F = wc.FlowField(Tensor(rng.normal(size=(6, 6, 2))))
        Z = wc.FlowField(Tensor(np.zeros((6, 6, 2))))
        assert np.array_equal(wc.compose_flow(Z, F).values, F.values)

    def test_identity_right_exact(self):
        rng = np.random.default_rng(6)
        F = wc.FlowField(Tensor(rng.normal(size=(6, 6, 2))))
        Z = wc.FlowField(Tensor(np.zeros((6, 6, 2))))
        assert np.array_equal(wc.compose_flow(F, Z).values, F.values)

    def test_constant_fields_add(self):
        H = W = 8
        Fa = wc.FlowField(Tensor(np.tile([2.0, 0.0], (H, W, 1))))
        Fb = wc.FlowField(Tensor(np.tile([0.0, 3.0], (H, W, 1))))
        out = wc.compose_flow(Fa, Fb).values
        # away from the right boundary the sample stays interior
        assert np.allclose(out[:, :W - 2], [2.0, 3.0])

    def test_chain_matches_bruteforce(self):
        rng = np.random.default_rng(7)
        for trial in range(10):
            F1, F2, F3 = (rng.normal(size=(8, 8, 2)) for _ in range(3))
            lhs = wc.compose_flow(
                wc.compose_flow(wc.FlowField(Tensor(F1)), wc.FlowField(Tensor(F2))),
                wc.FlowField(Tensor(F3))).values
            rhs = compose_oracle(compose_oracle(F1, F2), F3)
            assert np.abs(lhs - rhs).max() < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            wc.compose_flow(wc.FlowField(Tensor(np.zeros((4, 4, 2)))),
                            wc.FlowField(Tensor(np.zeros((5, 5, 2)))))

    def test_end_to_end_differentiable(self):
        rng = np.random.default_rng(8)
        Fa = Tensor(rng.normal(size=(6, 6, 2)) * 0.7, requires_grad=True)
        Fb = Tensor(rng.normal(size=(6, 6, 2)) * 0.7, requires_grad=True)
        mask = rng.normal(size=(6, 6, 2))

        def f():
            out = wc.compose_flow(wc.FlowField(Fa), wc.FlowField(Fb))
            return ad.tsum(ad.mul(out.grid, Tensor(mask)))

        rep = ad.gradcheck(f, {"Fa": Fa, "Fb": Fb}, max_coords=50)
        assert rep.passed


class TestComposeMatch:
    def test_ones_stay_ones(self):
        H = W = 6
        one = wc.MatchMap(Tensor(np.ones((H, W))))
        F = wc.FlowField(Tensor(np.random.default_rng(9).normal(size=(H, W, 2))))
        out = wc.compose_match(one, one, F)
        assert np.allclose(out.values, 1.0)

    def test_constant_product(self):
        H = W = 8
        half = wc.MatchMap(Tensor(np.full((H, W), 0.5)))
        F = wc.FlowField(Tensor(np.tile([1.5, -0.5], (H, W, 1))))
        out = wc.compose_match(half, half, F).values
        assert np.allclose(out, 0.25)

    def test_zero_absorbs(self):
        H = W = 6
        zero = wc.MatchMap(Tensor(np.zeros((H, W))))
        rng = np.random.default_rng(10)
        other = wc.MatchMap(Tensor(rng.uniform(size=(H, W))))
        F = wc.FlowField(Tensor(rng.normal(size=(H, W, 2))))
        assert np.all(wc.compose_match(zero, other, F).values == 0.0)

    def test_output_bounded(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            Ma = wc.MatchMap(Tensor(rng.uniform(size=(8, 8))))
            Mb = wc.MatchMap(Tensor(rng.uniform(size=(8, 8))))
            F = wc.FlowField(Tensor(rng.normal(size=(8, 8, 2)) * 5))
            out = wc.compose_match(Ma, Mb, F).values
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(12)
        Ma = rng.uniform(size=(8, 8))
        Mb = rng.uniform(size=(8, 8))
        F = rng.normal(size=(8, 8, 2)) * 2
        got = wc.compose_match(wc.MatchMap(Tensor(Ma)), wc.MatchMap(Tensor(Mb)),
                               wc.FlowField(Tensor(F))).values
        assert np.abs(got - compose_match_oracle(Ma, Mb, F)).max() < 1e-12


class TestWarpImage:
    def test_zero_flow_identity(self):
        rng = np.random.default_rng(13)
        img = rng.random((6, 6, 3))
        Z = wc.FlowField(Tensor(np.zeros((6, 6, 2))))
        assert np.array_equal(wc.warp_image(Tensor(img), Z).data, img)

    def test_unit_shift(self):
        rng = np.random.default_rng(14)
        img = rng.random((6, 6, 3))
        sh = wc.FlowField(Tensor(np.tile([1.0, 0.0], (6, 6, 1))))
        out = wc.warp_image(Tensor(img), sh).data
        assert np.abs(out[:, :-1] - img[:, 1:]).max() < 1e-15

    def test_flow_gradients(self):
        rng = np.random.default_rng(15)
        img = rng.random((6, 6, 3))
        F = Tensor(rng.normal(size=(6, 6, 2)) * 0.6, requires_grad=True)
        mask = rng.normal(size=(6, 6, 3))

        def f():
            return ad.tsum(ad.mul(wc.warp_image(Tensor(img), wc.FlowField(F)),
                                  Tensor(mask)))

        rep = ad.gradcheck(f, {"F": F}, max_coords=50)
        assert rep.passed


class TestTypes:
    def test_matchmap_bounds_enforced(self):
        with pytest.raises(ValueError):
            wc.MatchMap(Tensor(np.full((4, 4), 1.5)))

    def test_gt_edge_mask_binary(self):
        F = wc.FlowField(Tensor(np.zeros((4, 4, 2))))
        with pytest.raises(ValueError):
            wc.GroundTruthEdge(F, np.full((4, 4), 0.5))

    def test_gt_edge_shape_agreement(self):
        F = wc.FlowField(Tensor(np.zeros((4, 4, 2))))
        with pytest.raises(ValueError):
            wc.GroundTruthEdge(F, np.zeros((5, 5)))


class TestFiles:
    def test_flo_round_trip(self, tmp_path):
        rng = np.random.default_rng(16)
        flow = rng.normal(size=(5, 9, 2)).astype(np.float32)
        p = tmp_path / "f.flo"
        wc.write_flo(p, flow)
        assert np.array_equal(wc.read_flo(p), flow)

    def test_flo_layout(self, tmp_path):
        p = tmp_path / "g.flo"
        wc.write_flo(p, np.zeros((2, 3, 2), dtype=np.float32))
        blob = p.read_bytes()
        import struct
        assert struct.unpack("<f", blob[:4])[0] == np.float32(202021.25)
        assert struct.unpack("<ii", blob[4:12]) == (3, 2)
        assert len(blob) == 12 + 2 * 3 * 2 * 4

    def test_flo_bad_magic(self, tmp_path):
        p = tmp_path / "bad.flo"
        p.write_bytes(b"\x00" * 20)
        with pytest.raises(IOError):
            wc.read_flo(p)

    def test_mask_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(17)
        mask = (rng.random((6, 6)) > 0.5).astype(float)
        p = tmp_path / "m.png"
        wc.write_mask_png(p, mask)
        assert np.array_equal(wc.read_mask_png(p), mask)
