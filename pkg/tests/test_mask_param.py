import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ctfprune import tensor_core as tc
from ctfprune.errors import ConfigError, DimensionError, FormatError
from ctfprune.mask_param import (
    ChannelLayout, LatentLayer, SigmaSchedule, anneal_sigma, binarize, coarse_mask, ctf_mask, effective_weights,
    fine_mask, invert_fine_reparam, read_mask_file, write_mask_file,
)
from oracles import central_diff, group_means_bruteforce, max_rel_error

weights = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
sigmas = st.floats(0.01, 1000, allow_nan=False)


def fine_ref(w, sigma):
    return 2.0 / (1.0 + math.exp(-sigma * w * w)) - 1.0


def fine_np(w, sigma):
    return fine_mask(tc.Tensor(w), sigma).data


@st.composite
def layouts(draw, max_side=6):
    rows = draw(st.integers(1, max_side))
    cols = draw(st.integers(1, max_side))
    br = draw(st.integers(1, rows))
    bc = draw(st.integers(1, cols))
    return ChannelLayout.grid(rows, cols, br, bc)


def groups_of(layout):
    return layout.row_group(), layout.col_group()


class TestFineMask:
    def test_zero(self):
        for s in (0.1, 1.0, 1000.0):
            assert fine_np(np.zeros((2, 2)), s).max() == 0.0

    def test_sigma4_w1(self):
        assert fine_np(np.array([[1.0]]), 4.0)[0, 0] == pytest.approx(0.964028, abs=1e-6)
        assert fine_np(np.array([[1.0]]), 4.0)[0, 0] == pytest.approx(fine_ref(1.0, 4.0), abs=1e-15)

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_sigma_must_be_positive(self, sigma):
        with pytest.raises(ConfigError):
            fine_mask(tc.Tensor([[1.0]]), sigma)

    @given(weights, sigmas)
    def test_symmetric(self, w, s):
        assert fine_np(np.array([[w]]), s)[0, 0] == fine_np(np.array([[-w]]), s)[0, 0]

    @given(weights, sigmas)
    def test_bounded(self, w, s):
        v = fine_np(np.array([[w]]), s)[0, 0]
        assert 0.0 <= v < 1.0 or (v == 1.0 and s * w * w > 36)  # float rounding at saturation

    @given(weights, weights, sigmas)
    def test_monotone_in_abs(self, a, b, s):
        lo, hi = sorted((abs(a), abs(b)))
        assert fine_np(np.array([[lo]]), s)[0, 0] <= fine_np(np.array([[hi]]), s)[0, 0]

    @given(sigmas, st.floats(6.0001, 1e4))
    def test_crisp_when_sigma_w2_above_6(self, s, prod):
        w = math.sqrt(prod / s)
        assert fine_np(np.array([[w]]), s)[0, 0] > 0.99

    @settings(max_examples=30)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-2, 2)), st.floats(0.1, 5))
    def test_gradient(self, w, s):
        lat = tc.Tensor(w, requires_grad=True)
        with tc.Tape() as tape:
            loss = tc.sum_all(tc.square(fine_mask(lat, s)))
        tape.backward(loss)
        num = central_diff(lambda a: float((fine_np(a, s) ** 2).sum()), [w.copy()])[0]
        assert max_rel_error(lat.grad, num) < 1e-4


class TestLayout:
    def test_spans_must_partition(self):
        with pytest.raises(DimensionError):
            ChannelLayout(4, 4, ((0, 2), (3, 4)), ((0, 4),))
        with pytest.raises(DimensionError):
            ChannelLayout(4, 4, ((0, 4),), ((0, 3),))

    @given(layouts())
    def test_every_entry_in_exactly_one_block(self, layout):
        count = np.zeros(layout.shape, int)
        for b in layout.blocks:
            count[layout.block_slices(b)] += 1
        assert (count == 1).all()

    def test_headed_diagonal_blocks(self):
        lay = ChannelLayout.headed(3, 4, 6)
        assert lay.row_spans == ((0, 4), (4, 8), (8, 12))
        assert lay.col_spans == ((0, 2), (2, 4), (4, 6))

    def test_degenerate_shapes_are_legal(self):
        for shape in ((1, 5), (5, 1)):
            lay = ChannelLayout.grid(*shape, 4, 4)
            out = coarse_mask(tc.Tensor(np.ones(shape)), lay).data
            npt.assert_array_equal(out, 1.0)


class TestCoarseMask:
    def test_all_ones_identity(self):
        lay = ChannelLayout.grid(5, 7, 2, 3)
        npt.assert_array_equal(coarse_mask(tc.Tensor(np.ones((5, 7))), lay).data, 1.0)

    def test_saturating_all_ones_is_near_one(self):
        lay = ChannelLayout.grid(5, 7, 2, 3)
        out = coarse_mask(tc.Tensor(np.ones((5, 7))), lay, "saturating", eps=1e-3).data
        assert out.min() > 0.999

    @pytest.mark.parametrize("aggregate", ["mean", "saturating"])
    def test_zero_row_annihilates_row(self, aggregate):
        f = np.random.default_rng(0).uniform(0.2, 1, size=(4, 6))
        f[2] = 0.0
        out = coarse_mask(tc.Tensor(f), ChannelLayout.grid(4, 6, 2, 2), aggregate).data
        assert (out[2] == 0).all()
        assert (np.delete(out, 2, axis=0) > 0).all()

    def test_two_by_two_example(self):
        f = np.array([[1.0, 1.0], [0.0, 0.0]])
        lay = ChannelLayout.grid(2, 2, 1, 1)
        out = coarse_mask(tc.Tensor(f), lay).data
        assert abs(out[0, 0] - 0.25) <= 1e-12
        npt.assert_allclose(out, group_means_bruteforce(f, *groups_of(lay)), atol=1e-12)

    @settings(max_examples=40)
    @given(layouts(), st.data())
    def test_matches_bruteforce_means(self, layout, data):
        f = data.draw(arrays(np.float64, layout.shape, elements=st.floats(0, 1)))
        out = coarse_mask(tc.Tensor(f), layout).data
        npt.assert_allclose(out, group_means_bruteforce(f, *groups_of(layout)), atol=1e-12)

    @settings(max_examples=40)
    @given(layouts(), st.data())
    def test_row_aggregate_invariant_under_in_group_permutation(self, layout, data):
        # swapping two columns inside one column block leaves every row and
        # block aggregate unchanged, so the coarse mask just swaps with them
        f = data.draw(arrays(np.float64, layout.shape, elements=st.floats(0, 1)))
        a, b = layout.col_spans[data.draw(st.integers(0, len(layout.col_spans) - 1))]
        i = data.draw(st.integers(a, b - 1))
        j = data.draw(st.integers(a, b - 1))
        perm = np.arange(layout.cols)
        perm[[i, j]] = perm[[j, i]]
        for agg in ("mean", "saturating"):
            out = coarse_mask(tc.Tensor(f), layout, agg).data
            out_p = coarse_mask(tc.Tensor(f[:, perm]), layout, agg).data
            npt.assert_allclose(out_p, out[:, perm], atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            coarse_mask(tc.Tensor(np.ones((3, 3))), ChannelLayout.grid(3, 4))

    def test_bad_aggregate_and_power(self):
        lay = ChannelLayout.grid(2, 2)
        with pytest.raises(ConfigError):
            coarse_mask(tc.Tensor(np.ones((2, 2))), lay, "max")
        with pytest.raises(ConfigError):
            coarse_mask(tc.Tensor(np.ones((2, 2))), lay, "saturating", power=3)

    @pytest.mark.parametrize("aggregate", ["mean", "saturating"])
    def test_gradient(self, aggregate):
        rng = np.random.default_rng(3)
        lay = ChannelLayout.grid(4, 5, 2, 2)
        for _ in range(5):
            w = rng.uniform(-1.5, 1.5, size=(4, 5))

            def value(a):
                return float(ctf_mask(LatentLayer(tc.Tensor(a), lay, 2.0), aggregate).composed.data.sum())

            lat = tc.Tensor(w, requires_grad=True)
            with tc.Tape() as tape:
                loss = tc.sum_all(ctf_mask(LatentLayer(lat, lay, 2.0), aggregate).composed)
            tape.backward(loss)
            assert max_rel_error(lat.grad, central_diff(value, [w.copy()])[0]) < 1e-4


class TestCtfMask:
    def test_zero_latent(self):
        layer = LatentLayer(tc.Tensor(np.zeros((4, 4))), ChannelLayout.grid(4, 4, 2, 2), 5.0)
        for agg in ("mean", "saturating"):
            assert ctf_mask(layer, agg).composed.data.max() == 0.0

    def test_huge_latent_is_all_ones(self):
        layer = LatentLayer(tc.Tensor(np.full((4, 4), 10.0)), ChannelLayout.grid(4, 4, 2, 2), 1000.0)
        npt.assert_allclose(ctf_mask(layer).composed.data, 1.0, atol=1e-12)

    def _two_block(self):
        lat = np.ones((4, 4))
        lat[:, 2:] = 0.01
        layout = ChannelLayout(4, 4, ((0, 4),), ((0, 2), (2, 4)))
        return LatentLayer(tc.Tensor(lat), layout, 50.0)

    def test_two_block_example_saturating(self):
        m = ctf_mask(self._two_block(), "saturating", eps=1e-3).composed.data
        assert m[:, 2:].max() < 1e-3
        assert m[:, :2].min() > 0.9

    def test_two_block_example_mean_halves_survivors(self):
        # with group means the live block shares its rows with the dead one,
        # so the row factor is ~1/2; the dead block is still annihilated
        layer = self._two_block()
        m = ctf_mask(layer, "mean").composed.data
        f = fine_np(layer.latent.data, 50.0)
        oracle = group_means_bruteforce(f, *groups_of(layer.layout)) * f
        npt.assert_allclose(m, oracle, atol=1e-12)
        assert m[:, 2:].max() < 1e-3
        assert m[:, :2].max() < 0.51

    @settings(max_examples=40)
    @given(layouts(), st.data(), st.sampled_from(["mean", "saturating"]))
    def test_triple_invariants(self, layout, data, agg):
        lat = data.draw(arrays(np.float64, layout.shape, elements=st.floats(-3, 3)))
        m = ctf_mask(LatentLayer(tc.Tensor(lat), layout, data.draw(st.floats(0.1, 100))), agg)
        npt.assert_allclose(m.composed.data, m.coarse.data * m.fine.data, atol=1e-12)
        assert (m.fine.data >= 0).all() and (m.fine.data <= 1).all()
        assert (m.coarse.data >= 0).all() and (m.coarse.data <= 1).all()
        assert (m.composed.data <= m.fine.data + 1e-15).all()
        assert (m.composed.data <= m.coarse.data + 1e-15).all()

    @settings(max_examples=40)
    @given(layouts(), st.data(), st.sampled_from(["mean", "saturating"]))
    def test_dead_block_annihilates_block(self, layout, data, agg):
        lat = data.draw(arrays(np.float64, layout.shape, elements=st.floats(0.5, 3)))
        b = data.draw(st.sampled_from(layout.blocks))
        rs, cs = layout.block_slices(b)
        lat[rs, cs] = 0.0
        comp = ctf_mask(LatentLayer(tc.Tensor(lat), layout, 2.0), agg).composed.data
        assert (comp[rs, cs] == 0).all()


class TestEffectiveWeights:
    def setup_method(self):
        self.layer = LatentLayer(tc.Tensor([[1.5, -2.0], [0.3, -0.1]]), ChannelLayout.grid(2, 2), 1.0)

    def test_ones_and_zeros(self):
        npt.assert_array_equal(effective_weights(self.layer, tc.Tensor(np.ones((2, 2)))).data, self.layer.latent.data)
        npt.assert_array_equal(effective_weights(self.layer, tc.Tensor(np.zeros((2, 2)))).data, 0.0)

    @given(arrays(np.float64, (3, 3), elements=st.floats(-5, 5)), st.floats(0.1, 100))
    def test_shrinks_and_keeps_sign(self, lat, s):
        layer = LatentLayer(tc.Tensor(lat), ChannelLayout.grid(3, 3, 2, 2), s)
        m = ctf_mask(layer, "saturating")
        W = effective_weights(layer, m).data
        assert (np.abs(W) <= np.abs(lat)).all()
        live = m.composed.data > 0
        assert (np.sign(W[live]) == np.sign(lat[live])).all()


class TestSigma:
    def test_boundaries_and_midpoint(self):
        sch = SigmaSchedule(1.0, 1000.0, 300)
        assert anneal_sigma(sch, 0) == 1.0
        assert anneal_sigma(sch, 300) == pytest.approx(1000.0, rel=1e-12)
        assert anneal_sigma(sch, 150) == pytest.approx(math.sqrt(1000.0), rel=1e-12)

    @given(st.floats(0.01, 10), st.floats(1, 1000), st.integers(1, 500), st.data())
    def test_monotone(self, s0, factor, total, data):
        sch = SigmaSchedule(s0, s0 * factor, total)
        a = data.draw(st.integers(0, total))
        b = data.draw(st.integers(a, total))
        assert anneal_sigma(sch, a) <= anneal_sigma(sch, b)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            SigmaSchedule(0.0, 1.0, 10)
        with pytest.raises(ConfigError):
            SigmaSchedule(5.0, 1.0, 10)
        with pytest.raises(ConfigError):
            anneal_sigma(SigmaSchedule(1, 2, 10), 11)

    def test_layer_sigma_never_decreases(self):
        layer = LatentLayer(tc.Tensor(np.ones((2, 2))), ChannelLayout.grid(2, 2), 2.0)
        layer.set_sigma(3.0)
        with pytest.raises(ConfigError):
            layer.set_sigma(1.0)


class TestBinarize:
    def test_zeros(self):
        b = binarize(np.zeros((3, 3)))
        npt.assert_array_equal(b.mask, 0.0)
        assert b.ambiguous_fraction == 0.0

    def test_threshold(self):
        npt.assert_array_equal(binarize(np.array([[0.99, 0.01]]), 0.5).mask, [[1, 0]])

    def test_ambiguous_band(self):
        assert binarize(np.array([[0.5, 0.04, 0.96, 0.05]])).ambiguous_fraction == 0.5

    @pytest.mark.parametrize("t", [0.0, 1.0, 1.5])
    def test_bad_threshold(self, t):
        with pytest.raises(ConfigError):
            binarize(np.zeros((1, 1)), t)


class TestMaskFile:
    def test_round_trip(self, tmp_path):
        m = (np.random.default_rng(0).random((4, 7)) > 0.5).astype(float)
        write_mask_file(tmp_path / "m.mask", m)
        npt.assert_array_equal(read_mask_file(tmp_path / "m.mask"), m)
        assert (tmp_path / "m.mask").read_text().splitlines()[0] == "4 7"

    def test_real_round_trip(self, tmp_path):
        m = np.random.default_rng(1).random((3, 2))
        write_mask_file(tmp_path / "r.mask", m, real=True)
        npt.assert_array_equal(read_mask_file(tmp_path / "r.mask"), m)

    def test_malformed(self, tmp_path):
        (tmp_path / "bad.mask").write_text("2 2\n1 0\n")
        with pytest.raises(FormatError):
            read_mask_file(tmp_path / "bad.mask")
        (tmp_path / "junk.mask").write_text("x y\n")
        with pytest.raises(FormatError):
            read_mask_file(tmp_path / "junk.mask")


class TestInvert:
    @given(arrays(np.float64, (4,), elements=st.floats(-3, 3)), st.floats(0.1, 100))
    def test_reproduces_weights(self, w, s):
        v = invert_fine_reparam(w, s)
        npt.assert_allclose(v * fine_np(v.reshape(1, -1), s).ravel(), w, atol=1e-10)
        assert (np.sign(v) == np.sign(w)).all()

    def test_sigma_positive(self):
        with pytest.raises(ConfigError):
            invert_fine_reparam(np.ones(2), 0.0)
