import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, strategies as st

from ctfprune import data_io, gcn, tensor_core as tc
from ctfprune.errors import ConfigError, ContractError, DivergenceError
from ctfprune.mask_param import ChannelLayout, LatentLayer, MaskTriple, ctf_mask
from ctfprune.pruning_trainer import (
    METRIC_COLUMNS, Adam, BudgetConfig, LossSpeedRate, TrainConfig, adam_step, budget_loss, l1_regularizer,
    lam_schedule, lr_update, total_loss, train, write_metrics,
)

SBU = dict(nodes=6, features=24, heads=1, filters=8, classes=2)


def sbu_data(seed=0):
    ds = data_io.synth_generate(2, 20, 6, 8, 0.05, seed=100 + seed)
    tr, te = data_io.split(ds, 0.5, seed)
    return (data_io.to_signals(tr, 8), tr.labels), (data_io.to_signals(te, 8), te.labels)


def run(mode="ctf", rate=0.9, seed=0, lam=1000.0, log=None, **kw):
    trd, ted = sbu_data(seed)
    model = gcn.GcnModel(gcn.GcnConfig(**SBU), np.random.default_rng(seed))
    return train(model, trd, ted, TrainConfig(mode=mode, seed=seed, **kw), BudgetConfig(rate, lam), log=log)


@pytest.fixture(scope="module")
def ctf90():
    return run()


def const_triple(value, shape=(2, 2)):
    t = tc.Tensor(np.full(shape, value), requires_grad=True)
    return MaskTriple(t, t, t)


class TestBudgetLoss:
    def test_exact_budget_is_zero(self):
        assert budget_loss({"a": const_triple(0.5)}, 2.0, 1000.0, "ctf").item() == 0.0

    def test_one_over_budget(self):
        assert budget_loss({"a": const_triple(0.75)}, 2.0, 1000.0, "fine").item() == pytest.approx(1000.0)

    def test_mode_selects_field(self):
        fine = tc.Tensor(np.full((2, 2), 1.0))
        coarse = tc.Tensor(np.full((2, 2), 0.5))
        composed = tc.Tensor(np.full((2, 2), 0.25))
        m = {"a": MaskTriple(fine, coarse, composed)}
        assert budget_loss(m, 0, 1, "fine").item() == 16.0
        assert budget_loss(m, 0, 1, "coarse").item() == 4.0
        assert budget_loss(m, 0, 1, "ctf").item() == 1.0
        with pytest.raises(ConfigError):
            budget_loss(m, 0, 1, "none")

    @given(st.floats(0, 1), st.floats(0, 8))
    def test_gradient_sign(self, v, c):
        t = tc.Tensor(np.full((2, 2), v), requires_grad=True)
        with tc.Tape() as tape:
            loss = budget_loss({"a": MaskTriple(t, t, t)}, c, 3.0, "ctf")
        tape.backward(loss)
        assert np.all(np.sign(t.grad) == np.sign(4 * v - c))

    def test_sums_over_layers(self):
        m = {"a": const_triple(1.0), "b": const_triple(1.0, (3, 1))}
        assert budget_loss(m, 5.0, 2.0, "ctf").item() == pytest.approx(2.0 * (7 - 5) ** 2)


class TestTotalLoss:
    def setup_method(self):
        self.trd, _ = sbu_data()
        self.model = gcn.GcnModel(gcn.GcnConfig(**SBU), np.random.default_rng(0))

    def test_lambda_zero_is_cross_entropy(self):
        masks = self.model.masks()
        loss, ce = total_loss(self.model, *self.trd, "ctf", masks, 10, 0.0)
        assert loss.item() == ce.item()

    def test_terms_non_negative(self):
        masks = self.model.masks()
        loss, ce = total_loss(self.model, *self.trd, "ctf", masks, 10, 1000.0)
        assert ce.item() >= 0 and loss.item() >= ce.item()

    def test_budget_only_descent_on_toy_layer(self):
        layer = LatentLayer(tc.Tensor([[0.8, -1.2], [0.3, 2.0]], requires_grad=True), ChannelLayout.grid(2, 2), 1.0)
        prev = None
        for _ in range(50):
            with tc.Tape() as tape:
                loss = budget_loss({"w": ctf_mask(layer, "saturating")}, 1.0, 1.0, "ctf")
            tape.backward(loss)
            if prev is not None:
                assert loss.item() <= prev
            prev = loss.item()
            layer.latent.data -= 1e-3 * layer.latent.grad
            layer.latent.grad = None


class TestLrUpdate:
    def test_examples(self):
        assert lr_update(0.01, 2.0, 1.0) == pytest.approx(0.0099)
        assert lr_update(0.0099, 1.0, 2.0) == pytest.approx(0.01)
        assert lr_update(0.01, None, None) == 0.01
        assert lr_update(0.01, 1.0, None) == 0.01

    def test_first_epochs_unchanged(self):
        rate = LossSpeedRate(0.01)
        assert rate.update(1.0) == 0.01  # no history
        assert rate.update(0.5) == 0.01  # one speed, nothing to compare
        assert rate.update(0.0) == pytest.approx(0.01 / 0.99)  # speed 0.5 -> 0.5: not faster

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60))
    def test_positive_finite(self, losses):
        rate = LossSpeedRate(0.01, lo=1e-4, hi=0.1)
        for v in losses:
            nu = rate.update(v)
            assert math.isfinite(nu) and nu > 0


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = tc.Tensor([[1.0, -2.0]], requires_grad=True)
        opt = Adam([p])
        p.grad = np.zeros((1, 2))
        adam_step(opt, 0.1)
        npt.assert_array_equal(p.data, [[1.0, -2.0]])

    def test_first_step_closed_form(self):
        g = np.array([[0.3, -2.0, 1e-9]])
        p = tc.Tensor(np.zeros((1, 3)), requires_grad=True)
        opt = Adam([p], eps=1e-8)
        p.grad = g
        opt.step(0.05)
        npt.assert_allclose(p.data, -0.05 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_constant_gradient_unit_step(self):
        p = tc.Tensor([[0.0]], requires_grad=True)
        opt = Adam([p])
        for _ in range(500):
            before = p.data.copy()
            p.grad = np.array([[4.0]])
            opt.step(0.01)
        assert abs(before - p.data)[0, 0] == pytest.approx(0.01, rel=1e-6)

    def test_shape_mismatch(self):
        p = tc.Tensor([[0.0, 0.0]], requires_grad=True)
        opt = Adam([p])
        p.grad = np.zeros((2, 1))
        with pytest.raises(ContractError):
            opt.step(0.1)

    def test_buffers_match_parameters(self):
        model = gcn.GcnModel(gcn.GcnConfig(**SBU))
        opt = Adam(model.parameters())
        assert [m.shape for m in opt.m] == [p.shape for p in model.parameters()]
        assert [v.shape for v in opt.v] == [p.shape for p in model.parameters()]


class TestL1:
    def test_examples(self):
        assert l1_regularizer([tc.Tensor(np.zeros((2, 2)))]).item() == 0.0
        assert l1_regularizer([tc.Tensor([[1.0, -2.0]])]).item() == 3.0

    def test_shrinks_weights(self):
        def total_abs(l1):
            trd, ted = sbu_data()
            model = gcn.GcnModel(gcn.GcnConfig(**SBU), np.random.default_rng(0))
            train(model, trd, ted, TrainConfig(mode="none", epochs=60, warmup_epochs=0, l1=l1), BudgetConfig(0.9, 0.0))
            return sum(np.abs(p.data).sum() for p in model.parameters())

        assert total_abs(0.01) < total_abs(0.0)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(lr_factor=1.0), dict(lr_factor=0.0), dict(mode="dense"),
                                    dict(sigma_hold=1.0), dict(lam_ramp=0.0), dict(warm_start="zero"),
                                    dict(lr=1.0, lr_max=0.1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    @pytest.mark.parametrize("kw", [dict(rate=1.0), dict(rate=-0.1), dict(lam=-1.0)])
    def test_invalid_budget(self, kw):
        with pytest.raises(ConfigError):
            BudgetConfig(**kw)

    def test_budget_target(self):
        assert BudgetConfig(0.9).target(324) == round(0.1 * 324)

    def test_lam_schedule(self):
        cfg = TrainConfig(epochs=101, lam0=1e-6, lam_ramp=0.5)
        assert lam_schedule(cfg, 1000.0, 0) == pytest.approx(1e-6)
        assert lam_schedule(cfg, 1000.0, 50) == pytest.approx(1000.0)
        assert lam_schedule(cfg, 1000.0, 100) == 1000.0
        assert lam_schedule(cfg, 0.0, 10) == 0.0


class TestTrain:
    def test_none_mode_fits(self):
        st_ = run(mode="none", lam=0.0, epochs=100, warmup_epochs=0)
        assert st_.result.train_acc >= 0.95
        assert st_.result.achieved_rate == 0.0

    def test_ctf_attains_rate(self, ctf90):
        assert abs(ctf90.result.achieved_rate - 0.9) <= 0.01

    def test_masks_are_crisp(self, ctf90):
        assert ctf90.result.ambiguous_fraction < 0.05

    def test_residual_decreases(self, ctf90):
        cfg = TrainConfig()
        pruning = ctf90.history[cfg.warmup_epochs:]
        early = pruning[len(pruning) // 10]["budget_residual"] ** 2
        assert pruning[-1]["budget_residual"] ** 2 < early

    def test_history_columns(self, ctf90, tmp_path):
        assert all(set(row) == set(METRIC_COLUMNS) for row in ctf90.history)
        write_metrics(tmp_path / "m.csv", ctf90.history)
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,ce,budget_residual,lr,sigma,achieved_rate,train_acc,test_acc"
        assert len(lines) == len(ctf90.history) + 1

    def test_sigma_and_lr_trajectories(self, ctf90):
        sig = [r["sigma"] for r in ctf90.history]
        assert all(a <= b for a, b in zip(sig, sig[1:]))
        assert sig[-1] == pytest.approx(1000.0)
        assert all(r["lr"] > 0 and math.isfinite(r["lr"]) for r in ctf90.history)

    def test_reproducible(self, ctf90, tmp_path):
        again = run()
        write_metrics(tmp_path / "a.csv", ctf90.history)
        write_metrics(tmp_path / "b.csv", again.history)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        for name in ctf90.result.binary_masks:
            npt.assert_array_equal(ctf90.result.binary_masks[name], again.result.binary_masks[name])

    def test_pruned_weights_respect_masks(self, ctf90):
        r = ctf90.result
        for name, m in r.binary_masks.items():
            assert (r.weights[name][m == 0] == 0).all()

    def test_budget_dominates_early_at_full_lambda(self):
        # state at the first pruning epoch, budget evaluated at lam = 1000
        trd, _ = sbu_data()
        snap = {}

        def grab(row):
            if row["epoch"] == TrainConfig().warmup_epochs:
                snap["params"] = [p.data.copy() for p in model.parameters()]

        model = gcn.GcnModel(gcn.GcnConfig(**SBU), np.random.default_rng(0))
        train(model, trd, trd, TrainConfig(epochs=2), BudgetConfig(0.9), log=grab)
        for p, d in zip(model.parameters(), snap["params"]):
            p.data[...] = d
        c = BudgetConfig(0.9).target(gcn.count_params(model)["prunable"])
        norms = []
        for part in ("budget", "ce"):
            with tc.Tape() as tape:
                masks = model.masks()
                loss, ce = total_loss(model, *trd, "ctf", masks, c, 1000.0)
                target = tc.sub(loss, ce) if part == "budget" else ce
            for p in model.parameters():
                p.grad = None
            tape.backward(target)
            norms.append(math.sqrt(sum(float((p.grad ** 2).sum()) for p in model.parameters())))
        assert norms[0] > norms[1]

    def test_divergence_reports_state(self):
        trd, ted = sbu_data()
        bad = (trd[0].copy(), trd[1])
        bad[0][0, 0, 0] = np.inf
        model = gcn.GcnModel(gcn.GcnConfig(**SBU))
        with pytest.raises(DivergenceError) as info:
            train(model, bad, ted, TrainConfig(epochs=3, warmup_epochs=1), BudgetConfig())
        assert {"epoch", "lr", "sigma"} <= set(info.value.state)

    def test_lambda_zero_bandstop_prunes_some(self):
        st_ = run(mode="fine", lam=0.0, warmup_epochs=0)
        assert st_.result.achieved_rate > 0.1
