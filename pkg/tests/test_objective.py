import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daclr.encoder import EncoderModel, encode
from daclr.events import EventSummary
from daclr.objective import (
    Example,
    LossSpec,
    batch_margin,
    info_nce,
    info_nce_grad,
    loss_full,
    loss_sent,
    loss_struct,
    loss_unit,
    objective,
    total_loss,
    update_ema,
)

from oracles import PARTS, gradient_check, nce_direct, random_problem

AB = EventSummary("Alice met Bob", ("Alice", "Bob"), (), "[Mask] met [Mask]")
CD = EventSummary("Carol left Dan", ("Carol", "Dan"), (), "[Mask] left [Mask]")
RAIN = EventSummary("it rained", (), (), "it rained")

sims = st.floats(-1.0, 1.0, allow_nan=False)


class TestInfoNCE:
    def test_one_equal_negative_is_ln2(self):
        assert info_nce(0.3, [0.3], 0.05) == math.log(2)

    def test_equal_logits(self):
        for n in (1, 2, 5, 31):
            assert info_nce(0.1, [0.1] * n, 0.07) == pytest.approx(math.log(1 + n), rel=1e-15)

    def test_high_precision_value(self):
        # 50-digit evaluation of -log(e^16 / (e^16 + e^4 + e^2))
        assert info_nce(0.8, [0.2, 0.1], 0.05) == pytest.approx(6.975716742063171e-06, rel=1e-12)

    def test_no_negatives(self):
        assert info_nce(0.5, [], 0.05) == 0.0

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            info_nce(0.5, [0.1], 0.0)

    def test_extreme_logits_finite(self):
        assert info_nce(1.0, [-1.0], 1e-4) == 0.0
        assert info_nce(-1.0, [1.0], 1e-4) == pytest.approx(2e4, rel=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(sims, st.lists(sims, min_size=1, max_size=8), st.floats(0.01, 2.0))
    def test_matches_direct_softmax(self, sp, sn, tau):
        assert info_nce(sp, sn, tau) == pytest.approx(nce_direct(sp, sn, tau), rel=1e-9, abs=1e-300)

    @settings(max_examples=200, deadline=None)
    @given(sims, st.lists(sims, min_size=1, max_size=8), st.floats(0.01, 2.0), st.floats(0.0, 0.5))
    def test_nonnegative_and_monotone(self, sp, sn, tau, bump):
        base = info_nce(sp, sn, tau)
        assert base >= 0.0
        assert info_nce(sp + bump, sn, tau) <= base + 1e-12
        assert info_nce(sp, [s + bump for s in sn], tau) >= base - 1e-12

    @settings(max_examples=100, deadline=None)
    @given(sims, st.lists(sims, min_size=1, max_size=5), st.floats(0.05, 2.0))
    def test_gradient_matches_difference(self, sp, sn, tau):
        _, gp, gn = info_nce_grad(sp, sn, tau)
        eps = 1e-6
        num = (info_nce(sp + eps, sn, tau) - info_nce(sp - eps, sn, tau)) / (2 * eps)
        assert gp == pytest.approx(num, rel=1e-5, abs=1e-6)
        # softmax weights sum to one, so the partials cancel
        assert gp + gn.sum() == pytest.approx(0.0, abs=1e-9)


class TestCombinations:
    def test_unit_examples(self):
        assert loss_unit(1.0, 3.0, 0.25) == 2.5
        assert loss_unit(1.0, 3.0, 1.0) == 1.0
        assert loss_unit(1.0, 3.0, 0.0) == 3.0

    def test_unit_rejects_bad_beta(self):
        with pytest.raises(ValueError):
            loss_unit(1.0, 1.0, 1.5)

    def test_total(self):
        assert total_loss(0.5, 2.5) == 3.0


class TestEma:
    def test_examples(self):
        assert update_ema(0.0, 0.5) == pytest.approx(0.05, abs=1e-16)
        assert update_ema(0.2, 0.4) == pytest.approx(0.22, abs=1e-16)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-2, 2), st.floats(-2, 2))
    def test_between_inputs(self, prev, delta):
        out = update_ema(prev, delta)
        assert min(prev, delta) <= out <= max(prev, delta)

    def test_fixed_point(self):
        x = -1.0
        for _ in range(200):
            x = update_ema(x, 0.3)
        assert abs(x - 0.3) <= 1e-6


class TestViewLosses:
    model = EncoderModel.init(256, 8, seed=4)

    def test_identical_views_give_equal_losses(self):
        same = EventSummary("x y", ("x y",), (), "[Mask]")
        same_neg = EventSummary("q r", ("q r",), (), "[Mask]")
        # Full and Sent views are the same string for both texts
        assert loss_full(self.model, same, same, [same_neg], 0.1) == loss_sent(self.model, same, same, [same_neg], 0.1)

    def test_struct_of_same_skeleton_is_ln_k_plus_1(self):
        # AB and CD differ only in the verb; two negatives sharing the claim's skeleton tie with the positive
        other = EventSummary("Eve met Fay", ("Eve", "Fay"), (), "[Mask] met [Mask]")
        loss = loss_struct(self.model, AB, other, [other, other], 0.05)
        assert loss == pytest.approx(math.log(3), rel=1e-12)

    def test_empty_sent_contributes_zero(self):
        batch = [Example(RAIN, AB, [CD])]
        res = objective(self.model, batch, LossSpec("total", tau=0.1, beta=0.5))
        assert res.parts["sent"] == 0.0
        assert res.sent_skipped == 1

    def test_parts_compose(self):
        batch = [Example(AB, AB, [CD]), Example(CD, CD, [AB, RAIN])]
        res = objective(self.model, batch, LossSpec("total", tau=0.1, beta=0.3))
        p = res.parts
        assert p["unit"] == pytest.approx(0.3 * p["sent"] + 0.7 * p["struct"], rel=1e-15)
        assert p["total"] == pytest.approx(p["full"] + p["unit"], rel=1e-15)
        assert res.value == p["total"]

    def test_scale_is_linear(self):
        model, batch, tau, beta = random_problem(11)
        one = objective(model, batch, LossSpec("total", tau=tau, beta=beta))
        two = objective(model, batch, LossSpec("total", tau=tau, beta=beta, scale=2.0))
        assert two.value == pytest.approx(2 * one.value, rel=1e-14)
        np.testing.assert_allclose(two.grad.projection, 2 * one.grad.projection, rtol=1e-13)

    def test_unknown_loss_name(self):
        with pytest.raises(ValueError):
            LossSpec("hinge")


class TestGradients:
    @pytest.mark.parametrize("seed", range(8))
    def test_finite_differences(self, seed):
        errors = gradient_check(seed)
        assert set(errors) == set(PARTS)
        for name, err in errors.items():
            assert err <= 1e-4, (name, err)

    def test_gradient_is_sparse_in_rows(self):
        model = EncoderModel.init(4096, 4, seed=0)
        res = objective(model, [Example(AB, AB, [CD])], LossSpec("full", tau=0.1))
        dense = res.grad.dense_projection(4096)
        touched = np.flatnonzero(np.any(dense != 0.0, axis=1))
        assert set(touched) <= set(res.grad.rows.tolist())
        assert len(res.grad.rows) < 4096


class TestBatchMargin:
    def test_hand_value(self):
        # the positive equals the claim, so cos = 1; the negative is the claim again, so the gap is 0
        m = EncoderModel.init(64, 4, seed=1)
        assert batch_margin(m, [Example(AB, AB, [AB])]) == pytest.approx(0.0, abs=1e-15)

    def test_two_claims_average(self):
        m = EncoderModel.init(512, 6, seed=2)

        def gap(c, p, ns):
            ec = encode(m, c.summary)
            return ec @ encode(m, p.summary) - np.mean([ec @ encode(m, n.summary) for n in ns])

        batch = [Example(AB, AB, [CD]), Example(CD, AB, [AB, RAIN])]
        want = (gap(AB, AB, [CD]) + gap(CD, AB, [AB, RAIN])) / 2
        assert batch_margin(m, batch) == pytest.approx(want, rel=1e-12)

    def test_requires_negatives(self):
        m = EncoderModel.init(64, 4)
        with pytest.raises(ValueError):
            batch_margin(m, [Example(AB, AB, [])])
        with pytest.raises(ValueError):
            batch_margin(m, [])
