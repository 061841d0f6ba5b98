import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consistgnn import numerics as nx
from consistgnn.errors import ConfigError, ShapeError
from consistgnn.losses import (
    ConsistencyConfig,
    TsaSchedule,
    combine_losses,
    combined_batch_loss,
    consistency_loss,
    distillation_loss,
    kl_rows,
    sharpen,
    tsa_masked_cross_entropy,
)
from consistgnn.numerics import GradTensor

from _gradcheck import analytic_grads, gradcheck, numeric_grads, relative_error


def simplex_rows(rng, m, c):
    p = rng.random((m, c)) + 0.05
    return p / p.sum(axis=1, keepdims=True)


probs = st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6).map(
    lambda xs: np.array(xs) / sum(xs))


class TestSharpen:
    def test_known_value(self):
        out = sharpen(np.array([[0.8, 0.2]]), 0.4)
        np.testing.assert_allclose(out, [[0.96969697, 0.03030303]], atol=1e-8)

    def test_identity_at_one(self):
        p = np.array([[0.3, 0.7]])
        assert np.array_equal(sharpen(p, 1.0), p)
        t = GradTensor(p)
        assert sharpen(t, 1.0) is t

    def test_uniform_fixed_point(self):
        np.testing.assert_allclose(sharpen(np.full((1, 4), 0.25), 0.3), np.full((1, 4), 0.25))

    @pytest.mark.parametrize("T", [0.1, 0.4, 1.0])
    def test_one_hot_fixed_point(self, T):
        assert sharpen(np.array([[0.0, 1.0, 0.0]]), T).tolist() == [[0.0, 1.0, 0.0]]

    def test_bad_temperature(self):
        with pytest.raises(ConfigError):
            sharpen(np.array([[0.5, 0.5]]), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(probs, st.floats(0.05, 1.0))
    def test_stays_on_simplex_and_keeps_argmax(self, p, T):
        out = sharpen(p[None, :], T)[0]
        assert abs(out.sum() - 1.0) < 1e-12
        assert out[np.argmax(p)] >= p.max() - 1e-12


class TestKl:
    def test_known_value(self):
        kl = kl_rows(np.array([[0.5, 0.5]]), np.array([[0.9, 0.1]]))
        assert kl.item() == pytest.approx(0.5108256238, abs=1e-9)

    def test_zero_on_identity(self):
        p = simplex_rows(np.random.default_rng(0), 5, 3)
        assert np.abs(kl_rows(p, p).values).max() <= 1e-12

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(8)
        p, q = rng.dirichlet(np.ones(5), 1000), rng.dirichlet(np.ones(5), 1000)
        assert kl_rows(p, q).values.min() >= 0.0

    def test_zero_entries_are_finite(self):
        assert math.isfinite(kl_rows(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])).item())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            kl_rows(np.ones((2, 2)) / 2, np.ones((1, 2)) / 2)

    @settings(max_examples=50, deadline=None)
    @given(probs, st.integers(0, 2**32 - 1))
    def test_gibbs_inequality(self, p, seed):
        q = simplex_rows(np.random.default_rng(seed), 1, p.size)
        assert kl_rows(p[None, :], q).item() >= -1e-12


class TestConsistency:
    def cfg(self, **kw):
        kw.setdefault("alpha", 1.0)
        return ConsistencyConfig(**kw)

    def test_opposite_views(self):
        views = [GradTensor([[0.6, 0.4]]), GradTensor([[0.4, 0.6]])]
        loss = consistency_loss(views, self.cfg(temperature=1.0))
        # teacher is uniform, so each term is ln2 minus the view entropy
        expected = 0.6 * math.log(1.2) + 0.4 * math.log(0.8)
        assert loss.item() == pytest.approx(expected, abs=1e-12)
        assert loss.item() == pytest.approx(0.0201355136, abs=1e-9)

    def test_identical_views_at_unit_temperature(self):
        p = simplex_rows(np.random.default_rng(1), 4, 3)
        loss = consistency_loss([GradTensor(p), GradTensor(p)], self.cfg(temperature=1.0))
        assert abs(loss.item()) <= 1e-12

    def test_sharp_limit_is_cross_entropy(self):
        views = [np.array([[0.7, 0.2, 0.1]]), np.array([[0.5, 0.3, 0.2]])]
        loss = consistency_loss([GradTensor(v) for v in views], self.cfg(temperature=0.02)).item()
        # teacher is nearly one-hot on class 0, so each KL tends to -H(view) - ln(floor) on other classes
        teacher = sharpen(np.mean(views, axis=0), 0.02)
        assert teacher[0, 0] > 1 - 1e-9
        expected = np.mean([kl_rows(v, teacher).item() for v in views])
        assert loss == pytest.approx(expected, abs=1e-12)
        assert loss > 5.0

    def test_matches_averaged_distillation(self):
        rng = np.random.default_rng(2)
        views = [simplex_rows(rng, 6, 4) for _ in range(3)]
        cfg = self.cfg(num_views=3)
        teacher = sharpen(np.mean(views, axis=0), cfg.temperature)
        expected = np.mean([distillation_loss(v, teacher, 1.0) for v in views])
        got = consistency_loss([GradTensor(v) for v in views], cfg).item()
        assert abs(got - expected) <= 1e-12

    def test_swap_reverses_arguments(self):
        rng = np.random.default_rng(3)
        views = [simplex_rows(rng, 3, 3) for _ in range(2)]
        teacher = sharpen(np.mean(views, axis=0), 0.4)
        expected = np.mean([kl_rows(teacher, v).values.mean() for v in views])
        got = consistency_loss([GradTensor(v) for v in views], self.cfg(swap_kl=True)).item()
        assert got == pytest.approx(expected, abs=1e-12)

    def test_view_count_checked(self):
        p = GradTensor([[0.5, 0.5]])
        with pytest.raises(ConfigError):
            consistency_loss([p], self.cfg())
        with pytest.raises(ConfigError):
            consistency_loss([p, p, p], self.cfg(num_views=2))

    @pytest.mark.parametrize("kw", [{"alpha": -1.0}, {"temperature": 0.0},
                                    {"temperature": 1.5}, {"num_views": 1}])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            self.cfg(**kw)

    @pytest.mark.parametrize("swap", [False, True])
    def test_gradient_through_teacher(self, swap):
        rng = np.random.default_rng(4)
        logits = [GradTensor(rng.standard_normal((4, 3)), requires_grad=True) for _ in range(2)]
        cfg = self.cfg(detach_teacher=False, swap_kl=swap)
        assert gradcheck(lambda: consistency_loss([nx.softmax_rows(z) for z in logits], cfg),
                         logits) < 1e-5

    @pytest.mark.parametrize("swap", [False, True])
    def test_gradient_with_detached_teacher(self, swap):
        rng = np.random.default_rng(5)
        logits = [GradTensor(rng.standard_normal((4, 3)), requires_grad=True) for _ in range(2)]
        cfg = self.cfg(swap_kl=swap)
        analytic = analytic_grads(
            lambda: consistency_loss([nx.softmax_rows(z) for z in logits], cfg), logits)
        # finite differences against the same loss with the teacher frozen
        teacher = sharpen(np.mean([nx.softmax_rows(z).values for z in logits], axis=0), 0.4)

        def frozen():
            kls = [kl_rows(teacher, nx.softmax_rows(z)) if swap else kl_rows(nx.softmax_rows(z), teacher)
                   for z in logits]
            return nx.scale(nx.add(nx.sum_all(kls[0]), nx.sum_all(kls[1])), 1 / 8)

        assert relative_error(analytic, numeric_grads(frozen, logits)) < 1e-5


class TestTsa:
    def test_endpoints(self):
        s = TsaSchedule(4, 100)
        assert s.threshold(0) == 0.25
        assert s.threshold(100) == 1.0
        assert s.threshold(50) == pytest.approx(0.625)

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            TsaSchedule(2, 10).threshold(11)

    def test_uniform_logits_give_ln_c(self):
        loss = tsa_masked_cross_entropy(GradTensor(np.zeros((3, 2))), [0, 1, 0], TsaSchedule(2, 10), 5)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_confident_rows_masked(self):
        logits = GradTensor([[10.0, 0.0], [0.0, 0.0]])
        loss = tsa_masked_cross_entropy(logits, [0, 0], TsaSchedule(2, 10), 0)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_masked_row_gets_no_gradient(self):
        # true-class probability 0.99 at step 0 is above 1/c
        z = GradTensor([[np.log(99.0), 0.0], [0.0, 0.0]], requires_grad=True)
        with nx.Tape() as tape:
            loss = tsa_masked_cross_entropy(z, [0, 0], TsaSchedule(2, 10), 0)
        nx.backward(tape, loss)
        assert z.grad[0].tolist() == [0.0, 0.0]
        assert np.abs(z.grad[1]).sum() > 0

    def test_all_masked_is_zero(self):
        logits = GradTensor([[10.0, 0.0]])
        assert tsa_masked_cross_entropy(logits, [0], TsaSchedule(2, 10), 0).item() == 0.0

    def test_nothing_masked_at_end(self):
        logits = GradTensor([[30.0, 0.0]])
        loss = tsa_masked_cross_entropy(logits, [0], TsaSchedule(2, 10), 10)
        assert loss.item() > 0

    def test_label_range(self):
        with pytest.raises(IndexError):
            tsa_masked_cross_entropy(GradTensor(np.zeros((1, 2))), [2], TsaSchedule(2, 1), 0)

    def test_gradient(self):
        z = GradTensor(np.random.default_rng(5).standard_normal((5, 3)), requires_grad=True)
        assert gradcheck(lambda: tsa_masked_cross_entropy(z, [0, 1, 2, 1, 0], TsaSchedule(3, 4), 4),
                         [z]) < 1e-5


class TestCombined:
    def test_known_value(self):
        sup = GradTensor([[math.log(2)]])
        con = GradTensor([[0.0201355136]])
        assert combine_losses(sup, con, 2.0).item() == pytest.approx(0.7334182077, abs=1e-9)

    def test_alpha_zero_returns_supervised(self):
        sup = GradTensor([[1.0]])
        assert combine_losses(sup, GradTensor([[5.0]]), 0.0) is sup

    def test_linear_in_alpha(self):
        rng = np.random.default_rng(9)
        logits = GradTensor(rng.standard_normal((3, 3)))
        views = [GradTensor(rng.dirichlet(np.ones(3), 4)) for _ in range(2)]
        sched = TsaSchedule(3, 5)
        sup = combined_batch_loss(logits, [0, 1, 2], None, None, sched, 5).item()
        extra = [combined_batch_loss(logits, [0, 1, 2], views, ConsistencyConfig(alpha=a), sched, 5).item() - sup
                 for a in (0.3, 0.6)]
        assert extra[1] == pytest.approx(2 * extra[0], rel=1e-12)

    def test_batch_gradient(self):
        rng = np.random.default_rng(6)
        sup_logits = GradTensor(rng.standard_normal((3, 3)), requires_grad=True)
        unl = [GradTensor(rng.standard_normal((4, 3)), requires_grad=True) for _ in range(2)]
        cfg = ConsistencyConfig(alpha=0.7, detach_teacher=False)

        def loss():
            views = [nx.softmax_rows(u) for u in unl]
            return combined_batch_loss(sup_logits, [0, 2, 1], views, cfg, TsaSchedule(3, 10), 10)

        assert gradcheck(loss, [sup_logits, *unl]) < 1e-5


class TestDistillation:
    def test_known_value(self):
        assert distillation_loss(np.array([[0.5, 0.5]]), np.array([[0.9, 0.1]])) == \
            pytest.approx(0.5108256238, abs=1e-9)

    def test_student_equals_teacher(self):
        p = np.random.default_rng(10).dirichlet(np.ones(3), 5)
        assert abs(distillation_loss(p, p, 0.7)) <= 1e-15

    def test_temperature_tempers_both(self):
        s, t = np.array([[0.7, 0.3]]), np.array([[0.2, 0.8]])
        expected = kl_rows(sharpen(s, 0.5), sharpen(t, 0.5)).item()
        assert distillation_loss(s, t, 0.5) == pytest.approx(expected, abs=1e-15)
