import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsanet import tensor as T
from lsanet.supervision import (LossConfigError, cross_entropy, dsn_loss, knowledge_synergy_loss,
                                lsa_weighted_loss, total_objective)
from lsanet.tensor import Tensor


def probs(rng, n=5, k=4):
    z = rng.standard_normal((n, k))
    e = np.exp(z)
    return Tensor(e / e.sum(axis=1, keepdims=True))


def outputs(seed, count=4, n=5, k=4):
    rng = np.random.default_rng(seed)
    return [probs(rng, n, k) for _ in range(count)], rng.integers(0, k, n)


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(Tensor(np.full((3, 7), 1 / 7)), [0, 3, 6]).item() == pytest.approx(math.log(7), abs=1e-15)

    def test_one_hot_is_zero(self):
        assert cross_entropy(Tensor(np.eye(3)), [0, 1, 2]).item() == 0.0

    def test_known_value(self):
        out = cross_entropy(Tensor([[0.9, 0.1]]), [0]).item()
        assert out == pytest.approx(0.10536051565782628, abs=1e-14)

    def test_zero_probability_stays_finite(self):
        assert math.isfinite(cross_entropy(Tensor([[1.0, 0.0]]), [1]).item())

    def test_label_out_of_range(self):
        with pytest.raises(LossConfigError, match="labels"):
            cross_entropy(Tensor(np.full((2, 3), 1 / 3)), [0, 3])


class TestDeepSupervision:
    def test_zero_alpha_is_bit_equal_to_final_loss(self):
        outs, y = outputs(0)
        assert dsn_loss(outs, y, [0.0] * 3).item() == cross_entropy(outs[-1], y).item()

    def test_unit_alpha_is_plain_sum(self):
        outs, y = outputs(1)
        expected = sum(cross_entropy(p, y).item() for p in outs)
        assert dsn_loss(outs, y, [1.0] * 3).item() == pytest.approx(expected, rel=1e-14)

    def test_alpha_count_mismatch(self):
        outs, y = outputs(2)
        with pytest.raises(LossConfigError, match="alpha"):
            dsn_loss(outs, y, [1.0, 1.0])

    def test_negative_alpha(self):
        outs, y = outputs(2)
        with pytest.raises(LossConfigError, match="non-negative"):
            dsn_loss(outs, y, [1.0, -1.0, 1.0])


class TestBranchWeightedLoss:
    def test_one_hot_beta_picks_final(self):
        outs, y = outputs(3)
        assert lsa_weighted_loss(outs, y, [0, 0, 0, 1]).item() == cross_entropy(outs[-1], y).item()

    def test_uniform_beta_is_average(self):
        outs, y = outputs(4)
        mean = np.mean([cross_entropy(p, y).item() for p in outs])
        assert lsa_weighted_loss(outs, y, [0.25] * 4).item() == pytest.approx(mean, rel=1e-14)

    def test_beta_shape(self):
        outs, y = outputs(5)
        with pytest.raises(LossConfigError, match="beta"):
            lsa_weighted_loss(outs, y, [0.5, 0.5])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_beta(self, seed, a, b):
        outs, y = outputs(seed)
        rng = np.random.default_rng(seed + 1)
        b1, b2 = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
        lhs = lsa_weighted_loss(outs, y, a * b1 + b * b2).item()
        rhs = a * lsa_weighted_loss(outs, y, b1).item() + b * lsa_weighted_loss(outs, y, b2).item()
        assert abs(lhs - rhs) <= 1e-10


class TestKnowledgeSynergy:
    def test_identical_outputs_give_zero(self):
        p, _ = outputs(6, count=1)
        assert knowledge_synergy_loss([p[0], Tensor(p[0].data.copy()), Tensor(p[0].data.copy())]).item() == 0.0

    def test_two_point_kl(self):
        p, q = [0.5, 0.5], [0.9, 0.1]
        kl_pq = sum(a * math.log(a / b) for a, b in zip(p, q))
        kl_qp = sum(b * math.log(b / a) for a, b in zip(p, q))
        out = knowledge_synergy_loss([Tensor([p]), Tensor([q])]).item()
        assert out == pytest.approx(kl_pq + kl_qp, abs=1e-14)

    def test_non_negative(self):
        for seed in range(20):
            outs, _ = outputs(seed)
            assert knowledge_synergy_loss(outs).item() >= 0.0

    def test_pair_weights_scale_terms(self):
        outs, _ = outputs(7, count=2)
        base = knowledge_synergy_loss(outs).item()
        mu = np.array([[0.0, 2.0], [0.0, 0.0]])
        one_way = knowledge_synergy_loss(outs, mu).item()
        other = knowledge_synergy_loss(outs, mu.T).item()
        assert one_way + other == pytest.approx(2 * base, rel=1e-13)

    def test_targets_receive_no_gradient(self):
        p = Tensor(np.array([[0.3, 0.7]]), requires_grad=True)
        q = Tensor(np.array([[0.6, 0.4]]), requires_grad=True)
        gp, gq = T.grad_of(knowledge_synergy_loss([p, q], mu=np.array([[0.0, 1.0], [0.0, 0.0]])), [p, q])
        assert np.all(gq == 0.0)
        np.testing.assert_allclose(gp, np.log(p.data / q.data) + 1.0, atol=1e-14)

    def test_unnormalized_rows_rejected(self):
        with pytest.raises(LossConfigError, match="normalized"):
            knowledge_synergy_loss([Tensor([[0.5, 0.6]]), Tensor([[0.5, 0.5]])])

    def test_needs_two(self):
        with pytest.raises(LossConfigError):
            knowledge_synergy_loss([Tensor([[1.0]])])


class TestObjective:
    def test_baseline_is_final_cross_entropy(self):
        outs, y = outputs(8)
        total, parts = total_objective("baseline", outs, y)
        assert total.item() == cross_entropy(outs[-1], y).item() and set(parts) == {"ce"}

    def test_mode_lattice(self):
        outs, y = outputs(9)
        beta = [0.1, 0.2, 0.3, 0.4]
        kw = dict(alpha=[1.0] * 3, beta=beta, mu=1.0)
        dsn = total_objective("dsn", outs, y, **kw)[0].item()
        ks = knowledge_synergy_loss(outs).item()
        lb = lsa_weighted_loss(outs, y, beta).item()
        assert total_objective("dsn+ks", outs, y, **kw)[0].item() == pytest.approx(dsn + ks, rel=1e-14)
        assert total_objective("dsn+lsa", outs, y, **kw)[0].item() == pytest.approx(lb, rel=1e-14)
        total, parts = total_objective("lsanet", outs, y, **kw)
        assert total.item() == pytest.approx(lb + ks, rel=1e-14)
        assert set(parts) == {"lb", "lk"}

    def test_single_classifier_modes_skip_synergy(self):
        outs, y = outputs(10, count=1)
        total, parts = total_objective("lsanet", outs, y, beta=[1.0], mu=1.0)
        assert set(parts) == {"lb"}
        assert total.item() == cross_entropy(outs[0], y).item()

    @pytest.mark.parametrize("mode,missing", [("dsn", "alpha"), ("dsn+lsa", "beta"), ("lsanet", "mu")])
    def test_missing_component(self, mode, missing):
        outs, y = outputs(11)
        kw = dict(alpha=[1.0] * 3, beta=[0.25] * 4, mu=1.0)
        kw[missing] = None
        with pytest.raises(LossConfigError, match=missing):
            total_objective(mode, outs, y, **kw)

    def test_unknown_mode(self):
        outs, y = outputs(12)
        with pytest.raises(LossConfigError, match="unknown mode"):
            total_objective("dsn+foo", outs, y)
