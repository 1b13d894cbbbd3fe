"""Loss identities, brute-force oracles, and gradient contracts."""

import numpy as np
import pytest

from pulseprint import autodiff as ad
from pulseprint.gradcheck import check_gradients
from pulseprint.losses import LossConfig, byol_loss, combined_loss, infonce, koleo


def rng(seed):
    return np.random.default_rng(seed)


def t64(a, grad=False):
    return ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def infonce_oracle(a, b, tau):
    """Unstabilized direct evaluation in float64."""
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    s = an @ bn.T
    n = a.shape[0]
    total = 0.0
    for i in range(n):
        den = sum(np.exp(s[i, j] / tau) for j in range(n) if j != i)
        total += -np.log(np.exp(s[i, i] / tau) / den)
    return total / n


def koleo_oracle(h, eps):
    hn = h / np.linalg.norm(h, axis=1, keepdims=True)
    n = h.shape[0]
    total = 0.0
    for i in range(n):
        dmin = min(float(((hn[i] - hn[j]) ** 2).sum()) for j in range(n) if j != i)
        total += np.log(dmin + eps)
    return -total / n


class TestInfonce:
    def test_identical_rows_give_log_of_n_minus_1(self):
        h = np.tile(rng(0).normal(size=(1, 8)), (3, 1))
        out = infonce(t64(h), t64(h.copy()), temperature=0.04)
        np.testing.assert_allclose(out.item(), np.log(2.0), rtol=1e-6)

    def test_orthogonal_pair_reaches_minus_inverse_temperature(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = infonce(t64(a), t64(a.copy()), temperature=0.04)
        np.testing.assert_allclose(out.item(), -25.0, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_unstabilized_oracle(self, seed):
        r = rng(40 + seed)
        a, b = r.normal(size=(8, 16)), r.normal(size=(8, 16))
        out = infonce(t64(a), t64(b), temperature=0.04)
        np.testing.assert_allclose(out.item(), infonce_oracle(a, b, 0.04), rtol=1e-9)

    def test_row_scaling_invariance(self):
        r = rng(1)
        a, b = r.normal(size=(6, 10)), r.normal(size=(6, 10))
        sa = a * r.uniform(0.1, 10.0, size=(6, 1))
        sb = b * r.uniform(0.1, 10.0, size=(6, 1))
        np.testing.assert_allclose(infonce(t64(sa), t64(sb)).item(),
                                   infonce(t64(a), t64(b)).item(), rtol=1e-9)

    def test_invalid_arguments_rejected(self):
        h = t64(np.ones((4, 3)))
        with pytest.raises(ValueError):
            infonce(h, h, temperature=0.0)
        with pytest.raises(ValueError):
            infonce(t64(np.ones((1, 3))), t64(np.ones((1, 3))))
        with pytest.raises(ValueError):
            infonce(h, t64(np.ones((3, 3))))

    def test_gradients_match_finite_differences(self):
        r = rng(2)
        a = t64(r.normal(size=(5, 7)), grad=True)
        b = t64(r.normal(size=(5, 7)), grad=True)
        check_gradients(lambda: infonce(a, b, temperature=0.5), [a, b])

    def test_gradient_flows_through_both_views(self):
        r = rng(3)
        a = t64(r.normal(size=(4, 6)), grad=True)
        b = t64(r.normal(size=(4, 6)), grad=True)
        ad.reset_tape()
        ad.backward(infonce(a, b))
        assert np.abs(a.grad).max() > 0
        assert np.abs(b.grad).max() > 0


class TestKoleo:
    def test_antipodal_pair(self):
        h = np.array([[1.0, 0.0], [-1.0, 0.0]])
        np.testing.assert_allclose(koleo(t64(h)).item(), -np.log(4.0), atol=1e-9)

    def test_duplicate_rows_stay_finite(self):
        h = np.ones((3, 4))
        out = koleo(t64(h), eps=1e-8).item()
        assert np.isfinite(out)
        np.testing.assert_allclose(out, -np.log(1e-8), rtol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_oracle(self, seed):
        h = rng(50 + seed).normal(size=(9, 12))
        np.testing.assert_allclose(koleo(t64(h), eps=1e-8).item(),
                                   koleo_oracle(h, 1e-8), rtol=1e-9)

    def test_gradients_match_finite_differences(self):
        h = t64(rng(4).normal(size=(6, 5)), grad=True)
        check_gradients(lambda: koleo(h), [h])

    def test_spreading_rows_decreases_penalty(self):
        tight = rng(5).normal(size=(8, 4)) * 0.01 + 1.0
        spread = np.eye(8, 4) * 2 - 1
        assert koleo(t64(spread)).item() < koleo(t64(tight)).item()


class TestByol:
    def test_aligned_rows_give_zero(self):
        h = rng(6).normal(size=(5, 8))
        np.testing.assert_allclose(byol_loss(t64(h), t64(2.5 * h)).item(), 0.0, atol=1e-12)

    def test_opposed_rows_give_four(self):
        h = rng(7).normal(size=(5, 8))
        np.testing.assert_allclose(byol_loss(t64(h), t64(-h)).item(), 4.0, rtol=1e-12)

    def test_bounded_between_zero_and_four(self):
        r = rng(8)
        for _ in range(20):
            v = byol_loss(t64(r.normal(size=(6, 4))), t64(r.normal(size=(6, 4)))).item()
            assert 0.0 <= v <= 4.0

    def test_target_with_gradient_rejected(self):
        p = t64(np.ones((3, 4)))
        tgt = t64(np.ones((3, 4)), grad=True)
        with pytest.raises(ValueError):
            byol_loss(p, tgt)

    def test_gradients_match_finite_differences(self):
        r = rng(9)
        p = t64(r.normal(size=(4, 6)), grad=True)
        tgt = t64(r.normal(size=(4, 6)))
        check_gradients(lambda: byol_loss(p, tgt), [p])


class TestCombinedLoss:
    @staticmethod
    def batches(seed, n=6, d=8):
        r = rng(seed)
        return (t64(r.normal(size=(n, d)), grad=True), t64(r.normal(size=(n, d)), grad=True),
                t64(r.normal(size=(n, d))), t64(r.normal(size=(n, d))))

    def test_halving_switch_is_an_exact_factor_of_two(self):
        h1, h2, m1, m2 = self.batches(10)
        halved = combined_loss(h1, h2, m1, m2, LossConfig(halve_terms=True)).item()
        full = combined_loss(h1, h2, m1, m2, LossConfig(halve_terms=False)).item()
        np.testing.assert_allclose(full, 2.0 * halved, rtol=1e-12)

    def test_matches_term_by_term_oracle(self):
        h1, h2, m1, m2 = self.batches(11)
        cfg = LossConfig()
        want = 0.5 * (infonce_oracle(h1.data, m2.data, cfg.temperature)
                      + infonce_oracle(h2.data, m1.data, cfg.temperature)) \
            + 0.5 * cfg.koleo_weight * (koleo_oracle(h1.data, cfg.koleo_eps)
                                        + koleo_oracle(h2.data, cfg.koleo_eps))
        np.testing.assert_allclose(combined_loss(h1, h2, m1, m2, cfg).item(), want, rtol=1e-9)

    def test_zero_weight_drops_spread_term(self):
        h1, h2, m1, m2 = self.batches(12)
        cfg = LossConfig(koleo_weight=0.0)
        want = 0.5 * (infonce_oracle(h1.data, m2.data, cfg.temperature)
                      + infonce_oracle(h2.data, m1.data, cfg.temperature))
        np.testing.assert_allclose(combined_loss(h1, h2, m1, m2, cfg).item(), want, rtol=1e-9)

    def test_momentum_inputs_on_tape_rejected(self):
        h1, h2, _, _ = self.batches(13)
        live1 = t64(rng(14).normal(size=(6, 8)), grad=True)
        live2 = t64(rng(15).normal(size=(6, 8)), grad=True)
        with pytest.raises(ValueError):
            combined_loss(h1, h2, live1, live2, LossConfig())

    def test_no_gradient_reaches_momentum_branch(self):
        h1, h2, m1, m2 = self.batches(16)
        ad.reset_tape()
        ad.backward(combined_loss(h1, h2, m1, m2, LossConfig()))
        assert h1.grad is not None and h2.grad is not None
        assert m1.grad is None and m2.grad is None

    def test_gradients_match_finite_differences(self):
        h1, h2, m1, m2 = self.batches(17, n=5, d=6)
        check_gradients(lambda: combined_loss(h1, h2, m1, m2, LossConfig(temperature=0.5)),
                        [h1, h2])
