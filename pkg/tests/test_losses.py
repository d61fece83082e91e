import math
from decimal import Decimal, getcontext

import numpy as np
import pytest

from ragncd.losses import (
    LossBatch,
    LossError,
    _softmax_masked,
    fd_check,
    random_batch,
    sup_loss,
    total_loss,
    total_loss_grad,
    unsup_loss,
    unsup_losses,
)

getcontext().prec = 50
E = Decimal(1).exp()


def batch_from_logits(Z, Zp, **kw):
    return LossBatch(np.asarray(Z, float), np.asarray(Zp, float), **kw)


class TestUnsup:
    def test_two_point_example(self):
        b = batch_from_logits([[1, 0], [0, 1]], [[1, 0], [0, 1]], tau=1.0)
        expected = -(E / Decimal(0).exp()).ln()
        assert abs(unsup_loss(b, 0) - float(expected)) < 1e-12
        assert unsup_loss(b, 0) == pytest.approx(-1.0, abs=1e-12)

    @pytest.mark.parametrize("B", [2, 3, 5, 9])
    def test_equal_logits(self, B):
        v = np.ones((B, 3)) / np.sqrt(3)
        b = batch_from_logits(v, v, tau=0.07)
        np.testing.assert_allclose(unsup_losses(b), math.log(B - 1), atol=1e-9)

    def test_single_row(self):
        with pytest.raises(LossError, match="at least 2"):
            unsup_loss(batch_from_logits([[1, 0]], [[1, 0]]), 0)

    def test_negative_value_demonstrates_excluded_positive(self):
        b = batch_from_logits([[1, 0], [0, 1]], [[1, 0], [0, 1]], tau=0.5)
        assert unsup_loss(b, 0) < 0
        inc = batch_from_logits([[1, 0], [0, 1]], [[1, 0], [0, 1]], tau=0.5, denominator="include-positive")
        assert unsup_loss(inc, 0) > 0

    def test_include_positive_value(self):
        b = batch_from_logits([[1, 0], [0, 1]], [[1, 0], [0, 1]], tau=1.0, denominator="include-positive")
        assert unsup_loss(b, 0) == pytest.approx(float(-(E / (E + 1)).ln()), abs=1e-12)
        # a single row is legal here: the positive alone fills the denominator
        assert unsup_loss(batch_from_logits([[1, 0]], [[1, 0]], denominator="include-positive"), 0) == 0.0

    def test_tiny_tau_stays_finite(self):
        b = batch_from_logits([[1, 0], [0.6, 0.8]], [[0.8, 0.6], [0, 1]], tau=1e-4)
        # -(s_00 - s_01)/tau with s_00 = 0.8, s_01 = 0
        assert unsup_loss(b, 0) == pytest.approx(-0.8 / 1e-4, rel=1e-12)


class TestSup:
    def test_single_positive(self):
        b = batch_from_logits([[1, 0], [1, 0]], [[1, 0], [1, 0]], labels=["a", "a"], tau=1.0)
        assert sup_loss(b, 0) == 0.0

    def test_three_rows(self):
        b = batch_from_logits([[1, 0], [1, 0], [0, 1]], np.eye(2)[[0, 0, 1]], labels=["a", "a", "b"], tau=1.0)
        expected = float(-(E / (E + 1)).ln())
        assert abs(sup_loss(b, 0) - expected) < 1e-12
        assert sup_loss(b, 0) == pytest.approx(0.31326, abs=1e-5)

    def test_empty_positive_set(self):
        b = batch_from_logits(np.eye(2), np.eye(2), labels=["a", "b"])
        with pytest.raises(LossError, match="empty positive set"):
            sup_loss(b, 0)

    def test_unlabelled_anchor(self):
        b = batch_from_logits(np.eye(2), np.eye(2), labels=["a", None])
        with pytest.raises(LossError, match="unlabelled"):
            sup_loss(b, 1)

    def test_uses_anchor_view_only(self, rng):
        b = random_batch(rng, 6, 4, lam=1.0)
        other = LossBatch(b.Z, rng.standard_normal(b.Z.shape), b.labels, b.tau, 1.0)
        assert total_loss(b) == total_loss(other)


def independent_parts(b):
    """Per-row loops over the formulas, no shared helpers."""
    Z, Zp, tau = b.Z, b.Zp, b.tau
    B = len(Z)
    unsup = 0.0
    for i in range(B):
        den = sum(math.exp(Z[i] @ Zp[n] / tau) for n in range(B) if n != i)
        unsup += -math.log(math.exp(Z[i] @ Zp[i] / tau) / den)
    sup = 0.0
    for i in range(B):
        if b.labels[i] is None:
            continue
        pos = [q for q in range(B) if q != i and b.labels[q] == b.labels[i]]
        den = sum(math.exp(Z[i] @ Z[n] / tau) for n in range(B) if n != i)
        sup += -sum(math.log(math.exp(Z[i] @ Z[q] / tau) / den) for q in pos) / len(pos)
    return unsup, sup


class TestTotal:
    @pytest.mark.parametrize("seed", range(5))
    def test_endpoints(self, seed):
        r = np.random.default_rng(seed)
        b0 = random_batch(r, 8, 5, tau=0.5, lam=0.0)
        unsup, sup = independent_parts(b0)
        assert abs(total_loss(b0) - unsup) < 1e-9
        b1 = LossBatch(b0.Z, b0.Zp, b0.labels, b0.tau, 1.0)
        assert abs(total_loss(b1) - sup) < 1e-9

    def test_quarter_weighting(self, rng):
        b = random_batch(rng, 8, 6, tau=0.5, lam=0.25)
        unsup, sup = independent_parts(b)
        assert abs(total_loss(b) - (0.75 * unsup + 0.25 * sup)) < 1e-9

    def test_linear_in_lambda(self, rng):
        b = random_batch(rng, 10, 3, tau=0.2)
        at = lambda lam: total_loss(LossBatch(b.Z, b.Zp, b.labels, b.tau, lam))
        A, Bv = at(0.0), at(1.0)
        for lam in (0.0, 0.1, 0.25, 0.6, 1.0):
            assert abs(at(lam) - ((1 - lam) * A + lam * Bv)) < 1e-9

    def test_validation(self):
        with pytest.raises(LossError, match="tau"):
            LossBatch(np.eye(2), np.eye(2), tau=0)
        with pytest.raises(LossError, match="lambda"):
            LossBatch(np.eye(2), np.eye(2), lam=1.5)
        with pytest.raises(LossError, match="matching"):
            LossBatch(np.eye(2), np.eye(3))


def test_shift_stability():
    r = np.random.default_rng(3)
    logits = r.standard_normal((5, 5))
    mask = ~np.eye(5, dtype=bool)
    base, p = _softmax_masked(logits, mask)
    shift = r.uniform(-800, 800, size=(5, 1))
    moved, p2 = _softmax_masked(logits + shift, mask)
    np.testing.assert_allclose(moved - shift[:, 0], base, atol=1e-9)
    np.testing.assert_allclose(p2, p, atol=1e-12)


class TestGradient:
    def test_two_point_closed_form(self, rng):
        Z = rng.standard_normal((2, 3))
        Zp = rng.standard_normal((2, 3))
        b = LossBatch(Z, Zp, tau=0.3, lam=0.0)
        gZ, gZp = total_loss_grad(b)
        # with one term per denominator, L = sum_i (Z_i.Zp_{1-i} - Z_i.Zp_i) / tau
        np.testing.assert_allclose(gZ[0], (Zp[1] - Zp[0]) / 0.3, atol=1e-12)
        np.testing.assert_allclose(gZ[1], -gZ[0], atol=1e-12)
        np.testing.assert_allclose(gZp[0], (Z[1] - Z[0]) / 0.3, atol=1e-12)
        np.testing.assert_allclose(gZp[1], -gZp[0], atol=1e-12)

    def test_symmetric_batch(self):
        angles = 2 * np.pi * np.arange(3) / 3
        Z = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        b = LossBatch(Z, Z.copy(), tau=1.0, lam=0.0)
        # cross logits are all equal but nothing forces a zero gradient; check against differences
        assert fd_check(b) < 1e-4

    @pytest.mark.parametrize("denominator", ["exclude-positive", "include-positive"])
    def test_finite_differences(self, denominator):
        r = np.random.default_rng(11)
        worst = 0.0
        for lam in (0.0, 0.25, 1.0):
            for tau in (0.07, 1.0):
                for _ in range(4):
                    b = random_batch(r, int(r.integers(2, 17)), int(r.choice([3, 8])),
                                     tau=tau, lam=lam, denominator=denominator)
                    worst = max(worst, fd_check(b))
        assert worst < 1e-4
