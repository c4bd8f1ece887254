import numpy as np
import pytest

from selhn.graddiag import (delta_s_per_anchor, finite_diff_check,
                            first_layer_grad_norm, max_rel_error,
                            tangent_report, vanishing_predicate,
                            VanishingReport)
from selhn.losses import LOSS_IDS, LossHyper, loss_by_id

from conftest import unit_rows
from oracles import naive_delta_s

H = LossHyper(margin=0.2, epsilon=0.01)


class TestDeltaS:
    def test_equal_scores_give_zero(self):
        s = np.array([[0.5, 0.5], [0.2, 0.9]])
        assert delta_s_per_anchor(s).i2t[0] == 0.0

    def test_hand_case(self):
        s = np.array([[0.6, 0.5], [0.7, 0.4]])
        assert abs(delta_s_per_anchor(s).i2t[0] - 0.1) < 1e-15

    def test_matches_naive(self, rng):
        s = rng.uniform(-1, 1, size=(7, 7))
        got = delta_s_per_anchor(s)
        want_i2t, want_t2i = naive_delta_s(s)
        np.testing.assert_allclose(got.i2t, want_i2t, atol=1e-15)
        np.testing.assert_allclose(got.t2i, want_t2i, atol=1e-15)

    def test_matches_mining_record_for_every_loss(self, rng):
        s = rng.uniform(-1, 1, size=(6, 6))
        ds = delta_s_per_anchor(s)
        for loss_id in LOSS_IDS:
            rec = loss_by_id(loss_id)(s, H).mining
            np.testing.assert_array_equal(rec.i2t_delta_s, ds.i2t)
            np.testing.assert_array_equal(rec.t2i_delta_s, ds.t2i)

    def test_rejects_singleton(self):
        with pytest.raises(ValueError):
            delta_s_per_anchor(np.array([[1.0]]))


class TestVanishingPredicate:
    def test_below_threshold(self):
        assert vanishing_predicate(0.005, 0.01) is True

    def test_above_threshold(self):
        assert vanishing_predicate(0.3, 0.01) is False

    def test_boundary_counts_as_vanishing(self):
        assert vanishing_predicate(0.01, 0.01) is True

    def test_rejects_negative_epsilon(self):
        with pytest.raises(ValueError):
            vanishing_predicate(0.1, -0.1)


class TestTangentReport:
    def _triple(self, rng):
        v, t, t_hat = unit_rows(rng, 3, 8)
        return v, t, t_hat

    def test_stated_formula_values(self):
        # construct v.t_hat = 0.7, v.t = 0.3, ||t_hat - t|| = 1
        v = np.array([1.0, 0.0, 0.0])
        # t_hat, t in the plane spanned by v and e2/e3
        t_hat = np.array([0.7, np.sqrt(1 - 0.49), 0.0])
        t = np.array([0.3, 0.0, np.sqrt(1 - 0.09)])
        g = t_hat - t
        scale = np.linalg.norm(g)
        rep = tangent_report(v, t, t_hat)
        assert abs(rep.g_v_stated - scale * 0.4) < 1e-12
        assert abs(rep.delta_s - 0.4) < 1e-12
        assert abs(rep.g_that_stated - 0.7) < 1e-12
        assert abs(rep.g_t_stated - 0.3) < 1e-12

    def test_coincident_negative_and_positive(self):
        v = np.array([1.0, 0.0])
        t = np.array([0.0, 1.0])
        rep = tangent_report(v, t, t)
        assert rep.g_v_stated == 0.0
        assert rep.g_v_exact == 0.0
        assert rep.delta_s == 0.0

    def test_pythagorean_decomposition(self, rng):
        v, t, t_hat = self._triple(rng)
        rep = tangent_report(v, t, t_hat)
        g = t_hat - t
        radial = float(v @ g)
        assert abs(rep.g_v_exact**2 + radial**2 - float(g @ g)) < 1e-12

    def test_stated_vanishes_with_delta_s(self, rng):
        # shrink the score gap while keeping ||t_hat - t|| bounded away from 0
        v = np.array([1.0, 0.0, 0.0])
        for gap in (0.1, 0.01, 0.001):
            c = 0.5
            t = np.array([c, np.sqrt(1 - c * c), 0.0])
            ch = c + gap
            t_hat = np.array([ch, 0.0, np.sqrt(1 - ch * ch)])
            rep = tangent_report(v, t, t_hat)
            assert abs(rep.g_v_stated) <= np.linalg.norm(t_hat - t) * gap + 1e-15
        assert rep.g_v_stated == pytest.approx(np.linalg.norm(t_hat - t) * 0.001)

    def test_signed_when_hard_negative_below_positive(self):
        v = np.array([1.0, 0.0])
        t = np.array([np.sqrt(0.51), 0.7])
        t_hat = np.array([0.3, np.sqrt(0.91)])
        rep = tangent_report(v, t, t_hat)
        assert rep.g_v_stated < 0
        assert rep.g_v_stated_abs == -rep.g_v_stated

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError, match="unit-norm"):
            tangent_report(np.array([2.0, 0.0]), np.array([1.0, 0.0]),
                           np.array([0.0, 1.0]))


class TestVanishingReport:
    def test_fraction_monotone_and_saturates(self, rng):
        v, t = unit_rows(rng, 12, 6), unit_rows(rng, 12, 6)
        ds = delta_s_per_anchor(v @ t.T)
        rep = VanishingReport(ds.i2t, ds.t2i, {})
        fracs = [rep.fraction_below(e) for e in (0.0, 0.01, 0.1, 0.5, 2.0)]
        assert all(a <= b for a, b in zip(fracs, fracs[1:]))
        assert fracs[-1] == 1.0


class TestFirstLayerGradNorm:
    def test_zero(self):
        assert first_layer_grad_norm({"fc_w": np.zeros((3, 4))}) == 0.0

    def test_3_4_5(self):
        g = np.zeros((2, 2))
        g[0, 0], g[1, 1] = 3.0, 4.0
        assert first_layer_grad_norm({"fc_w": g}) == 5.0

    def test_matches_sum_of_squares(self, rng):
        g = rng.standard_normal((5, 7))
        want = np.sqrt(sum(x * x for x in g.ravel()))
        assert abs(first_layer_grad_norm({"fc_w": g}) - want) < 1e-12


class TestFiniteDiffCheck:
    @pytest.mark.parametrize("loss_id", LOSS_IDS)
    def test_all_losses_pass(self, rng, loss_id):
        checked = 0
        for k in range(6):
            v = rng.standard_normal((4, 8))
            t = rng.standard_normal((4, 8))
            rep = finite_diff_check(loss_id, v, t, H, step=1e-6)
            if rep.skipped:
                continue
            checked += 1
            assert rep.max_rel_error < 1e-4, f"{loss_id}: {rep.max_rel_error}"
        assert checked >= 3

    def test_selhn_mixed_branches(self, rng):
        # large epsilon forces a mix of mining and non-mining anchors
        h = LossHyper(margin=0.2, epsilon=0.3)
        done = 0
        for k in range(8):
            v = rng.standard_normal((6, 8))
            t = rng.standard_normal((6, 8))
            rep = finite_diff_check("selhn", v, t, h, step=1e-6)
            if not rep.skipped:
                done += 1
                assert rep.max_rel_error < 1e-4
        assert done >= 3

    def test_all_hinges_inactive_gives_exact_zero(self):
        # orthogonal design: positives at 1, all negatives at 0
        v = np.eye(4)
        rep = finite_diff_check("triplet", v.copy(), v.copy(),
                                LossHyper(margin=0.2, epsilon=0.01))
        # loss is identically 0 around this point
        assert not rep.skipped
        assert rep.max_rel_error == 0.0

    def test_kink_proximity_skips(self):
        # positive and hard negative exactly margin apart -> hinge at kink
        v = np.array([[1.0, 0.0], [0.0, 1.0]])
        c = 0.8
        t = np.array([[1.0, 0.0], [np.sqrt(1 - c * c), c]])
        rep = finite_diff_check("hn", v, t, LossHyper(margin=1.0 - c, epsilon=0.0))
        assert rep.skipped
        assert "kink" in rep.reason

    def test_rejects_bad_step(self, rng):
        with pytest.raises(ValueError, match="step"):
            finite_diff_check("hn", rng.standard_normal((3, 4)),
                              rng.standard_normal((3, 4)), H, step=1e-2)


def test_max_rel_error_zero_for_exact_zeros():
    assert max_rel_error(np.zeros(4), np.zeros(4)) == 0.0
