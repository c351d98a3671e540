import numpy as np
import pytest

from sthash.losses import (
    U_FLOOR,
    LossWeights,
    MineEstimator,
    distortion_loss,
    mask_sparsity_loss,
    proposal_matching_loss,
    recon_loss,
    total_loss,
    uncertainty_loss,
)
from sthash.nn import adam_step


class TestReconLoss:
    def test_channel_sum_convention(self):
        # per-channel error 1 on every channel of a single ray sums to 3
        v, _ = recon_loss(np.array([[1.0, 1.0, 1.0]]), np.zeros((1, 3)))
        assert v == 3.0

    def test_mean_over_rays(self):
        r = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        v, _ = recon_loss(r, np.zeros((2, 3)))
        assert v == 0.5

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(0)
        r = rng.random((5, 3))
        tgt = rng.random((5, 3))
        _, d = recon_loss(r, tgt)
        h = 1e-7
        rp = r.copy(); rp[2, 1] += h
        rm = r.copy(); rm[2, 1] -= h
        fd = (recon_loss(rp, tgt)[0] - recon_loss(rm, tgt)[0]) / (2 * h)
        assert abs(fd - d[2, 1]) < 1e-6

    def test_perfect_reconstruction_zero(self):
        x = np.random.default_rng(1).random((4, 3))
        v, d = recon_loss(x, x)
        assert v == 0.0 and np.abs(d).max() == 0.0


class TestUncertaintyLoss:
    def test_unit_uncertainty_zero_error(self):
        # err = 0, U = 1: loss is log(1) = 0
        tgt = np.random.default_rng(2).random((3, 3))
        v, d_r, d_u = uncertainty_loss(tgt, tgt, np.ones(3))
        assert v == 0.0
        assert np.abs(d_r).max() == 0.0
        np.testing.assert_allclose(d_u, 1.0 / 3.0)

    def test_hand_value(self):
        # single ray, err^2 = 0.75, U = 0.5: 0.75/(2*0.25) + log 0.5
        tgt = np.zeros((1, 3))
        ren = np.full((1, 3), 0.5)
        v, _, _ = uncertainty_loss(tgt, ren, np.array([0.5]))
        assert abs(v - (1.5 + np.log(0.5))) < 1e-12

    def test_stationary_point(self):
        # d/dU of err^2/(2U^2) + log U vanishes at U = |err|
        tgt = np.zeros((1, 3))
        ren = np.array([[0.3, 0.0, 0.0]])
        _, _, d_u = uncertainty_loss(tgt, ren, np.array([0.3]))
        assert abs(d_u[0]) < 1e-12

    def test_floor_freezes_gradient(self):
        tgt = np.zeros((1, 3))
        ren = np.ones((1, 3))
        _, _, d_u = uncertainty_loss(tgt, ren, np.array([U_FLOOR / 2]))
        assert d_u[0] == 0.0

    def test_floor_bounds_value(self):
        tgt = np.zeros((1, 3))
        ren = np.ones((1, 3))
        v_tiny, _, _ = uncertainty_loss(tgt, ren, np.array([1e-12]))
        v_floor, _, _ = uncertainty_loss(tgt, ren, np.array([U_FLOOR]))
        assert v_tiny == v_floor and np.isfinite(v_tiny)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(3)
        tgt = rng.random((4, 3))
        ren = rng.random((4, 3))
        u = rng.random(4) + 0.2
        _, d_r, d_u = uncertainty_loss(tgt, ren, u)
        h = 1e-7
        for b, c in [(0, 0), (3, 2)]:
            rp = ren.copy(); rp[b, c] += h
            rm = ren.copy(); rm[b, c] -= h
            fd = (uncertainty_loss(tgt, rp, u)[0] - uncertainty_loss(tgt, rm, u)[0]) / (2 * h)
            assert abs(fd - d_r[b, c]) < 1e-5
        for b in (1, 2):
            up = u.copy(); up[b] += h
            un = u.copy(); un[b] -= h
            fd = (uncertainty_loss(tgt, ren, up)[0] - uncertainty_loss(tgt, ren, un)[0]) / (2 * h)
            assert abs(fd - d_u[b]) < 1e-5


class TestMaskSparsity:
    def test_all_static_zero(self):
        v, _ = mask_sparsity_loss(np.ones(10))
        assert v == 0.0

    def test_all_dynamic_one(self):
        v, _ = mask_sparsity_loss(np.zeros(10))
        assert v == 1.0

    def test_gradient_pushes_mask_up(self):
        m = np.full(8, 0.5)
        v, d = mask_sparsity_loss(m)
        assert v == 0.5
        np.testing.assert_allclose(d, -1.0 / 8)


class TestDistortionLoss:
    def test_single_spike_only_self_term(self):
        w = np.zeros((1, 4)); w[0, 1] = 1.0
        mid = np.array([[0.1, 0.3, 0.6, 0.9]])
        dl = np.full((1, 4), 0.25)
        v, _ = distortion_loss(w, mid, dl)
        assert abs(v - 0.25 / 3.0) < 1e-12

    def test_two_spikes_bilateral(self):
        w = np.array([[0.5, 0.5]])
        mid = np.array([[0.2, 0.8]])
        dl = np.array([[0.1, 0.1]])
        v, _ = distortion_loss(w, mid, dl)
        # cross: 2 * 0.25 * 0.6, self: 2 * 0.25 * 0.1 / 3
        assert abs(v - (0.3 + 0.05 / 3.0)) < 1e-12

    def test_spread_costs_more_than_concentrated(self):
        mid = np.linspace(0.05, 0.95, 16)[None, :]
        dl = np.full((1, 16), 1.0 / 16)
        spread = np.full((1, 16), 1.0 / 16)
        conc = np.zeros((1, 16)); conc[0, 7] = 1.0
        assert distortion_loss(spread, mid, dl)[0] > distortion_loss(conc, mid, dl)[0]

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(4)
        w = rng.random((3, 8))
        mid = np.sort(rng.random((3, 8)), axis=1)
        dl = rng.random((3, 8)) * 0.1
        _, d = distortion_loss(w, mid, dl)
        h = 1e-7
        for b, i in [(0, 0), (1, 4), (2, 7)]:
            wp = w.copy(); wp[b, i] += h
            wm = w.copy(); wm[b, i] -= h
            fd = (distortion_loss(wp, mid, dl)[0] - distortion_loss(wm, mid, dl)[0]) / (2 * h)
            assert abs(fd - d[b, i]) < 1e-5


class TestProposalMatching:
    def test_matching_histograms_zero(self):
        edges = np.array([[0.0, 0.5, 1.0]])
        pw = np.array([[0.3, 0.7]])
        # main weights concentrated to reproduce the same histogram
        mp = np.array([[0.25, 0.75]])
        mw = np.array([[0.3, 0.7]])
        v, _ = proposal_matching_loss(mw, mp, edges, pw)
        assert abs(v) < 1e-12

    def test_mismatch_positive_and_gradient_fd(self):
        rng = np.random.default_rng(5)
        edges = np.linspace(0.0, 2.0, 7)[None, :].repeat(2, axis=0)
        pw = rng.random((2, 6))
        mp = rng.uniform(0.0, 2.0, (2, 10))
        mw = rng.random((2, 10))
        v, d = proposal_matching_loss(mw, mp, edges, pw)
        assert v > 0.0
        h = 1e-6
        for b, i in [(0, 0), (1, 3)]:
            pp = pw.copy(); pp[b, i] += h
            pm = pw.copy(); pm[b, i] -= h
            fd = (proposal_matching_loss(mw, mp, edges, pp)[0]
                  - proposal_matching_loss(mw, mp, edges, pm)[0]) / (2 * h)
            assert abs(fd - d[b, i]) < 1e-4


class TestMine:
    def test_zero_critic_zero_estimate(self):
        est = MineEstimator(np.random.default_rng(6), hidden_dim=8, dtype=np.float64)
        est.params.values[:] = 0.0
        rng = np.random.default_rng(7)
        v, d_m, d_u = est.estimate(rng.random(64), rng.random(64), rng)
        assert v == 0.0
        assert np.abs(d_m).max() == 0.0 and np.abs(d_u).max() == 0.0

    def test_tiny_batch_skipped(self):
        est = MineEstimator(np.random.default_rng(8), hidden_dim=8)
        v, _, _ = est.estimate(np.array([0.5]), np.array([0.5]),
                               np.random.default_rng(9))
        assert v == 0.0 and est.skipped_batches == 1

    def test_mismatched_batches_rejected(self):
        est = MineEstimator(np.random.default_rng(10), hidden_dim=8)
        with pytest.raises(ValueError, match="equal length"):
            est.estimate(np.zeros(4), np.zeros(5), np.random.default_rng(0))

    def test_zero_grad_scale_leaves_critic_untouched(self):
        est = MineEstimator(np.random.default_rng(11), hidden_dim=8, dtype=np.float64)
        rng = np.random.default_rng(12)
        est.estimate(rng.random(64), rng.random(64), rng, grad_scale=0.0)
        assert np.abs(est.params.grads).max() == 0.0

    def test_ema_first_call_equals_batch_mean(self):
        est = MineEstimator(np.random.default_rng(13), hidden_dim=8, dtype=np.float64)
        rng = np.random.default_rng(14)
        assert est.ema_denominator is None
        est.estimate(rng.random(64), rng.random(64), rng)
        assert est.ema_denominator is not None

    def test_gradients_match_fd_on_fresh_estimator(self):
        # with no EMA history the log-denominator gradient is exact
        est = MineEstimator(np.random.default_rng(15), hidden_dim=6, dtype=np.float64)
        est.params.values[:] = 0.3 * np.random.default_rng(16).standard_normal(
            est.spec.n_params
        )
        rng0 = np.random.default_rng(17)
        m = rng0.random(32)
        u = rng0.random(32)

        def run(grad_scale):
            est.ema_denominator = None
            est.params.zero_grads()
            return est.estimate(m, u, np.random.default_rng(18),
                                grad_scale=grad_scale, update_ema=False)

        _, d_m, d_u = run(1.0)
        g = est.params.grads.copy()
        h = 1e-6
        for i in np.random.default_rng(19).permutation(est.spec.n_params)[:8]:
            keep = est.params.values[i]
            est.params.values[i] = keep + h
            up = run(0.0)[0]
            est.params.values[i] = keep - h
            dn = run(0.0)[0]
            est.params.values[i] = keep
            fd = (up - dn) / (2 * h)
            assert abs(fd - g[i]) < 1e-5
        for i in (0, 9, 31):
            keep = m[i]
            m[i] = keep + h
            up = run(0.0)[0]
            m[i] = keep - h
            dn = run(0.0)[0]
            m[i] = keep
            assert abs((up - dn) / (2 * h) - d_m[i]) < 1e-5

    def test_correlated_gaussians_recover_mutual_information(self):
        # rho = 0.9 gaussians: I = -0.5 ln(1 - rho^2) = 0.8304 nats
        rho = 0.9
        expected = -0.5 * np.log(1.0 - rho * rho)
        rng = np.random.default_rng(20)
        est = MineEstimator(np.random.default_rng(21), hidden_dim=32, dtype=np.float64)
        for _ in range(400):
            a = rng.standard_normal(256)
            b = rho * a + np.sqrt(1 - rho * rho) * rng.standard_normal(256)
            est.params.zero_grads()
            est.estimate(a, b, rng, grad_scale=-1.0)
            adam_step(est.params, lr=2e-3)
        vals = []
        for _ in range(50):
            a = rng.standard_normal(256)
            b = rho * a + np.sqrt(1 - rho * rho) * rng.standard_normal(256)
            vals.append(est.estimate(a, b, rng, update_ema=False)[0])
        assert abs(np.mean(vals) - expected) < 0.1

    def test_independent_inputs_estimate_near_zero(self):
        rng = np.random.default_rng(22)
        est = MineEstimator(np.random.default_rng(23), hidden_dim=32, dtype=np.float64)
        for _ in range(400):
            a = rng.standard_normal(256)
            b = rng.standard_normal(256)
            est.params.zero_grads()
            est.estimate(a, b, rng, grad_scale=-1.0)
            adam_step(est.params, lr=2e-3)
        vals = []
        for _ in range(50):
            vals.append(
                est.estimate(rng.standard_normal(256), rng.standard_normal(256),
                             rng, update_ema=False)[0]
            )
        assert abs(np.mean(vals)) < 0.05


class TestTotalLoss:
    def test_linear_combination(self):
        comps = {"L_r": 1.0, "L_u": 2.0, "I": 3.0, "L_mask": 4.0,
                 "L_dist": 5.0, "L_prop": 6.0}
        w = LossWeights(lambda_u=0.1, gamma=0.2, lambda_mask=0.3,
                        lambda_dist=0.4, lambda_prop=0.5)
        expect = 1.0 + 0.2 - 0.6 + 1.2 + 2.0 + 3.0
        assert abs(total_loss(comps, w) - expect) < 1e-12

    def test_mutual_information_enters_negatively(self):
        w = LossWeights(gamma=1.0)
        lo = total_loss({"L_r": 1.0, "I": 0.0}, w)
        hi = total_loss({"L_r": 1.0, "I": 2.0}, w)
        assert hi < lo

    def test_missing_components_default_to_zero(self):
        assert total_loss({}, LossWeights()) == 0.0

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError, match="lambda_mask"):
            LossWeights(lambda_mask=-1.0)
