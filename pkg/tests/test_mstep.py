"""M-step tests: loop-accumulated oracles, conjugate-update identities, and
the inverse-Wishart log-determinant expectation against Monte Carlo."""

import numpy as np
import pytest
import scipy.stats

from robust_smix.alpha_beta import AlphaDensityParams, posterior_expectations
from robust_smix.mstep import (
    refresh_expectations,
    sufficient_stats,
    update_hyperparameters,
)
from robust_smix.model import (
    ClusterPosterior,
    FitConfig,
    LatentPosterior,
    PriorSpec,
)
from robust_smix.numerics import digamma


def manual_latent(rng, J=30, d=3, K=2):
    """Hand-built latent posterior with two missingness patterns."""
    logits = rng.normal(size=(J, K))
    r = np.exp(logits - logits.max(axis=1, keepdims=True))
    r /= r.sum(axis=1, keepdims=True)
    masks = [np.ones(d, dtype=bool), np.ones(d, dtype=bool)]
    masks[1][-1] = False
    pattern_index = rng.integers(0, 2, size=J)
    delta_full = np.zeros((K, 0, 0))
    delta_part = rng.uniform(0.2, 1.5, size=(K, 1, 1))
    return LatentPosterior(
        responsibilities=r,
        scale_shape=rng.uniform(1.0, 4.0, size=(J, K)),
        scale_rate=rng.uniform(1.0, 4.0, size=(J, K)),
        e_scale=rng.uniform(0.4, 2.5, size=(J, K)),
        e_log_scale=rng.normal(size=(J, K)) * 0.4,
        completed=rng.normal(size=(J, K, d)) * 2.0,
        pattern_index=pattern_index,
        pattern_masks=masks,
        pattern_delta=[delta_full, delta_part],
        pattern_logdet_delta=np.zeros((2, K)),
    )


def make_priors(d=3, K=2, **kw):
    base = dict(n_clusters=K, kappa0=1.0, eta0=0.5, mu0=np.zeros(d),
                gamma0=d + 2.0, sigma0=np.eye(d), p0=1.0, q0=1.0,
                s0=1.0, r0=2.0)
    base.update(kw)
    return PriorSpec(**base)


class TestSufficientStats:
    def test_matches_explicit_loops(self):
        rng = np.random.default_rng(41)
        latent = manual_latent(rng)
        stats = sufficient_stats(latent)
        J, K = latent.responsibilities.shape
        d = latent.completed.shape[2]
        for k in range(K):
            pi = omega = delta = 0.0
            mu_num = np.zeros(d)
            for j in range(J):
                r = latent.responsibilities[j, k]
                pi += r
                omega += r * latent.e_scale[j, k]
                delta += r * latent.e_log_scale[j, k]
                mu_num += r * latent.e_scale[j, k] * latent.completed[j, k]
            mu = mu_num / omega
            sx = np.zeros((d, d))
            sm = np.zeros((d, d))
            for j in range(J):
                r = latent.responsibilities[j, k]
                c = latent.completed[j, k] - mu
                sx += r * latent.e_scale[j, k] * np.outer(c, c)
                sm += r * latent.delta_correction(j, k)
            assert stats.pi_bar[k] == pytest.approx(pi / J, rel=1e-12)
            assert stats.omega_bar[k] == pytest.approx(omega / J, rel=1e-12)
            assert stats.delta_bar[k] == pytest.approx(delta / J, rel=1e-12)
            np.testing.assert_allclose(stats.mu_x[k], mu, rtol=1e-11)
            np.testing.assert_allclose(stats.scatter_x[k], sx, rtol=1e-10)
            np.testing.assert_allclose(stats.scatter_miss[k], sm, rtol=1e-11)

    def test_two_row_hand_example(self):
        latent = LatentPosterior(
            responsibilities=np.array([[1.0], [1.0]]),
            scale_shape=None, scale_rate=None,
            e_scale=np.array([[2.0], [4.0]]),
            e_log_scale=np.array([[0.0], [0.0]]),
            completed=np.array([[[1.0]], [[4.0]]]),
            pattern_index=np.zeros(2, dtype=int),
            pattern_masks=[np.ones(1, dtype=bool)],
            pattern_delta=[np.zeros((1, 0, 0))],
            pattern_logdet_delta=np.zeros((1, 1)))
        stats = sufficient_stats(latent)
        assert stats.pi_bar[0] == pytest.approx(1.0)
        assert stats.omega_bar[0] == pytest.approx(3.0)
        # (2*1 + 4*4) / 6 = 3
        assert stats.mu_x[0, 0] == pytest.approx(3.0)
        # 2*(1-3)^2 + 4*(4-3)^2 = 12
        assert stats.scatter_x[0, 0, 0] == pytest.approx(12.0)

    def test_degenerate_scale_raises(self):
        rng = np.random.default_rng(42)
        latent = manual_latent(rng)
        latent.e_scale[:, 1] = 0.0
        with pytest.raises(ValueError, match="cluster 1.*scale"):
            sufficient_stats(latent)

    def test_unknown_mode_raises(self):
        rng = np.random.default_rng(43)
        with pytest.raises(ValueError, match="scatter_mode"):
            sufficient_stats(manual_latent(rng), scatter_mode="raw")

    def test_determinism(self):
        rng = np.random.default_rng(44)
        latent = manual_latent(rng)
        a = sufficient_stats(latent)
        b = sufficient_stats(latent)
        np.testing.assert_array_equal(a.scatter_x, b.scatter_x)
        np.testing.assert_array_equal(a.mu_x, b.mu_x)


class TestUpdateHyperparameters:
    def run_update(self, seed=45, mode="unnormalized"):
        rng = np.random.default_rng(seed)
        latent = manual_latent(rng)
        stats = sufficient_stats(latent, scatter_mode=mode)
        priors = make_priors()
        clusters, notes = update_hyperparameters(stats, priors)
        return latent, stats, priors, clusters, notes

    def test_count_conservation(self):
        latent, stats, priors, clusters, _ = self.run_update()
        J = latent.responsibilities.shape[0]
        K = len(clusters)
        total = sum(c.kappa for c in clusters)
        assert total == pytest.approx(K * priors.kappa0 + J, rel=1e-12)
        for k, c in enumerate(clusters):
            j_pi = J * stats.pi_bar[k]
            assert c.gamma - priors.gamma0 == pytest.approx(j_pi, rel=1e-12)
            assert c.r - priors.r0 == pytest.approx(j_pi, rel=1e-12)
            assert c.s - priors.s0 == pytest.approx(j_pi, rel=1e-12)

    def test_formula_oracle(self):
        latent, stats, priors, clusters, notes = self.run_update()
        assert notes == []
        J = latent.responsibilities.shape[0]
        for k, c in enumerate(clusters):
            j_om = J * stats.omega_bar[k]
            eta = priors.eta0 + j_om
            assert c.eta == pytest.approx(eta, rel=1e-12)
            want_mu = (priors.eta0 * priors.mu0 + j_om * stats.mu_x[k]) / eta
            np.testing.assert_allclose(c.mu, want_mu, rtol=1e-12)
            shift = stats.mu_x[k] - priors.mu0
            want_sigma = (priors.sigma0 + stats.scatter_x[k]
                          + stats.scatter_miss[k]
                          + (j_om * priors.eta0 / eta) * np.outer(shift, shift))
            np.testing.assert_allclose(c.sigma, want_sigma, rtol=1e-12)
            assert c.log_p == pytest.approx(
                np.log(priors.p0) + J * stats.delta_bar[k], rel=1e-12)
            assert c.q == pytest.approx(priors.q0 + j_om, rel=1e-12)

    def test_scatter_modes_agree(self):
        _, _, _, a, _ = self.run_update(seed=46, mode="unnormalized")
        _, _, _, b, _ = self.run_update(seed=46, mode="normalized")
        for ca, cb in zip(a, b):
            np.testing.assert_allclose(ca.sigma, cb.sigma, rtol=1e-10)
            np.testing.assert_allclose(ca.mu, cb.mu, rtol=1e-12)
            assert ca.eta == pytest.approx(cb.eta, rel=1e-12)

    def test_empty_cluster_falls_back_to_prior(self):
        rng = np.random.default_rng(47)
        latent = manual_latent(rng)
        latent.responsibilities[:, 1] = 0.0
        latent.responsibilities[:, 0] = 1.0
        stats = sufficient_stats(latent)
        priors = make_priors()
        clusters, _ = update_hyperparameters(stats, priors)
        c = clusters[1]
        assert c.kappa == priors.kappa0
        assert c.eta == priors.eta0
        assert c.gamma == priors.gamma0
        assert c.q == priors.q0
        assert c.s == priors.s0
        assert c.r == priors.r0
        assert c.log_p == pytest.approx(np.log(priors.p0))
        np.testing.assert_array_equal(c.mu, priors.mu0)
        np.testing.assert_array_equal(c.sigma, priors.sigma0)

    def test_collapse_reports_cluster(self):
        rng = np.random.default_rng(48)
        latent = manual_latent(rng)
        stats = sufficient_stats(latent)
        stats.scatter_x[0] = np.array([[0.0, 50.0, 0.0],
                                       [50.0, 0.0, 0.0],
                                       [0.0, 0.0, 0.0]])
        with pytest.raises(ValueError, match="cluster 0.*positive definite"):
            update_hyperparameters(stats, make_priors())

    def test_previous_carries_caches_and_active(self):
        latent, stats, priors, clusters, _ = self.run_update()
        clusters[1].active = False
        clusters[0].e_alpha = 2.7
        clusters[0].alpha_mode = 1.9
        fresh, _ = update_hyperparameters(stats, priors, previous=clusters)
        assert fresh[1].active is False
        assert fresh[0].e_alpha == 2.7
        assert fresh[0].alpha_mode == 1.9
        assert fresh[1].e_alpha is None


class TestRefreshExpectations:
    def two_clusters(self, d=2, **kw):
        mk = dict(kappa=1.0, eta=2.0, gamma=d + 2.0, log_p=0.1, q=3.0,
                  s=2.0, r=4.0)
        mk.update(kw)
        return [ClusterPosterior(mu=np.zeros(d), sigma=np.eye(d), **mk),
                ClusterPosterior(mu=np.ones(d), sigma=2.0 * np.eye(d), **mk)]

    def test_log_weight_example(self):
        # kappa = (1, 1): psi(1) - psi(2) = -1 for both clusters
        clusters = self.two_clusters()
        refresh_expectations(clusters, FitConfig(model_kind="gaussian"))
        for c in clusters:
            assert c.e_log_weight == pytest.approx(-1.0, rel=1e-12)

    def test_log_det_formula(self):
        clusters = self.two_clusters(d=3)
        refresh_expectations(clusters, FitConfig(model_kind="gaussian"))
        c = clusters[1]
        d = 3
        want = (np.log(np.linalg.det(c.sigma))
                - sum(digamma((c.gamma + 1.0 - i) / 2.0)
                      for i in range(1, d + 1)) - d * np.log(2.0))
        assert c.e_log_det_cov == pytest.approx(want, rel=1e-12)

    def test_log_det_against_inverse_wishart_draws(self):
        rng = np.random.default_rng(49)
        a = rng.normal(size=(3, 3))
        sigma = a @ a.T + 3.0 * np.eye(3)
        c = ClusterPosterior(kappa=1.0, eta=1.0, mu=np.zeros(3), gamma=9.5,
                             sigma=sigma, log_p=0.0, q=1.0, s=1.0, r=2.0)
        refresh_expectations([c], FitConfig(model_kind="gaussian"))
        draws = scipy.stats.invwishart(df=9.5, scale=sigma).rvs(
            size=200_000, random_state=np.random.default_rng(50))
        mc = np.mean(np.linalg.slogdet(draws)[1])
        assert c.e_log_det_cov == pytest.approx(mc, abs=0.02)

    def test_precision_example(self):
        # gamma = d + 2 with identity scale: E[Sigma^-1] = (d + 2) I
        d = 3
        c = ClusterPosterior(kappa=1.0, eta=1.0, mu=np.zeros(d),
                             gamma=float(d + 2), sigma=np.eye(d),
                             log_p=0.0, q=1.0, s=1.0, r=2.0)
        np.testing.assert_allclose(c.e_precision(), (d + 2.0) * np.eye(d),
                                   rtol=1e-12)

    def test_student_delegates_to_laplace(self):
        clusters = self.two_clusters()
        notes = refresh_expectations(clusters, FitConfig())
        assert notes == []
        for c in clusters:
            exps = posterior_expectations(
                AlphaDensityParams(log_p=c.log_p, q=c.q, s=c.s, r=c.r))
            assert c.e_alpha == pytest.approx(exps.e_alpha, rel=1e-9)
            assert c.log_m == pytest.approx(exps.log_m, rel=1e-9)
            assert c.alpha_mode == pytest.approx(exps.mode, rel=1e-7)
            want_beta = (c.s * c.e_alpha + 1.0) / c.q
            assert c.e_beta == pytest.approx(want_beta, rel=1e-12)
            assert c.e_log_beta == pytest.approx(
                c.e_psi_s_alpha_plus1 - np.log(c.q), rel=1e-12)

    def test_gaussian_mode_skips_shape_machinery(self):
        clusters = self.two_clusters()
        refresh_expectations(clusters, FitConfig(model_kind="gaussian"))
        for c in clusters:
            assert c.e_alpha is None
            assert c.log_m is None
            assert c.e_log_weight is not None
            assert c.e_log_det_cov is not None

    def test_flat_posterior_first_refresh_pins_alpha(self):
        # s > r makes the shape density non-normalizable
        clusters = self.two_clusters(s=5.0, r=1.0)
        notes = refresh_expectations(clusters, FitConfig())
        assert any("cluster 0" in n and "pinned alpha" in n for n in notes)
        c = clusters[0]
        assert c.e_alpha == 1.0
        assert c.e_log_gamma_alpha == 0.0
        assert c.log_m == 0.0
        assert c.e_psi_s_alpha_plus1 == pytest.approx(digamma(6.0))
        assert c.e_beta == pytest.approx((5.0 * 1.0 + 1.0) / 3.0)

    def test_flat_posterior_carries_previous_values(self):
        clusters = self.two_clusters(s=5.0, r=1.0)
        for c in clusters:
            c.e_alpha = 2.2
            c.e_log_gamma_alpha = 0.11
            c.e_psi_s_alpha_plus1 = 1.3
            c.log_m = -0.4
        notes = refresh_expectations(clusters, FitConfig())
        assert any("carried previous" in n for n in notes)
        c = clusters[0]
        assert c.e_alpha == 2.2
        assert c.log_m == -0.4
        assert c.e_beta == pytest.approx((5.0 * 2.2 + 1.0) / 3.0)

    def test_warm_start_mode_stored_and_reused(self):
        clusters = self.two_clusters()
        refresh_expectations(clusters, FitConfig())
        first = [(c.e_alpha, c.alpha_mode) for c in clusters]
        notes = refresh_expectations(clusters, FitConfig())
        assert notes == []
        for c, (e_alpha, mode) in zip(clusters, first):
            assert c.e_alpha == pytest.approx(e_alpha, rel=1e-7)
            assert c.alpha_mode == pytest.approx(mode, rel=1e-7)
