"""End-to-end fitting behavior: initialization, the fixed-point loop against
a reference implementation, prediction, imputation, and degeneracy flags."""

import numpy as np
import pytest
import scipy.special

from robust_smix.engine import (fit, impute, initialize, predict,
                                worker_count)
from robust_smix.estep import log_responsibility, normalize_responsibilities
from robust_smix.model import (ClusterPosterior, ConfigurationError,
                               FitConfig, FitResult, MaskedDataset, PriorSpec,
                               default_priors)

from _reference_vbgmm import ReferenceVBGMM


def make_priors(d, K, **kw):
    base = dict(n_clusters=K, kappa0=1.5, eta0=0.5, mu0=np.zeros(d),
                gamma0=d + 2.5, sigma0=np.eye(d), p0=1.0, q0=1.0,
                s0=1.0, r0=2.0)
    base.update(kw)
    return PriorSpec(**base)


def blob_data(seed, means, per_blob=30, d=2, missing=0.0, outliers=0):
    rng = np.random.default_rng(seed)
    parts = [rng.normal(size=(per_blob, d)) + np.asarray(m) for m in means]
    labels = np.repeat(np.arange(len(means)), per_blob)
    if outliers:
        parts.append(rng.uniform(-12.0, 12.0, size=(outliers, d)))
        labels = np.concatenate([labels, np.full(outliers, -1)])
    values = np.vstack(parts)
    if missing > 0.0:
        drop = rng.random(values.shape) < missing
        drop[drop.all(axis=1), 0] = False
        values[drop] = np.nan
    return MaskedDataset(values), labels


def majority_accuracy(predicted, truth):
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    correct = 0
    for k in np.unique(predicted):
        members = truth[predicted == k]
        counts = np.bincount(members)
        correct += counts.max()
    return correct / truth.size


def cluster_floats(c):
    return (c.kappa, c.eta, c.gamma, c.log_p, c.q, c.s, c.r,
            tuple(c.mu), tuple(c.sigma.ravel()))


class TestWorkerCount:
    def test_default_is_one(self, monkeypatch):
        monkeypatch.delenv("ROBUST_SMIX_THREADS", raising=False)
        assert worker_count() == 1

    def test_explicit_cap(self, monkeypatch):
        monkeypatch.setenv("ROBUST_SMIX_THREADS", "4")
        assert worker_count() == 4

    @pytest.mark.parametrize("value", ["0", "-2", "four", ""])
    def test_invalid_cap_rejected(self, monkeypatch, value):
        monkeypatch.setenv("ROBUST_SMIX_THREADS", value)
        with pytest.raises(ConfigurationError):
            worker_count()


class TestInitialize:
    def test_single_cluster_takes_all_mass(self):
        data, _ = blob_data(0, [[1.0, -2.0]], per_blob=40)
        priors = default_priors(data, 1)
        clusters, latent = initialize(data, priors, FitConfig())
        assert np.allclose(latent.responsibilities, 1.0)
        assert np.allclose(clusters[0].mu, data.values.mean(axis=0),
                           atol=0.02)

    def test_separated_blobs_split(self):
        data, truth = blob_data(1, [[-4.0, 0.0], [4.0, 0.0]])
        priors = make_priors(2, 2)
        _, latent = initialize(data, priors, FitConfig(seed=3))
        hard = latent.responsibilities.argmax(axis=1)
        assert majority_accuracy(hard, truth) >= 0.95

    def test_same_seed_is_bitwise_identical(self):
        data, _ = blob_data(2, [[-3.0, 1.0], [3.0, -1.0]], missing=0.2)
        priors = make_priors(2, 2)
        a_clusters, a_latent = initialize(data, priors, FitConfig(seed=7))
        b_clusters, b_latent = initialize(data, priors, FitConfig(seed=7))
        assert np.array_equal(a_latent.responsibilities,
                              b_latent.responsibilities)
        for ca, cb in zip(a_clusters, b_clusters):
            assert cluster_floats(ca) == cluster_floats(cb)

    def test_random_init_rows_are_distributions(self):
        data, _ = blob_data(3, [[0.0, 0.0]], per_blob=20)
        priors = make_priors(2, 3)
        config = FitConfig(init_method="random", seed=11)
        _, latent = initialize(data, priors, config)
        r = latent.responsibilities
        assert np.allclose(r.sum(axis=1), 1.0)
        assert (r > 0).all()
        _, other = initialize(data, priors, FitConfig(init_method="random",
                                                      seed=12))
        assert not np.allclose(r, other.responsibilities)

    def test_more_clusters_than_rows_rejected(self):
        data = MaskedDataset(np.zeros((3, 2)))
        priors = make_priors(2, 4)
        with pytest.raises(ConfigurationError):
            initialize(data, priors, FitConfig())


class TestFit:
    def test_single_iteration_budget(self):
        data, _ = blob_data(4, [[0.0, 0.0]], per_blob=15)
        priors = make_priors(2, 1)
        result = fit(data, priors, FitConfig(max_iterations=1))
        assert result.n_iterations == 1
        assert not result.converged

    def test_matches_reference_trajectory(self):
        rng = np.random.default_rng(9)
        x = np.concatenate([rng.normal(size=(20, 2)) + m
                            for m in ([0, 0], [4, 1], [-2, 3])])
        data = MaskedDataset(x)
        priors = make_priors(2, 3, kappa0=1.0, eta0=0.7, gamma0=5.0)
        resp0 = rng.dirichlet(np.ones(3), size=60)
        config = FitConfig(model_kind="gaussian", max_iterations=25,
                           elbo_rel_tolerance=1e-300)
        result = fit(data, priors, config, initial_responsibilities=resp0)

        ref = ReferenceVBGMM(3, priors.kappa0, priors.eta0, priors.mu0,
                             priors.gamma0, priors.sigma0)
        ref_trace = ref.fit_trajectory(x, resp0.copy(), 25)
        mine = np.array([v for _, v in result.elbo_trace])
        assert mine.shape == (25,)
        assert np.max(np.abs(mine - ref_trace)) < 1e-9
        for k, c in enumerate(result.clusters):
            assert c.kappa == pytest.approx(ref.kappa[k], rel=1e-10)
            assert c.eta == pytest.approx(ref.eta[k], rel=1e-10)
            assert c.gamma == pytest.approx(ref.gamma[k], rel=1e-10)
            np.testing.assert_allclose(c.mu, ref.mu[k], rtol=1e-8,
                                       atol=1e-10)
            np.testing.assert_allclose(c.sigma, ref.sigma[k], rtol=1e-8)
        np.testing.assert_allclose(result.latent.responsibilities,
                                   ref.e_step(x), rtol=1e-7, atol=1e-10)

    def test_fit_is_deterministic(self):
        data, _ = blob_data(5, [[-2.0, 0.0], [2.0, 0.0]], missing=0.15)
        priors = make_priors(2, 2)
        config = FitConfig(max_iterations=20, seed=5)
        a = fit(data, priors, config)
        b = fit(data, priors, config)
        assert a.elbo_trace == b.elbo_trace
        assert np.array_equal(a.latent.responsibilities,
                              b.latent.responsibilities)
        for ca, cb in zip(a.clusters, b.clusters):
            assert cluster_floats(ca) == cluster_floats(cb)

    def test_converges_on_easy_data(self):
        data, _ = blob_data(6, [[-3.0, 0.0], [3.0, 0.0]])
        priors = make_priors(2, 2)
        config = FitConfig(model_kind="gaussian", max_iterations=200,
                           elbo_rel_tolerance=1e-8)
        result = fit(data, priors, config)
        assert result.converged
        assert result.n_iterations < 200
        (_, before), (_, after) = result.elbo_trace[-2:]
        assert abs(after - before) <= 1e-8 * (1.0 + abs(after))

    def test_relabeling_equivariance(self):
        data, _ = blob_data(7, [[-2.5, 1.0], [2.5, -1.0]], missing=0.1)
        priors = make_priors(2, 2)
        config = FitConfig(max_iterations=6, elbo_rel_tolerance=1e-300)
        rng = np.random.default_rng(13)
        resp0 = rng.dirichlet(np.ones(2), size=data.n_rows)
        a = fit(data, priors, config, initial_responsibilities=resp0)
        b = fit(data, priors, config,
                initial_responsibilities=resp0[:, ::-1])
        trace_a = np.array([v for _, v in a.elbo_trace])
        trace_b = np.array([v for _, v in b.elbo_trace])
        np.testing.assert_allclose(trace_a, trace_b, rtol=1e-9, atol=1e-9)
        for k in range(2):
            np.testing.assert_allclose(a.clusters[k].mu,
                                       b.clusters[1 - k].mu,
                                       rtol=1e-7, atol=1e-9)
            np.testing.assert_allclose(a.clusters[k].sigma,
                                       b.clusters[1 - k].sigma,
                                       rtol=1e-7, atol=1e-9)
        np.testing.assert_allclose(a.latent.responsibilities,
                                   b.latent.responsibilities[:, ::-1],
                                   rtol=1e-6, atol=1e-9)

    def test_starved_cluster_goes_inactive(self):
        # missing cells in the uninformative coordinate keep the bound
        # moving past the three-iteration starvation patience, while the
        # observed separating coordinate starves the third cluster
        data, _ = blob_data(8, [[-8.0, 0.0], [8.0, 0.0]], per_blob=15)
        values = data.values.copy()
        values[::4, 1] = np.nan
        data = MaskedDataset(values)
        priors = make_priors(2, 3)
        config = FitConfig(model_kind="gaussian", max_iterations=12,
                           elbo_rel_tolerance=1e-300)
        tiny = 1e-13
        resp0 = np.empty((30, 3))
        resp0[:, 2] = tiny
        resp0[:15] = [1.0 - 2.0 * tiny, tiny, tiny]
        resp0[15:] = [tiny, 1.0 - 2.0 * tiny, tiny]
        result = fit(data, priors, config, initial_responsibilities=resp0)
        assert not result.clusters[2].active
        assert result.clusters[0].active and result.clusters[1].active
        assert any("inactive" in line for line in result.diagnostics)

    def test_student_recovers_contaminated_blobs(self):
        data, truth = blob_data(10, [[-4.0, -4.0], [4.0, -4.0], [0.0, 4.0]],
                                per_blob=50, missing=0.1, outliers=8)
        priors = make_priors(2, 3)
        config = FitConfig(max_iterations=80)
        result = fit(data, priors, config)
        prediction = predict(result, data)
        inliers = truth >= 0
        assert majority_accuracy(prediction.labels[inliers],
                                 truth[inliers]) >= 0.9


class TestPredict:
    def _fitted(self, seed=20):
        data, truth = blob_data(seed, [[-3.5, 0.0], [3.5, 0.0]])
        priors = make_priors(2, 2)
        config = FitConfig(model_kind="gaussian", max_iterations=100)
        return fit(data, priors, config), data, truth

    def test_training_rows_reproduce_stored_responsibilities(self):
        result, data, _ = self._fitted()
        prediction = predict(result, data)
        assert np.array_equal(prediction.responsibilities,
                              result.latent.responsibilities)
        assert np.array_equal(prediction.labels,
                              result.latent.responsibilities.argmax(axis=1))

    def test_cluster_means_classify_confidently(self):
        result, _, _ = self._fitted()
        x = np.vstack([c.mu for c in result.clusters])
        prediction = predict(result, MaskedDataset(x))
        assert list(prediction.labels) == [0, 1]
        assert (prediction.responsibilities.max(axis=1) > 0.99).all()

    def test_fully_missing_row_uses_prior_weights(self):
        result, _, _ = self._fitted()
        values = np.array([[np.nan, np.nan], [1.0, 0.5]])
        prediction = predict(result, MaskedDataset(values))
        r = prediction.responsibilities
        assert np.allclose(r.sum(axis=1), 1.0)
        mask = np.zeros(2, dtype=bool)
        logw = [log_responsibility(np.empty(0), c, mask,
                                   model_kind="gaussian")
                for c in result.clusters]
        expected = normalize_responsibilities(np.array([logw]))
        np.testing.assert_allclose(r[0], expected[0], rtol=1e-12)

    def test_outlier_scores_rank_planted_outliers_low(self):
        data, truth = blob_data(21, [[-4.0, 0.0], [4.0, 0.0]], per_blob=40,
                                outliers=6)
        priors = make_priors(2, 2)
        result = fit(data, priors, FitConfig(max_iterations=60))
        score = predict(result, data).outlier_score
        assert (np.median(score[truth == -1])
                < np.median(score[truth >= 0]))

    def test_gaussian_scores_are_unit(self):
        result, data, _ = self._fitted()
        assert np.array_equal(predict(result, data).outlier_score,
                              np.ones(data.n_rows))

    def test_dimension_mismatch_rejected(self):
        result, _, _ = self._fitted()
        bad = MaskedDataset(np.zeros((2, 3)))
        with pytest.raises(ValueError, match="features"):
            predict(result, bad)
        with pytest.raises(ValueError, match="features"):
            impute(result, bad)


def handmade_model(cluster, kind):
    d = cluster.mu.shape[0]
    priors = make_priors(d, 1)
    return FitResult(clusters=[cluster], latent=None, priors=priors,
                     config=FitConfig(model_kind=kind), elbo_trace=[(0, 0.0)],
                     converged=True, diagnostics=[])


class TestImpute:
    def test_observed_cells_pass_through(self):
        data, _ = blob_data(30, [[-2.0, 1.0], [2.0, -1.0]], missing=0.25)
        priors = make_priors(2, 2)
        result = fit(data, priors, FitConfig(max_iterations=40))
        out = impute(result, data)
        assert np.array_equal(out.completed[data.mask],
                              data.values[data.mask])
        assert np.isnan(out.std[data.mask]).all()
        assert np.isfinite(out.completed).all()
        assert (out.std[~data.mask] > 0).all()

    def test_diagonal_cluster_imputes_marginal_mean(self):
        cluster = ClusterPosterior(
            kappa=2.0, eta=5.0, mu=np.array([1.0, -2.0]), gamma=4.5,
            sigma=np.diag([2.0, 3.0]), log_p=0.0, q=1.0, s=1.0, r=2.0,
            e_log_weight=0.0, e_log_det_cov=0.5)
        model = handmade_model(cluster, "gaussian")
        data = MaskedDataset(np.array([[np.nan, 0.7]]))
        out = impute(model, data)
        assert out.completed[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert out.completed[0, 1] == 0.7
        assert out.std[0, 0] == pytest.approx(np.sqrt(2.0 / 4.5), rel=1e-12)
        assert out.diagnostics == []

    def test_correlated_imputation_beats_feature_means(self):
        rng = np.random.default_rng(31)
        cov = np.array([[1.0, 0.9], [0.9, 1.0]])
        full = rng.multivariate_normal([0.0, 0.0], cov, size=80)
        values = full.copy()
        drop = rng.random(values.shape) < 0.2
        drop[drop.all(axis=1), 0] = False
        values[drop] = np.nan
        data = MaskedDataset(values)
        priors = make_priors(2, 1)
        result = fit(data, priors, FitConfig(model_kind="gaussian",
                                             max_iterations=60))
        out = impute(result, data)
        missing = ~data.mask
        model_rmse = np.sqrt(np.mean((out.completed[missing]
                                      - full[missing]) ** 2))
        filled = data.mean_imputed()
        mean_rmse = np.sqrt(np.mean((filled[missing] - full[missing]) ** 2))
        assert model_rmse < mean_rmse

    def test_low_shape_posterior_gives_infinite_spread(self):
        cluster = ClusterPosterior(
            kappa=2.0, eta=3.0, mu=np.zeros(2), gamma=5.0, sigma=np.eye(2),
            log_p=0.0, q=1.0, s=1.0, r=2.0, e_log_weight=0.0,
            e_log_det_cov=0.3, e_alpha=0.3, e_beta=1.0, e_log_beta=0.0,
            e_log_gamma_alpha=float(scipy.special.gammaln(0.3)), log_m=0.0)
        model = handmade_model(cluster, "student")
        data = MaskedDataset(np.array([[0.5, np.nan]]))
        out = impute(model, data)
        assert np.isinf(out.std[0, 1])
        assert out.completed[0, 1] == pytest.approx(0.0, abs=1e-12)
        assert any("row 0" in line for line in out.diagnostics)

    def test_no_missing_cells_is_identity(self):
        data, _ = blob_data(32, [[0.0, 0.0]], per_blob=20)
        priors = make_priors(2, 1)
        result = fit(data, priors, FitConfig(max_iterations=20))
        out = impute(result, data)
        assert np.array_equal(out.completed, data.values)
        assert np.isnan(out.std).all()
        assert out.diagnostics == []
