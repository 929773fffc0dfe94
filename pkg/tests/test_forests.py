import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcflong.forests import (
    ForestConfig,
    ForestTrace,
    SigmaState,
    SoftTree,
    SoftTreeEnsemble,
    calibrate_sigma_prior,
    predict_ensemble,
    soft_path_weight,
    split_probability,
    tree_size_prior,
    update_sigma2,
)
from bcflong.simgen import friedman_mean


def three_node(cut=0.3, bw=0.1, soft=True, values=(0.0, -1.0, 2.0)):
    return SoftTree(np.array([0, -1, -1]), np.array([cut, 0.0, 0.0]), np.array([1, -1, -1]),
                    np.array([2, -1, -1]), np.array(values, float), bw, soft)


def five_node(bw):
    # root splits x0 at .5; its right child splits x1 at .25
    return SoftTree(np.array([0, -1, 1, -1, -1]), np.array([0.5, 0, 0.25, 0, 0]),
                    np.array([1, -1, 3, -1, -1]), np.array([2, -1, 4, -1, -1]),
                    np.zeros(5), bw, True)


def unit_ensemble(m, p=2, soft=True, n=50, seed=0):
    """Ensemble whose covariate scaling is the identity on [0, 1]^p."""
    ens = SoftTreeEnsemble(ForestConfig(m=m, soft=soft), p)
    X = np.random.default_rng(seed).uniform(size=(n, p))
    X[0], X[1] = 0.0, 1.0
    ens.set_scaling(X)
    return ens


def set_tree(ens, t, tree):
    nn = len(tree.var)
    ens.nnodes[t] = nn
    ens.var[t, :nn] = tree.var
    ens.cut[t, :nn] = tree.cut
    ens.left[t, :nn] = tree.left
    ens.right[t, :nn] = tree.right
    ens.value[t, :nn] = tree.value
    ens.bandwidth[t] = tree.bandwidth


class TestSplitProbability:
    def test_root_mu_forest(self):
        cfg = ForestConfig.mu_default()
        assert split_probability(0, cfg) == pytest.approx(0.95)
        assert 1 - split_probability(0, cfg) == pytest.approx(0.05)

    def test_depth_one(self):
        assert split_probability(1, ForestConfig(eta=0.95, beta=2)) == pytest.approx(0.2375)

    def test_root_tau_forest(self):
        assert split_probability(0, ForestConfig.tau_default()) == pytest.approx(0.25)

    def test_negative_depth(self):
        with pytest.raises(ValueError):
            split_probability(-1, ForestConfig())

    @given(st.integers(0, 30))
    def test_decreasing_in_depth(self, d):
        cfg = ForestConfig()
        assert split_probability(d + 1, cfg) < split_probability(d, cfg)

    def test_size_prior_head(self):
        pmf = tree_size_prior(ForestConfig.mu_default())
        assert pmf[1] == pytest.approx(0.05)
        assert pmf[2] == pytest.approx(0.55, abs=0.01)
        assert pmf.sum() == pytest.approx(1.0)


class TestSoftPathWeight:
    def test_midpoint(self):
        tr = three_node(cut=0.3)
        x = np.array([0.3, 0.9])
        assert soft_path_weight(x, tr, 1) == pytest.approx(0.5)
        assert soft_path_weight(x, tr, 2) == pytest.approx(0.5)

    def test_gate_at_log3(self):
        b = 0.1
        tr = three_node(cut=0.3, bw=b)
        x = np.array([0.3 + b * math.log(3.0), 0.0])
        assert soft_path_weight(x, tr, 2) == pytest.approx(0.75, rel=1e-12)
        assert soft_path_weight(x, tr, 1) == pytest.approx(0.25, rel=1e-12)

    def test_hard_mode_indicator(self):
        tr = three_node(soft=False)
        for x0, right in [(0.1, 0.0), (0.9, 1.0)]:
            x = np.array([x0, 0.0])
            assert soft_path_weight(x, tr, 2) == right
            assert soft_path_weight(x, tr, 1) == 1 - right

    def test_not_a_leaf(self):
        with pytest.raises(ValueError, match="not a leaf"):
            soft_path_weight(np.zeros(2), three_node(), 0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1), st.floats(1e-3, 5.0))
    def test_weights_sum_to_one(self, x0, x1, bw):
        tr = five_node(bw)
        x = np.array([x0, x1])
        w = [soft_path_weight(x, tr, leaf) for leaf in tr.leaves]
        assert all(0.0 <= v <= 1.0 for v in w)
        assert sum(w) == pytest.approx(1.0, abs=1e-12)


class TestPrediction:
    def test_zero_stumps(self):
        ens = unit_ensemble(10)
        X = np.random.default_rng(1).uniform(size=(20, 2))
        np.testing.assert_array_equal(predict_ensemble(ens, X), 0.0)

    def test_additivity(self):
        ens = unit_ensemble(2)
        set_tree(ens, 0, three_node(values=(0, 1.5, 1.5)))
        ens.value[1, 0] = -0.25
        X = np.array([[0.2, 0.7], [0.9, 0.1]])
        np.testing.assert_allclose(ens.predict(X), 1.25)

    def test_single_tree_matches_path_weights(self):
        ens = unit_ensemble(1)
        tr = three_node(cut=0.4, bw=0.2, values=(0.0, -1.0, 2.0))
        set_tree(ens, 0, tr)
        x = np.array([0.55, 0.3])
        expect = sum(tr.value[j] * soft_path_weight(x, tr, j) for j in tr.leaves)
        assert ens.predict(x[None])[0] == pytest.approx(expect, rel=1e-12)

    def test_vanishing_bandwidth_equals_hard(self):
        soft = unit_ensemble(1, soft=True)
        hard = unit_ensemble(1, soft=False)
        set_tree(soft, 0, three_node(cut=0.3, bw=1e-9))
        set_tree(hard, 0, three_node(cut=0.3, soft=False))
        X = np.random.default_rng(2).uniform(size=(200, 2))
        X = X[np.abs(X[:, 0] - 0.3) > 1e-6]
        np.testing.assert_allclose(soft.predict(X), hard.predict(X), atol=1e-12)
        assert set(np.unique(hard.predict(X))) <= {-1.0, 2.0}

    def test_dimension_mismatch(self):
        ens = unit_ensemble(3)
        with pytest.raises(ValueError, match="covariate columns"):
            ens.predict(np.zeros((4, 3)))

    def test_unscaled_ensemble(self):
        with pytest.raises(RuntimeError):
            SoftTreeEnsemble(ForestConfig(m=2), 2).predict(np.zeros((1, 2)))


class TestBackfitting:
    def test_stump_conjugate_mean(self):
        # eta near zero keeps the single tree a stump, so the leaf draw is conjugate normal
        rng = np.random.default_rng(3)
        n, sigma2 = 50, 1.0
        cfg = ForestConfig(m=1, eta=1e-9)
        ens = SoftTreeEnsemble(cfg, 2)
        X = rng.uniform(size=(n, 2))
        R = rng.normal(0.3, 1.0, size=n)
        prec = n / sigma2 + 1 / cfg.leaf_sd ** 2
        mean = (R.sum() / sigma2) / prec
        vals = np.array([ens.sweep(R, X, sigma2, rng)[0] for _ in range(4000)])
        assert (ens.leaf_counts() == 1).all()
        assert vals.mean() == pytest.approx(mean, abs=4 * math.sqrt(1 / prec / 4000))
        assert vals.var() == pytest.approx(1 / prec, rel=0.1)

    def test_zero_residual_centered(self):
        rng = np.random.default_rng(4)
        ens = SoftTreeEnsemble(ForestConfig(m=20), 3)
        X = rng.uniform(size=(100, 3))
        means = [ens.sweep(np.zeros(100), X, 0.01, rng).mean() for _ in range(500)]
        assert abs(np.mean(means)) < 4 * np.std(means) / math.sqrt(500) + 1e-3

    def test_fit_is_cached_sum(self):
        rng = np.random.default_rng(5)
        ens = SoftTreeEnsemble(ForestConfig(m=10), 3)
        X = rng.uniform(size=(80, 3))
        y = X[:, 0] - 0.5
        for _ in range(50):
            fit = ens.sweep(y, X, 0.05, rng)
        np.testing.assert_allclose(fit, ens.predict(X), atol=1e-9)
        np.testing.assert_allclose(fit, ens.fitted, atol=1e-12)

    def test_residual_length(self):
        ens = SoftTreeEnsemble(ForestConfig(m=2), 2)
        with pytest.raises(ValueError):
            ens.sweep(np.zeros(3), np.zeros((4, 2)), 1.0, np.random.default_rng(0))

    def test_empty_forest(self):
        ens = SoftTreeEnsemble(ForestConfig(m=0), 2)
        out = ens.sweep(np.ones(5), np.random.default_rng(0).uniform(size=(5, 2)), 1.0,
                        np.random.default_rng(0))
        np.testing.assert_array_equal(out, 0.0)

    def test_covariate_affine_invariance(self):
        # dyadic covariates keep the min-max rescaling exact
        rng = np.random.default_rng(6)
        X = rng.integers(0, 64, size=(60, 2)) / 64.0
        y = np.where(X[:, 0] > 0.5, 0.3, -0.3)
        fits = []
        for A in (X, 4.0 * X + 2.0):
            ens = SoftTreeEnsemble(ForestConfig(m=5), 2)
            r = np.random.default_rng(7)
            for _ in range(30):
                f = ens.sweep(y, A, 0.05, r)
            fits.append(f)
        np.testing.assert_array_equal(fits[0], fits[1])

    def test_seed_determinism(self):
        X = np.random.default_rng(8).uniform(size=(40, 2))
        y = X[:, 1]
        out = []
        for _ in range(2):
            ens = SoftTreeEnsemble(ForestConfig(m=5), 2)
            rng = np.random.default_rng(9)
            for _ in range(20):
                f = ens.sweep(y, X, 0.1, rng)
            out.append((f, ens.to_json()))
        np.testing.assert_array_equal(out[0][0], out[1][0])
        assert out[0][1] == out[1][1]

    @pytest.mark.slow
    def test_friedman_in_sample(self):
        rng = np.random.default_rng(10)
        n = 300
        X = rng.uniform(size=(n, 10))
        f = friedman_mean(X)
        sigma = 1.0
        y = f + rng.normal(0, sigma, n)
        lo, hi = y.min(), y.max()
        ys = (y - lo) / (hi - lo) - 0.5
        s = calibrate_sigma_prior(ys, X)
        ens = SoftTreeEnsemble(ForestConfig(m=100), 10)
        acc = np.zeros(n)
        for it in range(5000):
            fit = ens.sweep(ys, X, s.sigma2, rng)
            s = update_sigma2(ys - fit, s, rng)
            if it >= 1000:
                acc += fit
        fhat = (acc / 4000 + 0.5) * (hi - lo) + lo
        assert np.sqrt(np.mean((fhat - y) ** 2)) < 1.5 * sigma
        assert np.sqrt(np.mean((fhat - f) ** 2)) < 1.5 * sigma


class TestSigma:
    def test_monte_carlo_calibration(self):
        rng = np.random.default_rng(11)
        e = rng.normal(0, 2.0, size=10_000)
        s = SigmaState(1.0, nu=3, lam=1.0)
        draws = []
        for _ in range(2000):
            s = update_sigma2(e, s, rng)
            draws.append(s.sigma2)
        assert 3.8 <= np.mean(draws) <= 4.2

    def test_prior_dominated(self):
        rng = np.random.default_rng(12)
        s = SigmaState(1.0, nu=1e6, lam=0.3)
        draws = [update_sigma2(np.zeros(10), s, rng).sigma2 for _ in range(200)]
        assert np.mean(draws) == pytest.approx(0.3, rel=0.01)

    def test_calibration_quantile(self):
        from scipy import stats

        y = np.random.default_rng(13).normal(size=200)
        s = calibrate_sigma_prior(y, nu=3, q=0.9)
        # prior P(sigma2 < s2_hat) = q under scaled inverse chi-squared (nu, lam)
        p = stats.chi2.sf(s.nu * s.lam / s.sigma2, s.nu)
        assert p == pytest.approx(0.9, abs=1e-10)

    def test_positive(self):
        with pytest.raises(ValueError):
            SigmaState(0.0)


class TestSerialization:
    def _fitted(self):
        rng = np.random.default_rng(14)
        X = rng.uniform(size=(60, 3))
        ens = SoftTreeEnsemble(ForestConfig(m=8), 3)
        for _ in range(40):
            ens.sweep(X[:, 0] * X[:, 1], X, 0.02, rng)
        return ens, X

    def test_json_round_trip(self):
        ens, X = self._fitted()
        back = SoftTreeEnsemble.from_json(ens.to_json())
        np.testing.assert_array_equal(back.predict(X), ens.predict(X))
        assert back.to_json() == ens.to_json()

    def test_trace_matches_ensemble(self):
        ens, X = self._fitted()
        rng = np.random.default_rng(15)
        tr = ForestTrace.for_ensemble(ens, scale=2.0)
        preds = []
        for _ in range(5):
            ens.sweep(X[:, 2], X, 0.02, rng)
            tr.append(ens)
            preds.append(ens.predict(X))
        np.testing.assert_allclose(tr.predict(X), 2.0 * np.array(preds), atol=1e-12)
        back = ForestTrace.from_dict(tr.to_dict())
        np.testing.assert_array_equal(back.predict(X), tr.predict(X))
        assert len(back) == 5


class TestTreePrior:
    @pytest.mark.slow
    def test_prior_only_size_distribution(self):
        cfg = ForestConfig.mu_default(m=50)
        rng = np.random.default_rng(16)
        X = rng.uniform(size=(100, 5))
        ens = SoftTreeEnsemble(cfg, 5)
        counts = []
        for it in range(400):
            ens.sweep(np.zeros(100), X, 1.0, rng, prior_only=True)
            if it >= 100:
                counts.append(ens.leaf_counts())
        c = np.concatenate(counts)
        freq = np.bincount(np.minimum(c, 5), minlength=6)[1:] / len(c)
        pmf = tree_size_prior(cfg)
        expect = np.append(pmf[1:5], pmf[5:].sum())
        np.testing.assert_allclose(freq, expect, atol=0.02)
