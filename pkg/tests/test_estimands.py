from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bcflong.estimands import (
    CATEQuery,
    EffectSummary,
    cate_at_time,
    counterfactual_draws,
    effects_table,
    harmonize,
    icate_summary,
    longitudinal_effect,
    ls_slope,
    predict_counterfactual,
)
from bcflong.forests import ForestConfig, ForestTrace, SoftTreeEnsemble
from bcflong.panel_data import PanelDataset
from bcflong.sampler import SamplerConfig, run_gibbs


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(0)
    N, n_i = 40, 3
    sid = np.repeat(np.arange(N), n_i)
    t = np.tile([0.0, 1.0, 2.0], N)
    z = rng.choice([-0.5, 0.5], size=N)[sid]
    W = rng.uniform(size=(N, 2))[sid]
    K = rng.uniform(size=(N * n_i, 3))
    y = 2 * K[:, 0] + (1 + t) * z + rng.normal(0, 0.2, N * n_i)
    d = PanelDataset(sid, t, y, z, K, W)
    cfg = SamplerConfig(max_iter=120, burn_in=20, seed=1, mu=ForestConfig(m=20),
                        tau=ForestConfig.tau_default(m=10), propensity="none",
                        keep_mu_forests=True, checkpoint_every=0)
    return d, run_gibbs(d, cfg)


class TestEffectSummary:
    def test_format(self):
        assert EffectSummary(0.26, 0.09, 0.44, 10).format() == "0.26 [0.09, 0.44]"
        assert str(EffectSummary(-1.0, -2.5, 0.125, 10)) == "-1.00 [-2.50, 0.12]"

    def test_constant_draws(self):
        s = EffectSummary.from_draws(np.full(50, 0.3))
        assert s.width == 0.0 and s.mean == pytest.approx(0.3)

    def test_empty(self):
        with pytest.raises(ValueError):
            EffectSummary.from_draws([])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200))
    def test_interval_contains_mean(self, x):
        s = EffectSummary.from_draws(x)
        assert s.lo <= s.mean <= s.hi


class TestCATE:
    def test_negative_time(self):
        with pytest.raises(ValueError):
            CATEQuery(np.zeros((1, 2)), -1.0)

    def test_width_check(self, fitted):
        _, dr = fitted
        with pytest.raises(ValueError, match="columns"):
            cate_at_time(dr, CATEQuery(np.zeros((1, 3)), 1.0))

    def test_extrapolation_warning(self, fitted):
        _, dr = fitted
        with pytest.warns(RuntimeWarning, match="outside"):
            cate_at_time(dr, CATEQuery(np.zeros((1, 2)), 50.0))

    def test_average_over_rows(self, fitted):
        d, dr = fitted
        W = d.subject_W()[:5]
        s = cate_at_time(dr, CATEQuery(W, 1.0))
        per = dr.predict_tau(W, np.ones(5)).mean(axis=1)
        assert s.mean == pytest.approx(per.mean(), abs=1e-12)

    def test_no_forests(self, fitted):
        d, dr = fitted
        with pytest.raises(ValueError):
            cate_at_time(replace(dr, tau_trace=None), CATEQuery(np.zeros((1, 2)), 1.0))

    def test_null_forest(self, fitted):
        d, dr = fitted
        ens = SoftTreeEnsemble(ForestConfig(m=4), 3)
        ens.set_scaling(np.column_stack([d.W, d.t]))
        tr = ForestTrace.for_ensemble(ens)
        for _ in range(dr.n_draws):
            tr.append(ens)
        null = replace(dr, tau_trace=tr)
        s = cate_at_time(null, CATEQuery(d.subject_W()[:4], 1.0))
        assert (s.mean, s.width) == (0.0, 0.0)
        tab = icate_summary(null, d, 1.0)
        assert (tab.hi95 - tab.lo95 == 0).all()


class TestLongitudinal:
    def test_same_time_zero(self, fitted):
        _, dr = fitted
        s = longitudinal_effect(dr, np.full((3, 2), 0.5), 1.3, 1.3)
        assert (s.mean, s.lo, s.hi) == (0.0, 0.0, 0.0)

    def test_difference_of_cates(self, fitted):
        d, dr = fitted
        W = d.subject_W()
        s = longitudinal_effect(dr, W, 0.0, 2.0)
        a = dr.predict_tau(W, np.zeros(len(W))).mean(axis=1)
        b = dr.predict_tau(W, np.full(len(W), 2.0)).mean(axis=1)
        assert s.mean == pytest.approx((b - a).mean(), abs=1e-10)

    def test_effects_table(self, fitted):
        d, dr = fitted
        tab = effects_table(dr, d.subject_W(), times=(1.0, 2.0))
        assert list(tab.columns) == ["estimand", "mean", "lo95", "hi95", "summary"]
        assert list(tab.estimand) == ["CATE(t=1)", "CATE(t=2)", "Long(1->2)"]
        assert (tab.lo95 <= tab["mean"]).all() and (tab["mean"] <= tab.hi95).all()


class TestICATE:
    def test_sorted_frame(self, fitted):
        d, dr = fitted
        tab = icate_summary(dr, d, 1.0)
        assert len(tab) == d.N
        assert tab["mean"].is_monotonic_increasing
        assert set(tab.treatment) <= {"treated", "control"}
        assert (tab.n_draws == dr.n_draws).all()


class TestCounterfactual:
    def test_recovers_fit(self, fitted):
        d, dr = fitted
        for s in d.subjects[:10]:
            row = d.last_rows()[np.flatnonzero(d.subjects == s)[0]]
            cf = counterfactual_draws(dr, d, s, d.z[row], [d.t[row]])[:, 0]
            fit = dr.mu[:, row] + dr.tau[:, row] * d.z[row] + dr.gamma(d)[:, row]
            np.testing.assert_allclose(cf, fit, atol=1e-9)

    def test_contrast_is_tau(self, fitted):
        d, dr = fitted
        times = np.array([0.0, 0.7, 1.9])
        s = d.subjects[3]
        row = d.last_rows()[3]
        diff = (counterfactual_draws(dr, d, s, 0.5, times)
                - counterfactual_draws(dr, d, s, -0.5, times))
        tau = dr.predict_tau(np.repeat(d.W[row:row + 1], 3, axis=0), times)
        np.testing.assert_allclose(diff, tau, atol=1e-10)

    def test_summaries(self, fitted):
        d, dr = fitted
        out = predict_counterfactual(dr, d, d.subjects[0], 0.5, [0.0, 1.0])
        assert len(out) == 2 and all(isinstance(e, EffectSummary) for e in out)

    def test_bad_code(self, fitted):
        d, dr = fitted
        with pytest.raises(ValueError):
            counterfactual_draws(dr, d, d.subjects[0], 1.0, [0.0])

    def test_unknown_subject(self, fitted):
        d, dr = fitted
        with pytest.raises(KeyError):
            counterfactual_draws(dr, d, 999, 0.5, [0.0])


class TestHarmonize:
    def test_mean_preserved(self, fitted):
        d, dr = fitted
        h = harmonize(dr, d)
        assert h.y_harm.mean() == pytest.approx(d.y.mean(), abs=1e-12)
        assert h.K_bar.shape == (d.N, d.K.shape[1])
        assert isinstance(h.scatter_frame(), pd.DataFrame)

    def test_constant_mu_identity(self, fitted):
        d, dr = fitted
        const = replace(dr, mu=np.full_like(dr.mu, 3.0))
        np.testing.assert_allclose(harmonize(const, d).y_harm, d.y, atol=1e-12)

    def test_flattens(self, fitted):
        d, dr = fitted
        h = harmonize(dr, d)
        assert abs(ls_slope(h.mu_hat, h.y_harm)) < abs(ls_slope(h.mu_hat, h.y))

    def test_row_mismatch(self, fitted):
        d, dr = fitted
        with pytest.raises(ValueError):
            harmonize(dr, d.subset(np.arange(10)))


class TestSlope:
    def test_exact_line(self):
        x = np.arange(10.0)
        assert ls_slope(x, 3 * x + 1) == pytest.approx(3.0)

    def test_constant_x(self):
        assert ls_slope(np.ones(4), np.arange(4.0)) == 0.0
