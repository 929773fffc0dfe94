import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcflong.panel_data import (
    PanelDataError,
    PanelDataset,
    StandardizationParams,
    estimate_propensity,
    from_frame,
    load_panel,
    partition_holdout,
    recode_treatment,
    save_panel,
    standardize_outcome,
)


def make_panel(N=200, n_i=5, seed=0, n_w=2, treated=None):
    rng = np.random.default_rng(seed)
    sid = np.repeat(np.arange(N), n_i)
    t = np.tile(np.arange(n_i, dtype=float), N)
    z_s = rng.choice([-0.5, 0.5], size=N) if treated is None else np.where(treated, 0.5, -0.5)
    return PanelDataset(
        subject_id=sid, t=t, y=rng.normal(size=N * n_i), z=z_s[sid],
        K=rng.uniform(size=(N * n_i, 3)), W=rng.uniform(size=(N, n_w))[sid],
    )


class TestLoad:
    def test_three_row_subject(self, tmp_path):
        p = tmp_path / "one.csv"
        pd.DataFrame({"subject": [7, 7, 7], "time": [2, 0, 1], "outcome": [1.0, 2.0, 3.0],
                      "treatment": [1, 1, 1], "K1": [0.1, 0.2, 0.3]}).to_csv(p, index=False)
        d = load_panel(p)
        assert (d.N, d.L) == (1, 3)
        np.testing.assert_array_equal(d.z, 0.5)
        np.testing.assert_array_equal(d.t, [0, 1, 2])
        np.testing.assert_array_equal(d.y, [2.0, 3.0, 1.0])

    def test_treatment_varies(self):
        df = pd.DataFrame({"subject": [1, 1], "time": [0, 1], "outcome": [0.0, 1.0],
                           "treatment": [1, 0]})
        with pytest.raises(PanelDataError, match="treatment varies within subject"):
            from_frame(df)

    def test_missing_column(self):
        df = pd.DataFrame({"subject": [1], "time": [0], "outcome": [0.0]})
        with pytest.raises(PanelDataError, match="missing column"):
            from_frame(df)

    def test_propensity_column_round_trip(self, tmp_path):
        df = pd.DataFrame({"subject": [1, 1, 2], "time": [0, 1, 0], "outcome": [0.0, 1.0, 2.0],
                           "treatment": [1, 1, 0], "propensity": [0.3, 0.3, 0.6]})
        df.to_csv(tmp_path / "p.csv", index=False)
        d = load_panel(tmp_path / "p.csv")
        np.testing.assert_array_equal(d.pi, [0.3, 0.3, 0.6])
        save_panel(d, tmp_path / "q.csv")
        np.testing.assert_array_equal(load_panel(tmp_path / "q.csv").pi, d.pi)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_panel(tmp_path / "nope.csv")

    def test_bad_codes(self):
        with pytest.raises(PanelDataError):
            recode_treatment([0, 2])

    def test_sizes_preserved(self, tmp_path):
        rng = np.random.default_rng(1)
        L = 2583
        sid = np.sort(rng.integers(0, 900, size=L))
        df = pd.DataFrame({"subject": sid, "time": rng.uniform(0, 2, L), "outcome": rng.normal(size=L),
                           "treatment": (sid % 2).astype(int)})
        for j in range(8):
            df[f"W{j + 1}"] = rng.uniform(size=900)[sid]
        for j in range(30):
            df[f"K{j + 1}"] = rng.uniform(size=L)
        d = from_frame(df)
        assert d.L == L and d.N == len(np.unique(sid))
        assert d.W.shape == (L, 8) and d.K.shape == (L, 30)

    def test_round_trip(self, tmp_path):
        d = make_panel(N=20, n_i=3)
        p = tmp_path / "panel.csv"
        save_panel(d, p)
        back = load_panel(p)
        np.testing.assert_allclose(back.y, d.y, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(back.z, d.z)
        np.testing.assert_allclose(back.K, d.K, atol=1e-12)
        np.testing.assert_allclose(back.W, d.W, atol=1e-12)

    @given(st.lists(st.sampled_from([0, 1]), min_size=1, max_size=30))
    def test_recode_keeps_labels(self, z):
        z = np.array(z)
        np.testing.assert_array_equal(recode_treatment(z) > 0, z == 1)


class TestPartition:
    def test_empty(self):
        d = make_panel(N=10)
        part = partition_holdout(d, 0, seed=3)
        assert len(part.heldout_rows) == 0
        np.testing.assert_array_equal(part.fit_rows, np.arange(d.L))

    def test_counts(self):
        d = make_panel()
        part = partition_holdout(d, 50, seed=3)
        assert len(part.heldout_rows) == 50
        held_subj = d.subject_id[part.heldout_rows]
        assert len(np.unique(held_subj)) == 50
        fit_counts = np.bincount(d.subject_index[part.fit_rows], minlength=d.N)
        np.testing.assert_array_equal(fit_counts[np.isin(d.subjects, held_subj)], 4)
        assert len(part.fit_rows) + 50 == d.L

    def test_determinism(self):
        d = make_panel()
        a, b = partition_holdout(d, 20, 11), partition_holdout(d, 20, 11)
        np.testing.assert_array_equal(a.heldout_rows, b.heldout_rows)

    def test_too_many(self):
        d = make_panel(N=5)
        with pytest.raises(PanelDataError):
            partition_holdout(d, 6, 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 40), st.integers(0, 2**31))
    def test_every_subject_keeps_rows(self, x, seed):
        d = make_panel(N=40, n_i=3)
        part = partition_holdout(d, x, seed)
        assert set(d.subject_index[part.fit_rows]) == set(range(d.N))
        assert len(np.intersect1d(part.fit_rows, part.heldout_rows)) == 0


class TestStandardize:
    def _with_y(self, y):
        n = len(y)
        return PanelDataset(subject_id=np.arange(n), t=np.zeros(n), y=np.array(y, float),
                            z=np.full(n, 0.5), K=np.zeros((n, 0)), W=np.zeros((n, 0)))

    def test_endpoints(self):
        ds, _ = standardize_outcome(self._with_y([0, 10]))
        np.testing.assert_allclose(ds.y, [-0.5, 0.5])

    def test_linear(self):
        ds, _ = standardize_outcome(self._with_y([0, 5, 10]))
        np.testing.assert_allclose(ds.y, [-0.5, 0.0, 0.5])

    def test_constant(self):
        with pytest.raises(PanelDataError):
            standardize_outcome(self._with_y([3, 3]))

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50))
    def test_inverse(self, y):
        y = np.array(y)
        if np.ptp(y) < 1e-3:
            return
        p = StandardizationParams(y.min(), y.max())
        ys = p.standardize(y)
        assert ys.min() >= -0.5 - 1e-12 and ys.max() <= 0.5 + 1e-12
        np.testing.assert_allclose(p.unstandardize(ys), y, atol=1e-9 * max(1.0, np.abs(y).max()))


class TestPropensity:
    def test_constant(self):
        treated = np.arange(100) < 40
        d = make_panel(N=100, n_i=2, treated=treated)
        np.testing.assert_allclose(estimate_propensity(d, "constant"), 0.40)

    def test_separation_clamped(self):
        treated = np.arange(60) < 30
        d = make_panel(N=60, n_i=2, treated=treated)
        W = np.where(treated, 1.0, 0.0)[d.subject_index][:, None] + 0.01 * d.W[:, :1]
        d = PanelDataset(d.subject_id, d.t, d.y, d.z, d.K, W)
        with pytest.warns(RuntimeWarning):
            pi = estimate_propensity(d, "logistic")
        assert pi.min() >= 0.01 and pi.max() <= 0.99
        np.testing.assert_allclose(pi[treated], 0.99)
        np.testing.assert_allclose(pi[~treated], 0.01)

    def test_supplied(self):
        d = make_panel(N=10, n_i=2)
        pi = np.linspace(0.2, 0.8, 10)
        np.testing.assert_allclose(estimate_propensity(d.with_pi(pi), "supplied"), pi)

    def test_supplied_missing(self):
        with pytest.raises(PanelDataError):
            estimate_propensity(make_panel(N=4), "supplied")

    def test_logistic_reasonable(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=400)
        treated = rng.uniform(size=400) < 1 / (1 + np.exp(-w))
        d = make_panel(N=400, n_i=2, treated=treated, n_w=1)
        d = PanelDataset(d.subject_id, d.t, d.y, d.z, d.K, w[d.subject_index][:, None])
        pi = estimate_propensity(d, "logistic")
        assert np.corrcoef(pi, w)[0, 1] > 0.99
