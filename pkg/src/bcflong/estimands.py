"""Causal summaries computed from retained posterior draws."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .panel_data import PanelDataset
from .sampler import PosteriorDraws


@dataclass(frozen=True)
class EffectSummary:
    """Posterior mean with an equal-tailed credible interval."""

    mean: float
    lo: float
    hi: float
    n_draws: int
    level: float = 0.95

    @classmethod
    def from_draws(cls, x, level: float = 0.95) -> "EffectSummary":
        x = np.asarray(x, dtype=float).ravel()
        if len(x) == 0:
            raise ValueError("no draws to summarize")
        if np.ptp(x) == 0:
            return cls(float(x[0]), float(x[0]), float(x[0]), len(x), level)
        a = (1.0 - level) / 2.0
        lo, hi = np.quantile(x, [a, 1.0 - a])
        m = float(x.mean())
        # guard against round-off for degenerate chains
        return cls(m, float(min(lo, m)), float(max(hi, m)), len(x), level)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def format(self, digits: int = 2) -> str:
        f = f"{{:.{digits}f}}"
        return f"{f.format(self.mean)} [{f.format(self.lo)}, {f.format(self.hi)}]"

    def __str__(self):
        return self.format()


@dataclass(frozen=True)
class CATEQuery:
    W: np.ndarray
    t: float
    subject: object = None

    def __post_init__(self):
        if not self.t >= 0:
            raise ValueError("evaluation time must be >= 0")


def _tau_at(draws: PosteriorDraws, W, t) -> np.ndarray:
    """tau draws (D, rows) at moderator rows W and times t."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(W),))
    if draws.tau_trace is None:
        raise ValueError("treatment forests were not retained in these draws")
    n_w = draws.tau_trace.n_features - (1 if draws.meta.get("tau_time", True) else 0)
    if W.shape[1] != n_w:
        raise ValueError(f"W has {W.shape[1]} columns, the treatment forest expects {n_w}")
    if draws.meta.get("tau_time", True):
        x_min, x_rng = draws.tau_trace.x_min[-1], draws.tau_trace.x_range[-1]
        if np.any(t > x_min + 1.5 * x_rng) or np.any(t < x_min - 0.5 * x_rng):
            warnings.warn("evaluation time is far outside the observed follow-up range",
                          RuntimeWarning, stacklevel=3)
    return draws.predict_tau(W, t)


def cate_at_time(draws: PosteriorDraws, q: CATEQuery, level: float = 0.95) -> EffectSummary:
    """Treated-minus-control effect at moderators ``q.W`` and time ``q.t``.

    With several W rows the per-draw effects are averaged over the rows.
    """
    return EffectSummary.from_draws(_tau_at(draws, q.W, q.t).mean(axis=1), level)


def longitudinal_effect(draws: PosteriorDraws, W, t1: float, t2: float,
                        level: float = 0.95) -> EffectSummary:
    """Effect of treatment on the change in outcome between ``t1`` and ``t2``."""
    if t1 == t2:
        D = draws.n_draws
        return EffectSummary(0.0, 0.0, 0.0, D, level)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    n = len(W)
    tt = _tau_at(draws, np.vstack([W, W]), np.repeat([t1, t2], n))
    return EffectSummary.from_draws((tt[:, n:] - tt[:, :n]).mean(axis=1), level)


def icate_summary(draws: PosteriorDraws, d: PanelDataset, t_star: float,
                  level: float = 0.95) -> pd.DataFrame:
    """Per-subject effect at ``t_star``, sorted by posterior mean.

    Columns: subject, treatment, mean, lo95, hi95, n_draws.
    """
    W = d.subject_W()
    tau = _tau_at(draws, W, np.full(d.N, float(t_star)))
    a = (1.0 - level) / 2.0
    # exact values for subjects whose draws never move
    mean = np.where(np.ptp(tau, axis=0) == 0, tau[0], tau.mean(axis=0))
    lo, hi = np.quantile(tau, [a, 1.0 - a], axis=0)
    out = pd.DataFrame({
        "subject": d.subjects,
        "treatment": np.where(d.subject_z() > 0, "treated", "control"),
        "mean": mean,
        "lo95": np.minimum(lo, mean),
        "hi95": np.maximum(hi, mean),
        "n_draws": draws.n_draws,
    })
    return out.sort_values(["mean", "subject"], kind="mergesort").reset_index(drop=True)


def counterfactual_draws(draws: PosteriorDraws, d: PanelDataset, subject, z_cf: float,
                         times) -> np.ndarray:
    """Per-draw outcome trajectory (D, len(times)) under treatment code ``z_cf``.

    Covariates K are frozen at the subject's last observed visit.  When ``d``
    is the training panel the stored prognostic fit at that visit is used;
    otherwise the retained prognostic forests are evaluated.
    """
    if z_cf not in (-0.5, 0.5):
        raise ValueError("z_cf must be -0.5 or +0.5")
    pos = np.flatnonzero(d.subjects == subject)
    if len(pos) == 0:
        raise KeyError(f"unknown subject {subject!r}")
    s = pos[0]
    dpos = np.flatnonzero(np.asarray(draws.subjects) == subject)
    if len(dpos) == 0:
        raise KeyError(f"subject {subject!r} has no random-effect draws")
    times = np.asarray(times, dtype=float)
    row = d.last_rows()[s]
    n = len(times)
    if draws.mu.shape[1] == d.L:
        # training panel: mu at the frozen covariates is the stored row fit
        mu = np.repeat(draws.mu[:, row: row + 1], n, axis=1)
    else:
        K = np.repeat(d.K[row: row + 1], n, axis=0)
        pi = draws.subject_propensity(d)
        mu = draws.predict_mu(K, None if pi is None else np.full(n, pi[row]))
    tau = _tau_at(draws, np.repeat(d.W[row: row + 1], n, axis=0), times)
    a = draws.alpha[:, dpos[0], :]
    gamma = a[:, :1] + a[:, 1:] * times[None, :]
    return mu + tau * z_cf + gamma


def predict_counterfactual(draws: PosteriorDraws, d: PanelDataset, subject, z_cf: float,
                           times, level: float = 0.95) -> list[EffectSummary]:
    """Summarized counterfactual trajectory, one summary per time."""
    cf = counterfactual_draws(draws, d, subject, z_cf, times)
    return [EffectSummary.from_draws(cf[:, j], level) for j in range(cf.shape[1])]


@dataclass
class HarmonizedOutcome:
    y: np.ndarray
    y_harm: np.ndarray
    mu_hat: np.ndarray
    K_bar: np.ndarray

    def scatter_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"mu_hat": self.mu_hat, "y": self.y, "y_harm": self.y_harm})


def ls_slope(x, y) -> float:
    """Least-squares slope of y on x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    den = xc @ xc
    return float(xc @ (y - y.mean()) / den) if den > 0 else 0.0


def harmonize(draws: PosteriorDraws, d: PanelDataset) -> HarmonizedOutcome:
    """Remove the estimated prognostic (scanner) component from the outcome."""
    if draws.mu.shape[1] != d.L:
        raise ValueError("draws do not match the panel's rows")
    mu_hat = draws.mu.mean(axis=0)
    y_harm = d.y - mu_hat + mu_hat.mean()
    counts = np.bincount(d.subject_index, minlength=d.N)[:, None]
    K_bar = np.stack([np.bincount(d.subject_index, weights=d.K[:, j], minlength=d.N)
                      for j in range(d.K.shape[1])], axis=1) / counts if d.K.shape[1] else \
        np.zeros((d.N, 0))
    return HarmonizedOutcome(d.y.copy(), y_harm, mu_hat, K_bar)


def effects_table(draws: PosteriorDraws, W, times=(1.0, 2.0), level: float = 0.95,
                  digits: int = 2) -> pd.DataFrame:
    """Rows per time-specific effect plus the longitudinal contrast of the last two times."""
    rows = []
    for t in times:
        s = cate_at_time(draws, CATEQuery(np.asarray(W, float), float(t)), level)
        rows.append({"estimand": f"CATE(t={t:g})", "mean": s.mean, "lo95": s.lo, "hi95": s.hi,
                     "summary": s.format(digits)})
    if len(times) >= 2:
        t1, t2 = times[-2], times[-1]
        s = longitudinal_effect(draws, np.asarray(W, float), t1, t2, level)
        rows.append({"estimand": f"Long({t1:g}->{t2:g})", "mean": s.mean, "lo95": s.lo,
                     "hi95": s.hi, "summary": s.format(digits)})
    return pd.DataFrame(rows)
