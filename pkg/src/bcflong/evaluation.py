"""Accuracy metrics and the multi-realization replication harness."""

from __future__ import annotations

import json
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .forests import ForestConfig
from .panel_data import partition_holdout
from .sampler import SamplerConfig, run_gibbs
from .simgen import SemiSyntheticConfig, SyntheticConfig, gen_fully_synthetic, gen_semi_synthetic

log = logging.getLogger(__name__)

VARIANTS = {"vanilla-BCF": "none", "B": "base", "S": "horseshoe"}
MAX_FAILURE_RATE = 0.10


class ReplicationFailure(RuntimeError):
    """Too many replications failed for the study to be trusted."""


def _pair(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.size == 0:
        raise ValueError("empty input")
    return a, b


def rmse(truth, estimate) -> float:
    """Root mean squared difference."""
    a, b = _pair(truth, estimate)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def pehe(tau_true, tau_hat) -> float:
    """Root mean squared error of individual treatment effects over all rows."""
    return rmse(tau_true, tau_hat)


def coverage_and_width(truth, lower, upper) -> tuple[float, float]:
    """Fraction of truths inside [lower, upper] and the mean interval width."""
    truth, lower = _pair(truth, lower)
    _, upper = _pair(truth, upper)
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    cov = np.mean((truth >= lower) & (truth <= upper))
    return float(cov), float(np.mean(upper - lower))


def interval(draws, level: float = 0.95):
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [a, 1.0 - a], axis=0)
    return lo, hi


# -- plan -----------------------------------------------------------------------

@dataclass
class ReplicationPlan:
    """What to generate, which variants to fit, and how often.

    ``generator`` is ``"fully-synthetic"`` or ``"semi-synthetic"``;
    ``generator_config`` holds that generator's options (sparsity and seed
    are overridden per replication).  ``sampler`` holds schedule options
    shared by every variant.
    """

    generator: str = "fully-synthetic"
    generator_config: dict = field(default_factory=dict)
    sparsity: tuple = (0.0,)
    variants: tuple = ("B", "S")
    n_reps: int = 20
    sampler: dict = field(default_factory=dict)
    holdout_fraction: float = 0.10
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_reps < 1:
            raise ValueError("replication count must be >= 1")
        if self.generator not in ("fully-synthetic", "semi-synthetic"):
            raise ValueError(f"unknown generator {self.generator!r}")
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise ValueError(f"unknown variants {sorted(bad)}")
        self.sparsity = tuple(float(s) for s in self.sparsity)
        self.variants = tuple(self.variants)

    def to_dict(self) -> dict:
        return asdict(self)


def _model_config(plan: ReplicationPlan, variant: str, seed: int) -> SamplerConfig:
    opts = dict(plan.sampler)
    if plan.generator == "fully-synthetic":
        opts.setdefault("mu", asdict(ForestConfig(m=100)))
        opts.setdefault("tau", asdict(ForestConfig(m=0)))
        opts.setdefault("propensity", "none")
        opts.setdefault("keep_tau_forests", False)
    else:
        opts.setdefault("keep_tau_forests", False)
    opts["re_prior"] = VARIANTS[variant]
    opts["seed"] = seed
    opts.pop("checkpoint_dir", None)
    return SamplerConfig.from_dict(opts)


def _task_seeds(plan_seed: int, s_idx: int, rep: int) -> tuple[int, int, int]:
    ss = np.random.SeedSequence([plan_seed, s_idx, rep])
    a, b, c = ss.generate_state(3)
    return int(a), int(b), int(c)


def _generate(plan: ReplicationPlan, sparsity: float, seed: int):
    gc = dict(plan.generator_config)
    gc.update(sparsity=sparsity, seed=seed)
    if plan.generator == "fully-synthetic":
        return gen_fully_synthetic(SyntheticConfig(**gc))
    return gen_semi_synthetic(SemiSyntheticConfig(**gc))


def evaluate_fit(draws, d, d_fit, d_new, truth, fit_rows, new_rows, eps_rng, causal: bool,
                 has_re: bool) -> dict:
    """All metrics for one fitted variant on one realization.

    Every subject of ``d`` keeps at least one row in ``d_fit``, so the
    fitted subjects line up with ``truth.alpha``.
    """
    out = {}
    z_fit, z_new = d_fit.z, d_new.z
    g_fit = draws.gamma(d_fit) if has_re else np.zeros_like(draws.mu)
    g_new = draws.gamma(d_new) if has_re else np.zeros_like(draws.mu_new)
    # parameter estimates: posterior means on training rows vs truth
    clean = truth.noiseless(d.z)
    out["Y"] = rmse(clean[fit_rows], (draws.mu + draws.tau * z_fit + g_fit).mean(axis=0))
    if causal:
        out["tau"] = pehe(truth.tau[fit_rows], draws.tau.mean(axis=0))
        out["mu"] = rmse(truth.mu[fit_rows], draws.mu.mean(axis=0))
    if has_re:
        a_hat = draws.alpha.mean(axis=0)
        out["alpha1"] = rmse(truth.alpha[:, 0], a_hat[:, 0])
        out["alpha2"] = rmse(truth.alpha[:, 1], a_hat[:, 1])
        out["gamma"] = rmse(truth.gamma[fit_rows], g_fit.mean(axis=0))
    # posterior predictive on held-out rows
    if causal:
        out["PEHE_heldout"] = pehe(truth.tau[new_rows], draws.tau_new.mean(axis=0))
    if has_re:
        lo, hi = interval(g_new)
        out["gamma_heldout_rmse"] = rmse(truth.gamma[new_rows], g_new.mean(axis=0))
        out["gamma_heldout_coverage"], out["gamma_heldout_width"] = \
            coverage_and_width(truth.gamma[new_rows], lo, hi)
    mean_new = draws.mu_new + draws.tau_new * z_new + g_new
    y_pred = mean_new + eps_rng.standard_normal(mean_new.shape) * np.sqrt(draws.sigma2)[:, None]
    lo, hi = interval(y_pred)
    out["Y_heldout_rmse"] = rmse(d_new.y, mean_new.mean(axis=0))
    out["Y_heldout_coverage"], out["Y_heldout_width"] = coverage_and_width(d_new.y, lo, hi)
    return out


def run_replication(plan: ReplicationPlan, s_idx: int, rep: int) -> list[dict]:
    """Generate one realization and fit every variant on it."""
    sparsity = plan.sparsity[s_idx]
    data_seed, split_seed, fit_seed = _task_seeds(plan.seed, s_idx, rep)
    d, truth = _generate(plan, sparsity, data_seed)
    x = int(round(plan.holdout_fraction * d.N))
    part = partition_holdout(d, x, split_seed)
    d_fit, d_new = d.subset(part.fit_rows), d.subset(part.heldout_rows)
    rows = []
    for v_idx, variant in enumerate(plan.variants):
        cfg = _model_config(plan, variant, fit_seed + v_idx)
        rec = {"sparsity": sparsity, "rep": rep, "variant": variant}
        t0 = time.perf_counter()
        try:
            draws = run_gibbs(d_fit, cfg, newdata=d_new)
            eps_rng = np.random.default_rng([fit_seed, v_idx, 1])
            metrics = evaluate_fit(draws, d, d_fit, d_new, truth, part.fit_rows, part.heldout_rows,
                                   eps_rng, causal=plan.generator == "semi-synthetic",
                                   has_re=cfg.re_prior != "none")
            rec.update(metrics, failed=False, error="")
        except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("replication %d (sparsity %g, %s) failed: %s", rep, sparsity, variant, exc)
            rec.update(failed=True, error=f"{type(exc).__name__}: {exc}")
        rec["seconds"] = time.perf_counter() - t0
        rows.append(rec)
    return rows


def _run_task(args):
    plan, s_idx, rep = args
    return run_replication(plan, s_idx, rep)


@dataclass
class MetricsReport:
    table: pd.DataFrame  # sparsity, variant, metric, mean, stderr, n_reps
    raw: pd.DataFrame
    n_failed: int
    n_total: int
    plan: dict

    def value(self, sparsity: float, variant: str, metric: str) -> float:
        t = self.table
        row = t[(t.sparsity == sparsity) & (t.variant == variant) & (t.metric == metric)]
        if len(row) != 1:
            raise KeyError((sparsity, variant, metric))
        return float(row["mean"].iloc[0])

    def wide(self) -> pd.DataFrame:
        """Metrics as rows, (sparsity, variant) as columns."""
        return self.table.pivot_table(index="metric", columns=["sparsity", "variant"],
                                      values="mean", sort=False)

    def write(self, csv_path, manifest_path=None, raw_path=None):
        self.table.to_csv(csv_path, index=False, float_format="%.10g")
        if raw_path is not None:
            self.raw.to_csv(raw_path, index=False, float_format="%.10g")
        if manifest_path is not None:
            man = {"plan": self.plan, "n_failed": self.n_failed, "n_total": self.n_total,
                   "environment": {"python": platform.python_version(),
                                   "numpy": np.__version__, "pandas": pd.__version__}}
            with open(manifest_path, "w") as fh:
                json.dump(man, fh, indent=2, sort_keys=True)


METRIC_ORDER = ["Y", "tau", "mu", "alpha1", "alpha2", "gamma", "PEHE_heldout",
                "gamma_heldout_rmse", "gamma_heldout_coverage", "gamma_heldout_width",
                "Y_heldout_rmse", "Y_heldout_coverage", "Y_heldout_width"]


def aggregate(raw: pd.DataFrame, plan: ReplicationPlan) -> pd.DataFrame:
    ok = raw[~raw.failed]
    rows = []
    for s in plan.sparsity:
        for v in plan.variants:
            sub = ok[(ok.sparsity == s) & (ok.variant == v)]
            for m in METRIC_ORDER:
                if m not in sub or sub[m].isna().all():
                    continue
                x = sub[m].dropna().to_numpy(float)
                se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else float("nan")
                rows.append({"sparsity": s, "variant": v, "metric": m, "mean": float(x.mean()),
                             "stderr": se, "n_reps": len(x)})
    return pd.DataFrame(rows, columns=["sparsity", "variant", "metric", "mean", "stderr",
                                       "n_reps"])


def run_replication_study(plan: ReplicationPlan, progress=None) -> MetricsReport:
    """Run every (sparsity, replication) task and aggregate across replications.

    Results do not depend on ``plan.workers``: each task derives its own
    seeds from (plan seed, sparsity index, replication index).
    """
    tasks = [(plan, s, r) for s in range(len(plan.sparsity)) for r in range(plan.n_reps)]
    results = []
    if plan.workers > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as ex:
            for res in ex.map(_run_task, tasks):
                results.append(res)
                if progress:
                    progress(len(results), len(tasks))
    else:
        for t in tasks:
            results.append(_run_task(t))
            if progress:
                progress(len(results), len(tasks))
    raw = pd.DataFrame([r for res in results for r in res])
    n_failed = int(raw.failed.sum())
    if n_failed > MAX_FAILURE_RATE * len(raw):
        raise ReplicationFailure(
            f"{n_failed} of {len(raw)} fits failed; first error: "
            f"{raw.loc[raw.failed, 'error'].iloc[0]}")
    return MetricsReport(aggregate(raw, plan), raw, n_failed, len(raw), plan.to_dict())
