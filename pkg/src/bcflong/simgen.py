"""Synthetic longitudinal panels with known ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .panel_data import PanelDataset, save_panel


@dataclass
class SyntheticConfig:
    """Regression-only panel: Friedman mean plus random intercept/slope.

    ``time_column`` is the 0-based index of the covariate replaced by the
    within-subject visit index (0, 1/(n-1), ..., 1).  ``friedman_scale``
    multiplies the Friedman surface before noise is calibrated.
    """

    N: int = 200
    n_i: int = 5
    p: int = 10
    time_column: int = 6
    sparsity: float = 0.0
    noise_factor: float = 0.10
    friedman_scale: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.sparsity < 1:
            raise ValueError("sparsity must be in [0, 1)")
        if self.p < 5 or not 0 <= self.time_column < self.p:
            raise ValueError("need p >= 5 and a valid time column")
        if self.n_i < 2:
            raise ValueError("n_i must be >= 2")


@dataclass
class SemiSyntheticConfig:
    """Causal panel: linear treatment effect, linear scanner effect, random effects."""

    L: int = 2583
    W_width: int = 8
    K_width: int = 30
    beta_bio: tuple = (2.0, 4.0)
    beta_nonbio: tuple = (0.0, 0.5)
    intercept: tuple = (0.5, 3.0)
    slope: tuple = (0.5, 2.0)
    visits: tuple = (2, 3, 4)
    t_max: float = 2.0
    sparsity: float = 0.0
    noise_factor: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.sparsity < 1:
            raise ValueError("sparsity must be in [0, 1)")
        if self.W_width < 2 or self.K_width < 1:
            raise ValueError("need W_width >= 2 and K_width >= 1")
        if min(self.visits) < 1 or self.L < min(self.visits):
            raise ValueError("invalid visit counts")


@dataclass
class GroundTruth:
    """Latent components; ``alpha`` columns are (intercept, slope)."""

    mu: np.ndarray
    tau: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    eps: np.ndarray
    sigma: float
    mask: np.ndarray  # True where a subject's random effects were zeroed
    beta_bio: np.ndarray | None = None
    beta_nonbio: np.ndarray | None = None

    def noiseless(self, z) -> np.ndarray:
        return self.mu + self.tau * z + self.gamma


def friedman_mean(X) -> np.ndarray:
    """10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4 + 5 x5 on the first five columns."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 5:
        raise ValueError("need at least 5 columns")
    return (10 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20 * (X[:, 2] - 0.5) ** 2
            + 10 * X[:, 3] + 5 * X[:, 4])


def apply_sparsity(alpha, proportion: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Zero both components of ceil(proportion * N) uniformly chosen subjects."""
    if not 0 <= proportion < 1:
        raise ValueError("proportion must be in [0, 1)")
    alpha = np.array(alpha, dtype=float)
    N = len(alpha)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = math.ceil(round(proportion * N, 9))
    mask = np.zeros(N, bool)
    mask[rng.choice(N, size=k, replace=False)] = True
    alpha[mask] = 0.0
    return alpha, mask


def noise_sd(noiseless, factor: float) -> float:
    m = float(np.mean(noiseless))
    if abs(m) < 1e-6:
        return factor * float(np.std(noiseless))
    return factor * abs(m)


def gen_fully_synthetic(cfg: SyntheticConfig) -> tuple[PanelDataset, GroundTruth]:
    rng = np.random.default_rng(cfg.seed)
    N, n = cfg.N, cfg.n_i
    L = N * n
    X = rng.uniform(size=(L, cfg.p))
    t = np.tile(np.arange(n) / (n - 1), N)
    X[:, cfg.time_column] = t
    alpha = rng.normal(0.0, 1.0, size=(N, 2))
    alpha, mask = apply_sparsity(alpha, cfg.sparsity, rng)
    sid = np.repeat(np.arange(N), n)
    gamma = alpha[sid, 0] + alpha[sid, 1] * t
    mu = cfg.friedman_scale * friedman_mean(X)
    clean = mu + gamma
    sigma = noise_sd(clean, cfg.noise_factor)
    eps = rng.normal(0.0, sigma, size=L)
    d = PanelDataset(
        subject_id=sid, t=t, y=clean + eps, z=np.full(L, -0.5), K=X, W=np.zeros((L, 0)),
        K_names=tuple(f"X{j + 1}" for j in range(cfg.p)),
    )
    return d, GroundTruth(mu, np.zeros(L), alpha, gamma, eps, sigma, mask)


def _visit_counts(cfg: SemiSyntheticConfig, rng) -> np.ndarray:
    counts = []
    total = 0
    while total < cfg.L:
        c = int(rng.choice(cfg.visits))
        counts.append(c)
        total += c
    counts = np.array(counts)
    lo = min(cfg.visits)
    while counts.sum() > cfg.L:
        big = np.flatnonzero(counts > lo)
        if len(big) == 0:
            counts = counts[:-1]
            continue
        counts[big[rng.integers(len(big))]] -= 1
    if counts.sum() < cfg.L:
        counts = np.append(counts, cfg.L - counts.sum())
    return counts


def synth_covariates(cfg: SemiSyntheticConfig, rng):
    """Uniform stand-ins: subject-level W, per-visit K, sorted visit times on [0, t_max]."""
    n_i = _visit_counts(cfg, rng)
    N = len(n_i)
    sid = np.repeat(np.arange(N), n_i)
    t = np.concatenate([np.sort(rng.uniform(0, cfg.t_max, size=k)) for k in n_i])
    W = rng.uniform(size=(N, cfg.W_width - 1))[sid]
    K = rng.uniform(size=(len(sid), cfg.K_width))
    z = rng.choice([-0.5, 0.5], size=N)[sid]
    return sid, t, W, K, z


def gen_semi_synthetic(cfg: SemiSyntheticConfig, covariates: dict | None = None):
    """Semi-synthetic causal panel.

    Parameters
    ----------
    covariates : dict, optional
        External covariates with keys ``subject``, ``t``, ``W`` (baseline
        moderators, ``W_width - 1`` columns), ``K`` and ``z``.  Synthesized
        when omitted.

    Returns
    -------
    (PanelDataset, GroundTruth)
        The treatment effect is linear in (W, t); the prognostic mean is
        linear in K.
    """
    rng = np.random.default_rng(cfg.seed)
    if covariates is None:
        sid, t, W, K, z = synth_covariates(cfg, rng)
    else:
        sid = np.asarray(covariates["subject"])
        t = np.asarray(covariates["t"], float)
        W = np.asarray(covariates["W"], float)
        K = np.asarray(covariates["K"], float)
        z = np.asarray(covariates["z"], float)
        if W.shape[1] != cfg.W_width - 1 or K.shape[1] != cfg.K_width:
            raise ValueError(f"external covariates must have {cfg.W_width - 1} W and "
                             f"{cfg.K_width} K columns")
    _, idx = np.unique(sid, return_inverse=True)
    N = idx.max() + 1
    L = len(sid)
    b_bio = rng.normal(cfg.beta_bio[0], cfg.beta_bio[1], size=cfg.W_width)
    b_non = rng.normal(cfg.beta_nonbio[0], cfg.beta_nonbio[1], size=cfg.K_width)
    a_int = rng.normal(cfg.intercept[0], cfg.intercept[1], size=N)
    a_slope = rng.normal(cfg.slope[0], cfg.slope[1], size=N)
    alpha, mask = apply_sparsity(np.column_stack([a_int, a_slope]), cfg.sparsity, rng)
    gamma = alpha[idx, 0] + alpha[idx, 1] * t
    tau = np.column_stack([W, t]) @ b_bio
    mu = K @ b_non
    clean = gamma + tau * z + mu
    sigma = noise_sd(clean, cfg.noise_factor)
    eps = rng.normal(0.0, sigma, size=L)
    d = PanelDataset(
        subject_id=sid, t=t, y=clean + eps, z=z, K=K, W=W,
        K_names=tuple(f"K{j + 1}" for j in range(K.shape[1])),
        W_names=tuple(f"W{j + 1}" for j in range(W.shape[1])),
    )
    return d, GroundTruth(mu, tau, alpha, gamma, eps, sigma, mask, b_bio, b_non)


def truth_frame(d: PanelDataset, g: GroundTruth) -> pd.DataFrame:
    """Row-aligned ground truth, including each row's subject-level alpha."""
    a = g.alpha[d.subject_index]
    return pd.DataFrame({
        "subject": d.subject_id, "time": d.t, "mu": g.mu, "tau": g.tau, "gamma": g.gamma,
        "eps": g.eps, "alpha_intercept": a[:, 0], "alpha_slope": a[:, 1],
        "zeroed": g.mask[d.subject_index].astype(int), "sigma": g.sigma,
    })


def write_simulation(d: PanelDataset, g: GroundTruth, panel_path, truth_path):
    save_panel(d, panel_path)
    truth_frame(d, g).to_csv(truth_path, index=False, float_format="%.17g")
