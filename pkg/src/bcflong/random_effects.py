"""Per-subject random intercept/slope with Gaussian or horseshoe priors.

All draws are exact conjugate updates.  Inverse-gamma variates use the
shape/rate convention: ``IG(a, b)`` has density proportional to
``x**(-a-1) * exp(-b / x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

VAR_FLOOR = 1e-12
A_RHO_MODES = ("unit", "sigma", "rho0")


@dataclass
class RandomEffectState:
    alpha: np.ndarray  # (N, 2): intercept, slope

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.alpha.ndim != 2 or self.alpha.shape[1] != 2:
            raise ValueError("alpha must have shape (N, 2)")

    @classmethod
    def zeros(cls, N: int) -> "RandomEffectState":
        return cls(np.zeros((N, 2)))


@dataclass
class GaussianREPrior:
    """alpha_i ~ N(0, Sigma_B) with Sigma_B ~ IW(nu, Lambda)."""

    Sigma_B: np.ndarray = field(default_factory=lambda: np.eye(2))
    nu: float = 2.0
    Lambda: np.ndarray = field(default_factory=lambda: np.eye(2))

    def __post_init__(self):
        self.Sigma_B = np.asarray(self.Sigma_B, dtype=float)
        self.Lambda = np.asarray(self.Lambda, dtype=float)
        if not np.allclose(self.Sigma_B, self.Sigma_B.T):
            raise ValueError("Sigma_B must be symmetric")
        if np.any(np.linalg.eigvalsh(self.Sigma_B) <= 0):
            raise ValueError("Sigma_B must be positive definite")

    def cov(self, N: int) -> np.ndarray:
        return np.broadcast_to(self.Sigma_B, (N, 2, 2))


@dataclass
class HorseshoeState:
    """Global-local scales of the sparse random-effect prior.

    The prior covariance of subject i is diag(rho_1^2 lambda_i1^2,
    rho_2^2 lambda_i2^2).  ``a_rho_mode`` selects the scale of the
    half-Cauchy on rho: 1, sigma^2, or rho0^2 computed from ``N0``.
    """

    lam: np.ndarray
    v: np.ndarray
    rho: np.ndarray
    xi: np.ndarray
    a_lambda: float = 1.0
    a_rho_mode: str = "sigma"
    N0: float | None = None

    def __post_init__(self):
        if self.a_rho_mode not in A_RHO_MODES:
            raise ValueError(f"a_rho_mode must be one of {A_RHO_MODES}")
        if self.a_rho_mode == "rho0" and self.N0 is None:
            raise ValueError("rho0 mode needs N0")

    @classmethod
    def initial(cls, N: int, **kw) -> "HorseshoeState":
        return cls(lam=np.ones((N, 2)), v=np.ones((N, 2)), rho=np.ones(2), xi=np.ones(2), **kw)

    def cov(self) -> np.ndarray:
        d = (self.rho[None, :] * self.lam) ** 2
        out = np.zeros((len(d), 2, 2))
        out[:, 0, 0] = d[:, 0]
        out[:, 1, 1] = d[:, 1]
        return out

    def a_rho(self, sigma2: float, N: int, L: int) -> float:
        if self.a_rho_mode == "unit":
            return 1.0
        if self.a_rho_mode == "sigma":
            return sigma2
        return compute_rho0(self.N0, N, L, np.sqrt(sigma2)) ** 2


def inv_gamma(shape, rate, rng: np.random.Generator):
    """Draw IG(shape, rate) elementwise, floored at 1e-12."""
    rate = np.asarray(rate, dtype=float)
    g = rng.gamma(shape, 1.0, size=np.broadcast(np.asarray(shape), rate).shape)
    return np.maximum(rate / g, VAR_FLOOR)


def subject_sums(T: np.ndarray, R: np.ndarray, idx: np.ndarray, N: int):
    """Per-subject sum_j T'T (N, 2, 2) and sum_j T'R (N, 2)."""
    t = T[:, 1]
    n = np.bincount(idx, minlength=N).astype(float)
    st = np.bincount(idx, weights=t, minlength=N)
    stt = np.bincount(idx, weights=t * t, minlength=N)
    TT = np.empty((N, 2, 2))
    TT[:, 0, 0] = n
    TT[:, 0, 1] = TT[:, 1, 0] = st
    TT[:, 1, 1] = stt
    TR = np.column_stack([
        np.bincount(idx, weights=R, minlength=N),
        np.bincount(idx, weights=t * R, minlength=N),
    ])
    return TT, TR


def _inv2(M):
    det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
    out = np.empty_like(M)
    out[:, 0, 0] = M[:, 1, 1] / det
    out[:, 1, 1] = M[:, 0, 0] / det
    out[:, 0, 1] = -M[:, 0, 1] / det
    out[:, 1, 0] = -M[:, 1, 0] / det
    return out, det


def alpha_posterior(R, T, idx, N, cov_i, sigma2):
    """Mean (N, 2) and covariance (N, 2, 2) of each subject's alpha."""
    TT, TR = subject_sums(np.asarray(T, float), np.asarray(R, float), idx, N)
    cov_i = np.asarray(cov_i, dtype=float)
    if np.any(cov_i[:, 0, 0] * cov_i[:, 1, 1] - cov_i[:, 0, 1] * cov_i[:, 1, 0] <= 0):
        raise np.linalg.LinAlgError("prior covariance is not positive definite")
    prior_prec, _ = _inv2(cov_i)
    prec = TT / sigma2 + prior_prec
    Psi, pdet = _inv2(prec)
    assert np.all(pdet > 0), "singular posterior precision"
    mean = np.einsum("nij,nj->ni", Psi, TR / sigma2)
    return mean, Psi


def draw_alpha(R_alpha, d, cov_i, sigma2: float, rng: np.random.Generator) -> RandomEffectState:
    """Independent bivariate-normal draw of each subject's (intercept, slope)."""
    mean, Psi = alpha_posterior(R_alpha, d.T, d.subject_index, d.N, cov_i, sigma2)
    # closed-form 2x2 Cholesky
    l11 = np.sqrt(Psi[:, 0, 0])
    l21 = Psi[:, 1, 0] / l11
    l22 = np.sqrt(np.maximum(Psi[:, 1, 1] - l21 ** 2, 0.0))
    e = rng.standard_normal((d.N, 2))
    alpha = mean.copy()
    alpha[:, 0] += l11 * e[:, 0]
    alpha[:, 1] += l21 * e[:, 0] + l22 * e[:, 1]
    return RandomEffectState(alpha)


def update_base_covariance(state: RandomEffectState, prior: GaussianREPrior,
                           rng: np.random.Generator) -> GaussianREPrior:
    """Sigma_B ~ IW(nu + N, Lambda + sum_i alpha_i alpha_i')."""
    a = state.alpha
    df = prior.nu + len(a)
    scale = prior.Lambda + a.T @ a
    draw = stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
    draw = 0.5 * (draw + draw.T)
    return GaussianREPrior(Sigma_B=draw, nu=prior.nu, Lambda=prior.Lambda)


def horseshoe_local_rates(alpha, rho, v):
    return 1.0 / v + alpha ** 2 / (2.0 * rho[None, :] ** 2)


def draw_local_scale(alpha, rho, v, rng: np.random.Generator):
    """lambda^2 | . ~ IG(1, 1/v + alpha^2 / (2 rho^2))."""
    return inv_gamma(1.0, horseshoe_local_rates(alpha, rho, v), rng)


def draw_local_aux(lam2, a_lambda: float, rng: np.random.Generator):
    """v | . ~ IG(1, 1/a_lambda^2 + 1/lambda^2)."""
    return inv_gamma(1.0, 1.0 / a_lambda ** 2 + 1.0 / np.asarray(lam2, dtype=float), rng)


def update_horseshoe_local(alpha, rho, v, rng: np.random.Generator, a_lambda: float = 1.0):
    """Draw lambda^2 then v; returns (lambda, v)."""
    lam2 = draw_local_scale(alpha, rho, v, rng)
    return np.sqrt(lam2), draw_local_aux(lam2, a_lambda, rng)


def horseshoe_global_params(alpha, lam, xi):
    N = alpha.shape[0]
    shape = (N + 1) / 2.0
    rate = 1.0 / xi + 0.5 * np.sum(alpha ** 2 / lam ** 2, axis=0)
    return shape, rate


def draw_global_scale(alpha, lam, xi, rng: np.random.Generator):
    """rho^2 | . ~ IG((N+1)/2, 1/xi + sum_i alpha^2 / (2 lambda^2))."""
    shape, rate = horseshoe_global_params(alpha, lam, xi)
    return inv_gamma(shape, rate, rng)


def draw_global_aux(rho2, a_rho: float, rng: np.random.Generator):
    """xi | . ~ IG(1, 1/a_rho^2 + 1/rho^2)."""
    return inv_gamma(1.0, 1.0 / a_rho ** 2 + 1.0 / np.asarray(rho2, dtype=float), rng)


def update_horseshoe_global(alpha, lam, xi, a_rho: float, N: int, rng: np.random.Generator):
    """Draw rho^2 then xi; returns (rho, xi)."""
    if alpha.shape[0] != N:
        raise ValueError("alpha rows do not match N")
    rho2 = draw_global_scale(alpha, lam, xi, rng)
    return np.sqrt(rho2), draw_global_aux(rho2, a_rho, rng)


def update_horseshoe(state: RandomEffectState, hs: HorseshoeState, sigma2: float, N: int, L: int,
                     rng: np.random.Generator) -> HorseshoeState:
    lam, v = update_horseshoe_local(state.alpha, hs.rho, hs.v, rng, hs.a_lambda)
    rho, xi = update_horseshoe_global(state.alpha, lam, hs.xi, hs.a_rho(sigma2, N, L), N, rng)
    return HorseshoeState(lam=lam, v=v, rho=rho, xi=xi, a_lambda=hs.a_lambda,
                          a_rho_mode=hs.a_rho_mode, N0=hs.N0)


def compute_rho0(N0: float, N: int, L: int, sigma: float) -> float:
    """Global scale implied by a prior guess of N0 non-zero subjects."""
    if not 0 < N0 < N:
        raise ValueError("need 0 < N0 < N")
    if L <= 0 or sigma <= 0:
        raise ValueError("need L > 0 and sigma > 0")
    return N0 / (N - N0) * sigma / np.sqrt(L)


def random_contribution(state: RandomEffectState, d) -> np.ndarray:
    """gamma_ij = alpha_i1 + alpha_i2 * t_ij."""
    if state.alpha.shape[0] != d.N:
        raise ValueError(f"state has {state.alpha.shape[0]} subjects, panel has {d.N}")
    a = state.alpha[d.subject_index]
    return a[:, 0] + a[:, 1] * d.t
