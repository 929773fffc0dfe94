"""Soft-BART tree ensembles: configuration, state, backfitting and prediction."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import _kernels as K


@dataclass
class ForestConfig:
    """Hyperparameters of one sum-of-trees ensemble.

    ``m`` trees with split prior ``eta * (1 + depth) ** -beta``.  Leaf values
    get a ``N(0, (0.5 / (k_leaf * sqrt(m)))**2)`` prior on the standardized
    outcome scale.  ``bandwidth_prior_mean`` is the mean of the exponential
    prior on each tree's gate bandwidth, in units of the covariate range.
    """

    m: int = 200
    eta: float = 0.95
    beta: float = 2.0
    k_leaf: float = 2.0
    soft: bool = True
    bandwidth_prior_mean: float = 0.1
    n_cutpoints: int = 100
    max_leaves: int = 16
    p_grow: float = 0.4
    p_prune: float = 0.4
    bandwidth_step: float = 0.5
    sparse: bool = False
    sparse_alpha: float = 1.0

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("m must be >= 0")
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")
        if not (self.p_grow > 0 and self.p_prune > 0 and self.p_grow + self.p_prune <= 1):
            raise ValueError("bad move probabilities")

    @classmethod
    def mu_default(cls, **kw) -> "ForestConfig":
        return cls(**{"m": 200, "eta": 0.95, "beta": 2.0, **kw})

    @classmethod
    def tau_default(cls, **kw) -> "ForestConfig":
        return cls(**{"m": 50, "eta": 0.25, "beta": 3.0, **kw})

    @property
    def leaf_sd(self) -> float:
        return 0.5 / (self.k_leaf * math.sqrt(max(self.m, 1)))

    @property
    def capacity(self) -> int:
        return 2 * self.max_leaves - 1


def split_probability(depth: int, cfg: ForestConfig) -> float:
    """Prior probability that a node at ``depth`` is internal."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    return cfg.eta * (1.0 + depth) ** (-cfg.beta)


def tree_size_prior(cfg: ForestConfig, max_leaves: int | None = None) -> np.ndarray:
    """Exact prior pmf of the leaf count, by recursion over depth.

    Entry ``k`` is P(k leaves); index 0 is unused.  Trees that would
    exceed ``max_leaves`` are removed and the rest renormalised, which is
    what the capacity-limited sampler targets.
    """
    kmax = max_leaves or cfg.max_leaves
    depth_cap = kmax + 1

    def rec(d):
        p = split_probability(d, cfg) if d < depth_cap else 0.0
        out = np.zeros(kmax + 1)
        out[1] = 1.0 - p
        if p > 0:
            child = rec(d + 1)
            conv = np.convolve(child, child)[: kmax + 1]
            out += p * conv
        return out

    pmf = rec(0)
    return pmf / pmf.sum()


@dataclass
class SoftTree:
    """Read-only view of one tree; covariates are in unit-scaled coordinates."""

    var: np.ndarray
    cut: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    bandwidth: float
    soft: bool = True

    @property
    def leaves(self) -> np.ndarray:
        return K.leaves_of(self.var, self.left, self.right)


def _gate(u: float, b: float, soft: bool) -> float:
    if soft:
        return float(K.expit(u / b))
    return 1.0 if u > 0 else 0.0


def soft_path_weight(x: np.ndarray, tree: SoftTree, leaf: int) -> float:
    """Product of gates along the root-to-``leaf`` path at covariate row x."""
    if leaf < 0 or leaf >= len(tree.var) or tree.var[leaf] >= 0:
        raise ValueError(f"node {leaf} is not a leaf")
    parent = np.full(len(tree.var), -1)
    for j, v in enumerate(tree.var):
        if v >= 0:
            parent[tree.left[j]] = j
            parent[tree.right[j]] = j
    wgt = 1.0
    node = leaf
    while node != 0:
        p = parent[node]
        g = _gate(x[tree.var[p]] - tree.cut[p], tree.bandwidth, tree.soft)
        wgt *= (1.0 - g) if tree.left[p] == node else g
        node = p
    return wgt


def cutpoint_grid(Xs: np.ndarray, n_cut: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-column cutpoints on unit-scaled data: midpoints or quantiles."""
    p = Xs.shape[1]
    grid = np.zeros((p, max(n_cut, 1)))
    ngrid = np.zeros(p, dtype=np.int64)
    for j in range(p):
        u = np.unique(Xs[:, j])
        if len(u) <= 1:
            continue
        if len(u) <= n_cut + 1:
            g = 0.5 * (u[1:] + u[:-1])
        else:
            g = np.unique(np.quantile(Xs[:, j], np.arange(1, n_cut + 1) / (n_cut + 1)))
        grid[j, : len(g)] = g
        ngrid[j] = len(g)
    return grid, ngrid


class SoftTreeEnsemble:
    """Sum of (soft) regression trees with cached gates for one training design.

    Covariates are min-max scaled with the training ranges; cutpoints and
    bandwidths live on that unit scale.  Leaf values are on the scale of
    whatever residual the ensemble is fitted to.
    """

    def __init__(self, cfg: ForestConfig, n_features: int):
        self.cfg = cfg
        self.n_features = n_features
        m, C = cfg.m, cfg.capacity
        self.var = np.full((m, C), -1, dtype=np.int64)
        self.cut = np.zeros((m, C))
        self.left = np.full((m, C), -1, dtype=np.int64)
        self.right = np.full((m, C), -1, dtype=np.int64)
        self.parent = np.full((m, C), -1, dtype=np.int64)
        self.depth = np.zeros((m, C), dtype=np.int64)
        self.value = np.zeros((m, C))
        self.nnodes = np.ones(m, dtype=np.int64)
        self.bandwidth = np.full(m, cfg.bandwidth_prior_mean)
        self.x_min: np.ndarray | None = None
        self.x_range: np.ndarray | None = None
        self.grid: np.ndarray | None = None
        self.ngrid: np.ndarray | None = None
        self.split_weights = np.ones(n_features)
        self.accept_counts = np.zeros((4, 2), dtype=np.int64)
        self._Xs: np.ndarray | None = None
        self._X_key = None
        self._gates: np.ndarray | None = None
        self._fits: np.ndarray | None = None

    # -- covariate handling -------------------------------------------------
    def _check_dims(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(
                f"expected {self.n_features} covariate columns, got shape {X.shape}"
            )
        return X

    def scale(self, X: np.ndarray) -> np.ndarray:
        X = self._check_dims(X)
        if self.x_min is None:
            raise RuntimeError("ensemble has no covariate scaling; fit it first")
        return np.ascontiguousarray((X - self.x_min) / self.x_range)

    def set_scaling(self, X: np.ndarray):
        X = self._check_dims(X)
        self.x_min = X.min(axis=0) if len(X) else np.zeros(self.n_features)
        rng = (X.max(axis=0) - self.x_min) if len(X) else np.ones(self.n_features)
        self.x_range = np.where(rng > 0, rng, 1.0)
        self.grid, self.ngrid = cutpoint_grid(self.scale(X), self.cfg.n_cutpoints)

    def bind(self, X: np.ndarray):
        """Attach a training design: compute gate cache and per-tree fits."""
        if self._X_key is not None and self._X_key is X:
            return
        key = X
        X = self._check_dims(X)
        if self.x_min is None:
            self.set_scaling(X)
        Xs = self.scale(X)
        m, C = self.var.shape
        n = len(Xs)
        self._gates = np.zeros((m, C, n))
        self._fits = np.zeros((m, n))
        for t in range(m):
            for j in range(self.nnodes[t]):
                if self.var[t, j] >= 0:
                    K.gate_vector(Xs[:, self.var[t, j]], self.cut[t, j],
                                  self.bandwidth[t], self.cfg.soft, self._gates[t, j])
            K.predict_tree(Xs, self.var[t], self.cut[t], self.left[t], self.right[t],
                           self.value[t], self.bandwidth[t], self.cfg.soft, self._fits[t])
        self._Xs = Xs
        self._X_key = key

    @property
    def fitted(self) -> np.ndarray:
        """Current ensemble fit on the bound training design."""
        if self._fits is None:
            raise RuntimeError("ensemble is not bound to a design")
        return self._fits.sum(axis=0)

    # -- introspection ------------------------------------------------------
    def tree(self, t: int) -> SoftTree:
        nn = self.nnodes[t]
        return SoftTree(self.var[t, :nn].copy(), self.cut[t, :nn].copy(),
                        self.left[t, :nn].copy(), self.right[t, :nn].copy(),
                        self.value[t, :nn].copy(), float(self.bandwidth[t]), self.cfg.soft)

    def leaf_counts(self) -> np.ndarray:
        return np.array([(self.var[t, : self.nnodes[t]] < 0).sum() for t in range(self.cfg.m)])

    def split_counts(self) -> np.ndarray:
        used = self.var[self.var >= 0]
        return np.bincount(used, minlength=self.n_features)

    # -- inference ----------------------------------------------------------
    def _cum_weights(self) -> np.ndarray:
        w = self.split_weights * (self.ngrid > 0)
        if w.sum() <= 0:
            raise ValueError("no covariate has an available cutpoint")
        return np.cumsum(w)

    def sweep(self, R, X, sigma2: float, rng: np.random.Generator, weights=None,
              prior_only: bool = False):
        """One backfitting pass targeting residual R; returns the new fit."""
        self.bind(X)
        R = np.asarray(R, dtype=float)
        if R.shape != (self._Xs.shape[0],):
            raise ValueError("residual length does not match the design")
        if self.cfg.m == 0:
            return np.zeros_like(R)
        w = np.ones_like(R) if weights is None else np.ascontiguousarray(weights, dtype=float)
        r = R - self._fits.sum(axis=0)
        if self.cfg.sparse:
            alpha = self.cfg.sparse_alpha / self.n_features + self.split_counts()
            s = rng.dirichlet(alpha * (self.ngrid > 0) + 1e-12 * (self.ngrid == 0))
            self.split_weights = s
        K.seed_numba(int(rng.integers(2**31 - 1)))
        cfg = self.cfg
        K.sweep(
            self._Xs, self.grid, self.ngrid, self._cum_weights(), r, w,
            float(sigma2), cfg.leaf_sd ** 2, cfg.eta, cfg.beta, cfg.p_grow, cfg.p_prune,
            cfg.soft, cfg.bandwidth_prior_mean, cfg.bandwidth_step, prior_only,
            self.var, self.cut, self.left, self.right, self.parent, self.depth,
            self.value, self.nnodes, self.bandwidth, self._gates, self._fits,
            self.accept_counts,
        )
        return R - r

    def predict(self, X) -> np.ndarray:
        Xs = self.scale(X)
        out = np.zeros(len(Xs))
        if self.cfg.m:
            K.predict_forest(Xs, self.var, self.cut, self.left, self.right, self.value,
                             self.bandwidth, self.cfg.soft, out)
        return out

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        trees = []
        for t in range(self.cfg.m):
            nn = int(self.nnodes[t])
            trees.append({
                "var": self.var[t, :nn].tolist(),
                "cut": self.cut[t, :nn].tolist(),
                "left": self.left[t, :nn].tolist(),
                "right": self.right[t, :nn].tolist(),
                "value": self.value[t, :nn].tolist(),
                "bandwidth": float(self.bandwidth[t]),
            })
        return {
            "format": "bcflong-ensemble/1",
            "config": asdict(self.cfg),
            "n_features": self.n_features,
            "x_min": None if self.x_min is None else self.x_min.tolist(),
            "x_range": None if self.x_range is None else self.x_range.tolist(),
            "grid": None if self.grid is None else self.grid.tolist(),
            "ngrid": None if self.ngrid is None else self.ngrid.tolist(),
            "split_weights": self.split_weights.tolist(),
            "trees": trees,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SoftTreeEnsemble":
        ens = cls(ForestConfig(**d["config"]), d["n_features"])
        if d["x_min"] is not None:
            ens.x_min = np.array(d["x_min"], dtype=float)
            ens.x_range = np.array(d["x_range"], dtype=float)
            ens.grid = np.array(d["grid"], dtype=float).reshape(d["n_features"], -1)
            ens.ngrid = np.array(d["ngrid"], dtype=np.int64)
        ens.split_weights = np.array(d["split_weights"], dtype=float)
        for t, tr in enumerate(d["trees"]):
            nn = len(tr["var"])
            ens.nnodes[t] = nn
            ens.var[t, :nn] = tr["var"]
            ens.cut[t, :nn] = tr["cut"]
            ens.left[t, :nn] = tr["left"]
            ens.right[t, :nn] = tr["right"]
            ens.value[t, :nn] = tr["value"]
            ens.bandwidth[t] = tr["bandwidth"]
            for j in range(nn):
                if tr["var"][j] >= 0:
                    ens.parent[t, tr["left"][j]] = j
                    ens.parent[t, tr["right"][j]] = j
            ens.depth[t, :nn] = _depths(ens.parent[t, :nn])
        return ens

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "SoftTreeEnsemble":
        return cls.from_dict(json.loads(s))


def _depths(parent: np.ndarray) -> np.ndarray:
    d = np.zeros(len(parent), dtype=np.int64)
    for j in range(len(parent)):
        k, p = 0, parent[j]
        while p >= 0:
            k += 1
            p = parent[p]
        d[j] = k
    return d


def predict_ensemble(ens: SoftTreeEnsemble, X) -> np.ndarray:
    """Sum-of-trees prediction at covariate rows X."""
    return ens.predict(X)


def backfit_sweep(ens: SoftTreeEnsemble, R, X, sigma: "SigmaState",
                  rng: np.random.Generator, weights=None) -> SoftTreeEnsemble:
    """Run one Bayesian backfitting pass of ``ens`` against residual R."""
    ens.sweep(R, X, sigma.sigma2, rng, weights=weights)
    return ens


class ForestTrace:
    """Retained ensembles packed into flat arrays for later evaluation."""

    def __init__(self, cfg: ForestConfig, n_features: int, x_min, x_range, scale=1.0):
        self.cfg = cfg
        self.n_features = n_features
        self.x_min = np.asarray(x_min, dtype=float)
        self.x_range = np.asarray(x_range, dtype=float)
        self.scale = float(scale)
        self._chunks: list[tuple] = []
        self._packed = None

    @classmethod
    def for_ensemble(cls, ens: SoftTreeEnsemble, scale=1.0) -> "ForestTrace":
        return cls(ens.cfg, ens.n_features, ens.x_min, ens.x_range, scale)

    def append(self, ens: SoftTreeEnsemble):
        nn = ens.nnodes
        mask = np.arange(ens.var.shape[1])[None, :] < nn[:, None]
        self._chunks.append((
            nn.copy(), ens.var[mask], ens.cut[mask], ens.left[mask], ens.right[mask],
            ens.value[mask], ens.bandwidth.copy(),
        ))
        self._packed = None

    def __len__(self):
        if self._packed is not None:
            return len(self._packed["offsets"]) - 1
        return len(self._chunks)

    def _pack(self):
        if self._packed is None:
            m = self.cfg.m
            nn = np.concatenate([c[0] for c in self._chunks]) if self._chunks else np.zeros(0, np.int64)
            cat = lambda i, dt: (np.concatenate([c[i] for c in self._chunks]).astype(dt)
                                 if self._chunks else np.zeros(0, dt))
            self._packed = {
                "offsets": np.arange(len(self._chunks) + 1, dtype=np.int64) * m,
                "tree_ptr": np.concatenate([[0], np.cumsum(nn)]).astype(np.int64),
                "var": cat(1, np.int64), "cut": cat(2, float), "left": cat(3, np.int64),
                "right": cat(4, np.int64), "value": cat(5, float), "bw": cat(6, float),
            }
        return self._packed

    def predict(self, X) -> np.ndarray:
        """Per-draw predictions, shape (draws, rows), multiplied by ``scale``."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} covariate columns, got shape {X.shape}")
        Xs = np.ascontiguousarray((X - self.x_min) / self.x_range)
        P = self._pack()
        out = np.zeros((len(P["offsets"]) - 1, len(Xs)))
        if self.cfg.m:
            K.predict_packed(Xs, P["offsets"], P["tree_ptr"], P["var"], P["cut"], P["left"],
                             P["right"], P["value"], P["bw"], self.cfg.soft, out)
        return out * self.scale

    def to_dict(self) -> dict:
        P = self._pack()
        return {
            "format": "bcflong-forest-trace/1",
            "config": asdict(self.cfg),
            "n_features": self.n_features,
            "x_min": self.x_min.tolist(),
            "x_range": self.x_range.tolist(),
            "scale": self.scale,
            **{k: v.tolist() for k, v in P.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestTrace":
        tr = cls(ForestConfig(**d["config"]), d["n_features"], d["x_min"], d["x_range"], d["scale"])
        tr._packed = {
            "offsets": np.array(d["offsets"], dtype=np.int64),
            "tree_ptr": np.array(d["tree_ptr"], dtype=np.int64),
            "var": np.array(d["var"], dtype=np.int64),
            "cut": np.array(d["cut"], dtype=float),
            "left": np.array(d["left"], dtype=np.int64),
            "right": np.array(d["right"], dtype=np.int64),
            "value": np.array(d["value"], dtype=float),
            "bw": np.array(d["bw"], dtype=float),
        }
        tr._chunks = tr._unpack()
        return tr

    def _unpack(self) -> list[tuple]:
        P = self._packed
        ptr, off = P["tree_ptr"], P["offsets"]
        nn = np.diff(ptr)
        chunks = []
        for k in range(len(off) - 1):
            a, b = off[k], off[k + 1]
            sl = slice(ptr[a], ptr[b])
            chunks.append((nn[a:b].copy(), P["var"][sl].copy(), P["cut"][sl].copy(),
                           P["left"][sl].copy(), P["right"][sl].copy(), P["value"][sl].copy(),
                           P["bw"][a:b].copy()))
        return chunks


@dataclass
class SigmaState:
    """Residual variance with its scaled-inverse-chi-squared prior (nu, lam)."""

    sigma2: float
    nu: float = 3.0
    lam: float = 1.0

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")


def calibrate_sigma_prior(y, design=None, nu: float = 3.0, q: float = 0.90) -> SigmaState:
    """Put prior mass ``q`` below a least-squares residual variance estimate."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    if design is not None and design.shape[1] + 1 < n:
        A = np.column_stack([np.ones(n), design])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = y - A @ coef
        s2 = resid @ resid / (n - A.shape[1])
    else:
        s2 = np.var(y, ddof=1) if n > 1 else 1.0
    s2 = max(float(s2), 1e-8)
    lam = s2 * stats.chi2.ppf(1.0 - q, nu) / nu
    return SigmaState(sigma2=s2, nu=nu, lam=lam)


def update_sigma2(full_residuals, s: SigmaState, rng: np.random.Generator) -> SigmaState:
    """Draw sigma^2 from its scaled-inverse-chi-squared full conditional."""
    e = np.asarray(full_residuals, dtype=float)
    n = len(e)
    scale = s.nu * s.lam + e @ e
    draw = scale / rng.chisquare(s.nu + n)
    return SigmaState(sigma2=max(draw, 1e-12), nu=s.nu, lam=s.lam)
