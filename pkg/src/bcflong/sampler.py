"""Three-stage Gibbs sampler for the longitudinal causal forest model.

Each iteration updates, in order:

1. the prognostic forest on ``R_mu = y - tau*z - gamma`` followed by sigma^2,
2. the treatment forest on ``R_tau = (y - mu - gamma) / z`` (weights z^2),
3. the random effects on ``R_alpha = y - mu - tau*z`` and their prior scales.

All work happens on the standardized outcome scale; stored draws are mapped
back to the original scale.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from .forests import (
    ForestConfig,
    ForestTrace,
    SigmaState,
    SoftTreeEnsemble,
    calibrate_sigma_prior,
    update_sigma2,
)
from .panel_data import (
    PanelDataError,
    PanelDataset,
    StandardizationParams,
    estimate_propensity,
)
from .random_effects import (
    GaussianREPrior,
    HorseshoeState,
    RandomEffectState,
    draw_alpha,
    random_contribution,
    update_base_covariance,
    update_horseshoe,
)

log = logging.getLogger(__name__)

RE_PRIORS = ("none", "base", "horseshoe")
PROPENSITY_MODES = ("auto", "none", "constant", "logistic", "supplied")
DRAWS_FORMAT = "bcflong-draws/1"


class SamplerError(RuntimeError):
    """Non-finite state or other failure inside the chain."""


@dataclass
class SamplerConfig:
    """Run schedule and model options.

    ``burn_in`` counts thinned draws: the chain keeps
    ``max_iter // thin - burn_in`` draws.
    """

    max_iter: int = 5000
    burn_in: int = 1000
    thin: int = 1
    seed: int = 0
    re_prior: str = "horseshoe"
    mu: ForestConfig = field(default_factory=ForestConfig.mu_default)
    tau: ForestConfig = field(default_factory=ForestConfig.tau_default)
    a_rho_mode: str = "sigma"
    N0: float | None = None
    propensity: str = "auto"
    tau_time: bool = True
    standardize: bool = True
    sigma_nu: float = 3.0
    sigma_q: float = 0.90
    fixed_sigma2: float | None = None
    fixed_Sigma_B: list | None = None
    store_lambda: bool = False
    keep_tau_forests: bool = True
    keep_mu_forests: bool = False
    checkpoint_every: int = 1000
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.mu, dict):
            self.mu = ForestConfig(**self.mu)
        if isinstance(self.tau, dict):
            self.tau = ForestConfig(**self.tau)
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.max_iter < 1 or self.burn_in < 0:
            raise ValueError("max_iter must be >= 1 and burn_in >= 0")
        if not self.burn_in < self.max_iter // self.thin:
            raise ValueError("burn_in must be smaller than max_iter / thin")
        if self.re_prior not in RE_PRIORS:
            raise ValueError(f"re_prior must be one of {RE_PRIORS}")
        if self.propensity not in PROPENSITY_MODES:
            raise ValueError(f"propensity must be one of {PROPENSITY_MODES}")
        if self.a_rho_mode not in ("unit", "sigma", "rho0"):
            raise ValueError("a_rho_mode must be unit, sigma or rho0")
        if self.a_rho_mode == "rho0" and self.N0 is None:
            raise ValueError("a_rho_mode=rho0 needs N0")

    @property
    def n_retained(self) -> int:
        return self.max_iter // self.thin - self.burn_in

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mu"] = asdict(self.mu)
        out["tau"] = asdict(self.tau)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown sampler options: {sorted(unknown)}")
        return cls(**d)


# -- designs ------------------------------------------------------------------

def mu_design(d: PanelDataset, pi=None) -> np.ndarray:
    """Prognostic covariates K, with the propensity appended when given."""
    if pi is None:
        return np.ascontiguousarray(d.K, dtype=float)
    return np.ascontiguousarray(np.column_stack([d.K, pi]))


def tau_design(d: PanelDataset, with_time: bool = True) -> np.ndarray:
    """Moderators W, with follow-up time appended."""
    if with_time:
        return np.ascontiguousarray(np.column_stack([d.W, d.t]))
    return np.ascontiguousarray(d.W, dtype=float)


def resolve_propensity(d: PanelDataset, mode: str) -> np.ndarray | None:
    """Per-row propensity column for the prognostic forest, or None."""
    if mode == "none":
        return None
    if mode == "auto":
        if d.pi is not None:
            mode = "supplied"
        elif d.W.shape[1] and len(np.unique(d.subject_z())) == 2:
            mode = "logistic"
        else:
            return None
    return estimate_propensity(d, mode)[d.subject_index]


# -- state --------------------------------------------------------------------

@dataclass
class ChainState:
    mu_forest: SoftTreeEnsemble
    tau_forest: SoftTreeEnsemble
    re: RandomEffectState
    sigma: SigmaState
    base: GaussianREPrior | None
    hs: HorseshoeState | None
    mu: np.ndarray
    tau: np.ndarray
    gamma: np.ndarray
    iteration: int
    rng: np.random.Generator


def compute_residual(stage: str, d: PanelDataset, state) -> np.ndarray:
    """Partial residual targeted by one stage of the sweep.

    ``state`` needs ``mu``, ``tau`` (row fits) and ``gamma`` (row random
    contributions), all on the scale of ``d.y``.
    """
    y, z = d.y, d.z
    if stage == "mu":
        return y - state.tau * z - state.gamma
    if stage == "tau":
        if np.any(z == 0):
            raise PanelDataError("treatment code 0 makes the tau residual undefined")
        return (y - state.mu - state.gamma) / z
    if stage == "alpha":
        return y - state.mu - state.tau * z
    raise ValueError(f"unknown stage {stage!r}")


# -- draws --------------------------------------------------------------------

@dataclass
class PosteriorDraws:
    """Retained draws on the original outcome scale.

    Arrays have the retained iteration on axis 0.  ``mu``/``tau`` are row
    fits on the training panel; ``mu_new``/``tau_new`` are present when the
    sampler was given extra rows to predict.
    """

    mu: np.ndarray
    tau: np.ndarray
    alpha: np.ndarray
    sigma2: np.ndarray
    subjects: np.ndarray
    std: StandardizationParams
    rho: np.ndarray | None = None
    lam: np.ndarray | None = None
    Sigma_B: np.ndarray | None = None
    mu_new: np.ndarray | None = None
    tau_new: np.ndarray | None = None
    tau_trace: ForestTrace | None = None
    mu_trace: ForestTrace | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return len(self.sigma2)

    def gamma(self, d: PanelDataset, rows_subject=None) -> np.ndarray:
        """Random contribution draws (D, rows) for the rows of ``d``."""
        pos = d.align_subjects(self) if rows_subject is None else rows_subject
        a = self.alpha[:, pos, :]
        return a[:, :, 0] + a[:, :, 1] * d.t[None, :]

    def predict_tau(self, W, t) -> np.ndarray:
        if self.tau_trace is None:
            raise ValueError("treatment forests were not retained")
        X = np.column_stack([np.asarray(W, float), np.asarray(t, float)]) \
            if self.meta.get("tau_time", True) else np.asarray(W, float)
        return self.tau_trace.predict(X)

    def predict_mu(self, K, pi=None) -> np.ndarray:
        if self.mu_trace is None:
            raise ValueError("prognostic forests were not retained")
        X = np.asarray(K, float) if pi is None else np.column_stack([K, pi])
        return self.mu_trace.predict(X) + self.std.y_min + 0.5 * self.std.scale

    def subject_propensity(self, d: PanelDataset) -> np.ndarray | None:
        """Row propensities for ``d``: its own column, else the values used in the fit."""
        if not self.meta.get("propensity_used"):
            return None
        if d.pi is not None:
            return d.pi
        stored = self.meta.get("propensity")
        if stored is None:
            raise ValueError("the fit used a propensity column; attach it with with_pi")
        return np.asarray(stored, dtype=float)[d.align_subjects(self)]

    def check_finite(self):
        for name in ("mu", "tau", "alpha", "sigma2", "rho", "Sigma_B"):
            a = getattr(self, name)
            if a is not None and not np.all(np.isfinite(a)):
                raise SamplerError(f"non-finite values in stored {name}")

    # -- persistence ----------------------------------------------------------
    def save(self, path, fmt: str = "%.17g") -> Path:
        """Write one CSV per quantity plus ``manifest.json``."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        D = self.n_draws
        files = {}

        def dump(name, arr, cols):
            df = pd.DataFrame(arr.reshape(D, -1), columns=cols)
            df.insert(0, "draw", np.arange(D))
            df.to_csv(path / f"{name}.csv", index=False, float_format=fmt)
            files[name] = f"{name}.csv"

        L = self.mu.shape[1]
        dump("mu", self.mu, [f"row{i}" for i in range(L)])
        dump("tau", self.tau, [f"row{i}" for i in range(L)])
        sub = [str(s) for s in self.subjects]
        dump("alpha", self.alpha, [f"{s}:{c}" for s in sub for c in ("intercept", "slope")])
        dump("sigma2", self.sigma2[:, None], ["sigma2"])
        if self.rho is not None:
            dump("rho", self.rho, ["intercept", "slope"])
        if self.lam is not None:
            dump("lambda", self.lam, [f"{s}:{c}" for s in sub for c in ("intercept", "slope")])
        if self.Sigma_B is not None:
            dump("Sigma_B", self.Sigma_B, ["s11", "s12", "s21", "s22"])
        if self.mu_new is not None:
            dump("mu_new", self.mu_new, [f"row{i}" for i in range(self.mu_new.shape[1])])
            dump("tau_new", self.tau_new, [f"row{i}" for i in range(self.tau_new.shape[1])])
        for name in ("tau_trace", "mu_trace"):
            tr = getattr(self, name)
            if tr is not None:
                (path / f"{name}.json").write_text(json.dumps(tr.to_dict()))
                files[name] = f"{name}.json"
        manifest = {
            "format": DRAWS_FORMAT,
            "n_draws": D,
            "subjects": sub,
            "subject_dtype": str(np.asarray(self.subjects).dtype),
            "standardization": {"y_min": self.std.y_min, "y_max": self.std.y_max,
                                "method": self.std.method},
            "files": files,
            **self.meta,
        }
        timings = manifest.pop("timings", None)
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        if timings is not None:
            (path / "timings.json").write_text(json.dumps(timings, indent=2))
        return path

    @classmethod
    def load(cls, path) -> "PosteriorDraws":
        path = Path(path)
        man = json.loads((path / "manifest.json").read_text())
        if man.get("format") != DRAWS_FORMAT:
            raise ValueError(f"{path} is not a draws directory")
        files = man["files"]

        def read(name):
            if name not in files:
                return None
            df = pd.read_csv(path / files[name], float_precision="round_trip")
            return df.drop(columns="draw").to_numpy(float)

        D = man["n_draws"]
        subjects = np.array(man["subjects"]).astype(man["subject_dtype"])
        N = len(subjects)
        std = StandardizationParams(**man["standardization"])

        def trace(name):
            if name not in files:
                return None
            return ForestTrace.from_dict(json.loads((path / files[name]).read_text()))

        alpha = read("alpha").reshape(D, N, 2)
        lam = read("lambda")
        SB = read("Sigma_B")
        s2 = read("sigma2")[:, 0]
        meta = {k: v for k, v in man.items()
                if k not in ("format", "n_draws", "subjects", "subject_dtype",
                             "standardization", "files")}
        return cls(mu=read("mu"), tau=read("tau"), alpha=alpha, sigma2=s2, subjects=subjects,
                   std=std, rho=read("rho"),
                   lam=None if lam is None else lam.reshape(D, N, 2),
                   Sigma_B=None if SB is None else SB.reshape(D, 2, 2),
                   mu_new=read("mu_new"), tau_new=read("tau_new"),
                   tau_trace=trace("tau_trace"), mu_trace=trace("mu_trace"), meta=meta)


def data_checksum(d: PanelDataset) -> str:
    h = hashlib.sha256()
    for a in (np.asarray(d.subject_id).astype(str).astype("U"), d.t, d.y, d.z, d.K, d.W):
        h.update(np.ascontiguousarray(a).tobytes())
    if d.pi is not None:
        h.update(np.ascontiguousarray(d.pi).tobytes())
    return h.hexdigest()


# -- the chain ------------------------------------------------------------------

class _Buffers:
    """Preallocated storage for retained draws (standardized scale)."""

    def __init__(self, cfg: SamplerConfig, L: int, N: int, L_new: int):
        D = cfg.n_retained
        self.mu = np.empty((D, L))
        self.tau = np.empty((D, L))
        self.alpha = np.empty((D, N, 2))
        self.sigma2 = np.empty(D)
        self.rho = np.empty((D, 2)) if cfg.re_prior == "horseshoe" else None
        self.lam = np.empty((D, N, 2)) if cfg.re_prior == "horseshoe" and cfg.store_lambda else None
        self.Sigma_B = np.empty((D, 2, 2)) if cfg.re_prior == "base" else None
        self.mu_new = np.empty((D, L_new)) if L_new else None
        self.tau_new = np.empty((D, L_new)) if L_new else None
        self.k = 0

    def arrays(self) -> dict:
        return {k: v for k, v in vars(self).items() if isinstance(v, np.ndarray)}


def _init_state(ds: PanelDataset, cfg: SamplerConfig, Xmu, Xtau) -> ChainState:
    rng = np.random.default_rng(cfg.seed)
    mu_f = SoftTreeEnsemble(cfg.mu, Xmu.shape[1])
    tau_f = SoftTreeEnsemble(cfg.tau, Xtau.shape[1])
    mu_f.bind(Xmu)
    tau_f.bind(Xtau)
    design = np.column_stack([Xmu, ds.z[:, None] * Xtau, ds.z])
    sig = calibrate_sigma_prior(ds.y, design, nu=cfg.sigma_nu, q=cfg.sigma_q)
    if cfg.fixed_sigma2 is not None:
        sig = SigmaState(float(cfg.fixed_sigma2), sig.nu, sig.lam)
    base = hs = None
    if cfg.re_prior == "base":
        SB = np.eye(2) if cfg.fixed_Sigma_B is None else np.asarray(cfg.fixed_Sigma_B, float)
        base = GaussianREPrior(Sigma_B=SB)
    elif cfg.re_prior == "horseshoe":
        hs = HorseshoeState.initial(ds.N, a_rho_mode=cfg.a_rho_mode, N0=cfg.N0)
    L = ds.L
    return ChainState(mu_f, tau_f, RandomEffectState.zeros(ds.N), sig, base, hs,
                      mu=mu_f.fitted.copy(), tau=tau_f.fitted.copy(), gamma=np.zeros(L),
                      iteration=0, rng=rng)


def gibbs_step(ds: PanelDataset, cfg: SamplerConfig, st: ChainState, Xmu, Xtau, w_tau):
    """Advance the chain by one full three-stage sweep (in place)."""
    rng = st.rng
    # stage 1: prognostic forest and residual variance
    st.mu = st.mu_forest.sweep(compute_residual("mu", ds, st), Xmu, st.sigma.sigma2, rng)
    if cfg.fixed_sigma2 is None:
        st.sigma = update_sigma2(ds.y - st.mu - st.tau * ds.z - st.gamma, st.sigma, rng)
    # stage 2: treatment forest
    if cfg.tau.m:
        st.tau = st.tau_forest.sweep(compute_residual("tau", ds, st), Xtau, st.sigma.sigma2,
                                     rng, weights=w_tau)
    # stage 3: random effects
    if cfg.re_prior != "none":
        R = compute_residual("alpha", ds, st)
        cov = st.base.cov(ds.N) if st.hs is None else st.hs.cov()
        st.re = draw_alpha(R, ds, cov, st.sigma.sigma2, rng)
        if st.base is not None and cfg.fixed_Sigma_B is None:
            st.base = update_base_covariance(st.re, st.base, rng)
        elif st.hs is not None:
            st.hs = update_horseshoe(st.re, st.hs, st.sigma.sigma2, ds.N, ds.L, rng)
        st.gamma = random_contribution(st.re, ds)
    st.iteration += 1
    if not (np.isfinite(st.sigma.sigma2) and np.all(np.isfinite(st.mu))
            and np.all(np.isfinite(st.tau)) and np.all(np.isfinite(st.gamma))):
        raise SamplerError(f"non-finite chain state at iteration {st.iteration}")


def _record(buf: _Buffers, st: ChainState, cfg, Xmu_new, Xtau_new, traces):
    k = buf.k
    buf.mu[k] = st.mu
    buf.tau[k] = st.tau
    buf.alpha[k] = st.re.alpha
    buf.sigma2[k] = st.sigma.sigma2
    if buf.rho is not None:
        buf.rho[k] = st.hs.rho
    if buf.lam is not None:
        buf.lam[k] = st.hs.lam
    if buf.Sigma_B is not None:
        buf.Sigma_B[k] = st.base.Sigma_B
    if buf.mu_new is not None:
        buf.mu_new[k] = st.mu_forest.predict(Xmu_new)
        buf.tau_new[k] = st.tau_forest.predict(Xtau_new) if cfg.tau.m else 0.0
    if traces[0] is not None:
        traces[0].append(st.tau_forest)
    if traces[1] is not None:
        traces[1].append(st.mu_forest)
    buf.k += 1


# -- checkpoints ----------------------------------------------------------------

def _save_checkpoint(path: Path, st: ChainState, buf: _Buffers, traces):
    path.mkdir(parents=True, exist_ok=True)
    doc = {
        "iteration": st.iteration,
        "rng": st.rng.bit_generator.state,
        "mu_forest": st.mu_forest.to_dict(),
        "tau_forest": st.tau_forest.to_dict(),
        "alpha": st.re.alpha.tolist(),
        "sigma": asdict(st.sigma),
        "Sigma_B": None if st.base is None else st.base.Sigma_B.tolist(),
        "hs": None if st.hs is None else {
            "lam": st.hs.lam.tolist(), "v": st.hs.v.tolist(),
            "rho": st.hs.rho.tolist(), "xi": st.hs.xi.tolist()},
        "n_recorded": buf.k,
        "traces": [None if t is None else t.to_dict() for t in traces],
    }
    tmp = path / "state.json.tmp"
    tmp.write_text(json.dumps(doc))
    # row fits and per-tree caches are saved exactly so a resumed chain stays bit-identical
    exact = {"state_mu": st.mu, "state_tau": st.tau, "state_gamma": st.gamma,
             "mu_tree_fits": st.mu_forest._fits, "tau_tree_fits": st.tau_forest._fits}
    np.savez(path / "draws.npz", **{k: v[: buf.k] for k, v in buf.arrays().items()}, **exact)
    tmp.replace(path / "state.json")


def _load_checkpoint(path: Path, ds, cfg, Xmu, Xtau, buf: _Buffers, st: ChainState, traces):
    doc = json.loads((path / "state.json").read_text())
    st.iteration = doc["iteration"]
    st.rng.bit_generator.state = doc["rng"]
    st.mu_forest = SoftTreeEnsemble.from_dict(doc["mu_forest"])
    st.tau_forest = SoftTreeEnsemble.from_dict(doc["tau_forest"])
    st.mu_forest.bind(Xmu)
    st.tau_forest.bind(Xtau)
    st.re = RandomEffectState(np.array(doc["alpha"]))
    st.sigma = SigmaState(**doc["sigma"])
    if doc["Sigma_B"] is not None:
        st.base = GaussianREPrior(Sigma_B=np.array(doc["Sigma_B"]))
    if doc["hs"] is not None:
        h = doc["hs"]
        st.hs = HorseshoeState(lam=np.array(h["lam"]), v=np.array(h["v"]), rho=np.array(h["rho"]),
                               xi=np.array(h["xi"]), a_rho_mode=cfg.a_rho_mode, N0=cfg.N0)
    k = doc["n_recorded"]
    with np.load(path / "draws.npz") as z:
        for name, arr in buf.arrays().items():
            arr[:k] = z[name]
        st.mu, st.tau, st.gamma = z["state_mu"], z["state_tau"], z["state_gamma"]
        st.mu_forest._fits[:] = z["mu_tree_fits"]
        st.tau_forest._fits[:] = z["tau_tree_fits"]
    buf.k = k
    out = []
    for t, saved in zip(traces, doc["traces"]):
        out.append(None if t is None else ForestTrace.from_dict(saved))
    return out


# -- driver ---------------------------------------------------------------------

def run_gibbs(d: PanelDataset, cfg: SamplerConfig, newdata: PanelDataset | None = None,
              resume: bool = False, progress=None) -> PosteriorDraws:
    """Run one chain and return its retained draws.

    Parameters
    ----------
    d : PanelDataset
        Training panel.
    cfg : SamplerConfig
        Schedule and model options.
    newdata : PanelDataset, optional
        Extra rows (e.g. held-out visits) at which mu and tau are evaluated
        for every retained draw.
    resume : bool
        Continue from ``cfg.checkpoint_dir`` if a checkpoint exists there.
        The resumed chain is identical to an uninterrupted one.
    """
    t0 = time.perf_counter()
    pi = resolve_propensity(d, cfg.propensity)
    if cfg.standardize:
        std = StandardizationParams(float(d.y.min()), float(d.y.max()))
    else:
        # identity map: y_min=-0.5, range 1
        std = StandardizationParams(-0.5, 0.5, method="identity")
    ds = d.with_y(std.standardize(d.y))
    Xmu = mu_design(ds, pi)
    Xtau = tau_design(ds, cfg.tau_time)
    w_tau = ds.z ** 2
    Xmu_new = Xtau_new = None
    if newdata is not None:
        pi_new = None
        if pi is not None:
            pi_new = pi[d.first_rows()][newdata.align_subjects(d)]
        Xmu_new = mu_design(newdata, pi_new)
        Xtau_new = tau_design(newdata, cfg.tau_time)

    st = _init_state(ds, cfg, Xmu, Xtau)
    buf = _Buffers(cfg, ds.L, ds.N, 0 if newdata is None else newdata.L)
    traces = [
        ForestTrace.for_ensemble(st.tau_forest, std.scale) if cfg.keep_tau_forests and cfg.tau.m else None,
        ForestTrace.for_ensemble(st.mu_forest, std.scale) if cfg.keep_mu_forests and cfg.mu.m else None,
    ]
    ckpt = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if resume and ckpt is not None and (ckpt / "state.json").exists():
        traces = _load_checkpoint(ckpt, ds, cfg, Xmu, Xtau, buf, st, traces)
        log.info("resumed chain at iteration %d", st.iteration)

    while st.iteration < cfg.max_iter:
        gibbs_step(ds, cfg, st, Xmu, Xtau, w_tau)
        it = st.iteration
        if it % cfg.thin == 0 and it // cfg.thin > cfg.burn_in:
            _record(buf, st, cfg, Xmu_new, Xtau_new, traces)
        if ckpt is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0 \
                and it < cfg.max_iter:
            _save_checkpoint(ckpt, st, buf, traces)
        if progress is not None:
            progress(it)

    assert buf.k == cfg.n_retained
    s, off = std.scale, std.y_min + 0.5 * std.scale
    meta = {
        "config": {k: v for k, v in cfg.to_dict().items()
                   if k not in ("checkpoint_dir", "checkpoint_every")},
        "seed": cfg.seed,
        "data_checksum": data_checksum(d),
        "propensity_used": pi is not None,
        "propensity": None if pi is None else pi[d.first_rows()].tolist(),
        "tau_time": cfg.tau_time,
        "accept_rates": {
            "mu": _rates(st.mu_forest.accept_counts),
            "tau": _rates(st.tau_forest.accept_counts),
        },
        "timings": {"seconds": time.perf_counter() - t0},
    }
    draws = PosteriorDraws(
        mu=buf.mu * s + off, tau=buf.tau * s, alpha=buf.alpha * s, sigma2=buf.sigma2 * s * s,
        subjects=d.subjects, std=std,
        rho=None if buf.rho is None else buf.rho * s,
        lam=buf.lam,
        Sigma_B=None if buf.Sigma_B is None else buf.Sigma_B * s * s,
        mu_new=None if buf.mu_new is None else buf.mu_new * s + off,
        tau_new=None if buf.tau_new is None else buf.tau_new * s,
        tau_trace=traces[0], mu_trace=traces[1], meta=meta,
    )
    draws.check_finite()
    return draws


def _rates(counts) -> dict:
    names = ("grow", "prune", "change", "bandwidth")
    return {n: (float(a / p) if p else None) for n, (p, a) in zip(names, counts.tolist())}


# -- diagnostics ------------------------------------------------------------------

def effective_sample_size(x) -> float:
    """Split-half ESS with Geyer's initial positive sequence truncation.

    Returns NaN for a (numerically) constant series.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4:
        raise ValueError("need at least 4 draws for an ESS estimate")
    h = n // 2
    chains = np.stack([x[:h], x[n - h:]])
    if np.all(chains.std(axis=1) < 1e-12 * max(1.0, np.abs(x).max())):
        return float("nan")
    c = chains - chains.mean(axis=1, keepdims=True)
    f = np.fft.rfft(c, n=2 * h, axis=1)
    acov = np.fft.irfft(f * np.conj(f), axis=1)[:, :h] / h
    W = acov[:, 0].mean() * h / (h - 1)
    B = h * np.var(chains.mean(axis=1), ddof=1)
    var_plus = (h - 1) / h * W + B / h
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum consecutive pairs while positive and monotone
    tau = -1.0
    prev = np.inf
    for k in range(0, h - 1, 2):
        p = rho[k] + rho[k + 1]
        if p <= 0:
            break
        p = min(p, prev)
        tau += 2.0 * p
        prev = p
    return float(2 * h / max(tau, 1.0 / np.log10(2 * h)))


@dataclass
class ChainSummary:
    traces: pd.DataFrame
    running_means: pd.DataFrame
    ess: dict
    degenerate: list
    posterior: dict

    def table(self) -> pd.DataFrame:
        rows = [{"parameter": k, "ess": v, "degenerate": k in self.degenerate}
                for k, v in self.ess.items()]
        return pd.DataFrame(rows)


def summarize_chain(draws: PosteriorDraws, lambda_subjects=(0,)) -> ChainSummary:
    """Traces, running means, ESS and posterior summaries of a chain."""
    D = draws.n_draws
    if D < 2:
        raise ValueError("need at least 2 retained draws")
    series = {"sigma2": draws.sigma2}
    if draws.rho is not None:
        series["rho_intercept"] = draws.rho[:, 0]
        series["rho_slope"] = draws.rho[:, 1]
    if draws.lam is not None:
        for i in lambda_subjects:
            series[f"lambda_{draws.subjects[i]}_intercept"] = draws.lam[:, i, 0]
            series[f"lambda_{draws.subjects[i]}_slope"] = draws.lam[:, i, 1]
    if draws.Sigma_B is not None:
        series["Sigma_B_11"] = draws.Sigma_B[:, 0, 0]
        series["Sigma_B_22"] = draws.Sigma_B[:, 1, 1]
        series["Sigma_B_12"] = draws.Sigma_B[:, 0, 1]
    series["mu_mean"] = draws.mu.mean(axis=1)
    series["tau_mean"] = draws.tau.mean(axis=1)
    traces = pd.DataFrame(series)
    traces.insert(0, "draw", np.arange(D))
    running = traces.drop(columns="draw").expanding().mean()
    running.insert(0, "draw", np.arange(D))
    ess, degenerate = {}, []
    for k, v in series.items():
        e = effective_sample_size(v) if D >= 4 else float("nan")
        ess[k] = e
        if not np.isfinite(e):
            degenerate.append(k)

    def summ(a):
        return {"mean": a.mean(axis=0), "lo95": np.quantile(a, 0.025, axis=0),
                "hi95": np.quantile(a, 0.975, axis=0)}

    posterior = {"mu": summ(draws.mu), "tau": summ(draws.tau), "alpha": summ(draws.alpha)}
    return ChainSummary(traces, running, ess, degenerate, posterior)
