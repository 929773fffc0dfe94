"""Long-format longitudinal panels: loading, validation, partitioning, scaling."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

PI_CLAMP = (0.01, 0.99)


class PanelDataError(ValueError):
    """Raised when a panel violates its structural invariants."""


@dataclass(frozen=True)
class PanelDataset:
    """One row per visit, sorted by (subject, time).

    ``z`` is coded -0.5 (control) / +0.5 (treated).  ``K`` holds per-visit
    prognostic covariates, ``W`` baseline moderators repeated on each of a
    subject's rows.
    """

    subject_id: np.ndarray
    t: np.ndarray
    y: np.ndarray
    z: np.ndarray
    K: np.ndarray
    W: np.ndarray
    pi: np.ndarray | None = None
    K_names: tuple = ()
    W_names: tuple = ()
    subjects: np.ndarray = field(init=False, repr=False)
    subject_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sid = np.asarray(self.subject_id)
        subjects, idx = np.unique(sid, return_inverse=True)
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "subject_index", idx.astype(np.int64))
        _validate(self)

    @property
    def L(self) -> int:
        return len(self.y)

    @property
    def N(self) -> int:
        return len(self.subjects)

    @property
    def n_i(self) -> np.ndarray:
        return np.bincount(self.subject_index, minlength=self.N)

    @property
    def T(self) -> np.ndarray:
        """Random-effect design rows (1, t)."""
        return np.column_stack([np.ones(self.L), self.t])

    def first_rows(self) -> np.ndarray:
        """Row index of each subject's first visit."""
        _, first = np.unique(self.subject_index, return_index=True)
        return first

    def last_rows(self) -> np.ndarray:
        rev = self.subject_index[::-1]
        _, first_rev = np.unique(rev, return_index=True)
        return self.L - 1 - first_rev

    def subject_z(self) -> np.ndarray:
        return self.z[self.first_rows()]

    def subject_W(self) -> np.ndarray:
        return self.W[self.first_rows()]

    def with_y(self, y) -> "PanelDataset":
        return replace(self, y=np.asarray(y, dtype=float))

    def with_pi(self, pi_subject) -> "PanelDataset":
        """Attach per-subject propensities (broadcast to rows)."""
        pi_subject = np.asarray(pi_subject, dtype=float)
        return replace(self, pi=pi_subject[self.subject_index])

    def subset(self, rows) -> "PanelDataset":
        rows = np.sort(np.asarray(rows, dtype=np.int64))
        return PanelDataset(
            subject_id=self.subject_id[rows], t=self.t[rows], y=self.y[rows], z=self.z[rows],
            K=self.K[rows], W=self.W[rows], pi=None if self.pi is None else self.pi[rows],
            K_names=self.K_names, W_names=self.W_names,
        )

    def align_subjects(self, other: "PanelDataset") -> np.ndarray:
        """Map this panel's rows to subject positions in ``other``."""
        pos = np.searchsorted(other.subjects, self.subject_id)
        pos = np.clip(pos, 0, len(other.subjects) - 1)
        if not np.all(other.subjects[pos] == self.subject_id):
            raise PanelDataError("rows refer to subjects absent from the reference panel")
        return pos

    def to_frame(self) -> pd.DataFrame:
        cols = {"subject": self.subject_id, "time": self.t, "outcome": self.y, "treatment": self.z}
        for j, name in enumerate(self.K_names or [f"K{j}" for j in range(self.K.shape[1])]):
            cols[name] = self.K[:, j]
        for j, name in enumerate(self.W_names or [f"W{j}" for j in range(self.W.shape[1])]):
            cols[name] = self.W[:, j]
        if self.pi is not None:
            cols["propensity"] = self.pi
        return pd.DataFrame(cols)


def _validate(d: PanelDataset):
    L = len(d.y)
    for name in ("t", "z"):
        if len(getattr(d, name)) != L:
            raise PanelDataError(f"column {name} has wrong length")
    if d.K.ndim != 2 or d.K.shape[0] != L or d.W.ndim != 2 or d.W.shape[0] != L:
        raise PanelDataError("K and W must be 2-D with one row per observation")
    arrays = [d.t, d.y, d.z, d.K, d.W] + ([d.pi] if d.pi is not None else [])
    if any(not np.all(np.isfinite(a)) for a in arrays):
        raise PanelDataError("missing or non-finite value in a used column")
    if np.any(d.t < 0):
        raise PanelDataError("negative time")
    if not np.all(np.isin(d.z, (-0.5, 0.5))):
        raise PanelDataError("treatment must be coded -0.5/+0.5")
    order = np.lexsort((d.t, d.subject_index))
    if not np.array_equal(order, np.arange(L)):
        raise PanelDataError("rows must be sorted by (subject, time)")
    first = d.first_rows()
    if np.any(d.z != d.z[first][d.subject_index]):
        raise PanelDataError("treatment varies within subject")
    if d.W.shape[1] and np.any(d.W != d.W[first][d.subject_index]):
        raise PanelDataError("W varies within subject")
    if d.pi is not None and np.any(d.pi != d.pi[first][d.subject_index]):
        raise PanelDataError("propensity varies within subject")


def _expand(cols, spec):
    if spec is None:
        return []
    if isinstance(spec, str):
        spec = [spec]
    out = []
    for s in spec:
        if s.endswith("*"):
            out.extend(c for c in cols if c.startswith(s[:-1]))
        else:
            out.append(s)
    return out


DEFAULT_SCHEMA = {
    "subject": "subject",
    "time": "time",
    "outcome": "outcome",
    "treatment": "treatment",
    "K": ["K*"],
    "W": ["W*"],
    "propensity": None,
}


def recode_treatment(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    codes = set(np.unique(z).tolist())
    if codes <= {0.0, 1.0}:
        return z - 0.5
    if codes <= {-0.5, 0.5}:
        return z
    raise PanelDataError(f"treatment codes {sorted(codes)} not in {{0,1}} or {{-0.5,0.5}}")


def from_frame(df: pd.DataFrame, schema: dict | None = None) -> PanelDataset:
    """Build a validated panel from a data frame and a column-role map."""
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    cols = list(df.columns)
    k_cols = _expand(cols, schema.get("K"))
    w_cols = _expand(cols, schema.get("W"))
    required = [schema["subject"], schema["time"], schema["outcome"], schema["treatment"]]
    pi_col = schema.get("propensity")
    if pi_col is None and "propensity" in df.columns:
        pi_col = "propensity"
    for c in required + k_cols + w_cols + ([pi_col] if pi_col else []):
        if c not in df.columns:
            raise PanelDataError(f"missing column {c!r}")
    used = required + k_cols + w_cols + ([pi_col] if pi_col else [])
    if df[used].isna().any().any():
        bad = df[used].columns[df[used].isna().any()].tolist()
        raise PanelDataError(f"missing value in column(s) {bad}")
    df = df.sort_values([schema["subject"], schema["time"]], kind="mergesort").reset_index(drop=True)
    t = df[schema["time"]].to_numpy(dtype=float)
    if np.any(t < 0):
        raise PanelDataError("negative time")
    z = recode_treatment(df[schema["treatment"]].to_numpy())
    return PanelDataset(
        subject_id=df[schema["subject"]].to_numpy(),
        t=t,
        y=df[schema["outcome"]].to_numpy(dtype=float),
        z=z,
        K=df[k_cols].to_numpy(dtype=float).reshape(len(df), len(k_cols)),
        W=df[w_cols].to_numpy(dtype=float).reshape(len(df), len(w_cols)),
        pi=df[pi_col].to_numpy(dtype=float) if pi_col else None,
        K_names=tuple(k_cols),
        W_names=tuple(w_cols),
    )


def load_panel(path, schema: dict | None = None) -> PanelDataset:
    """Read a long-format CSV (UTF-8, header row) into a validated panel."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    df = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    return from_frame(df, schema)


def save_panel(d: PanelDataset, path):
    d.to_frame().to_csv(path, index=False, float_format="%.17g")


@dataclass(frozen=True)
class HoldoutPartition:
    fit_rows: np.ndarray
    heldout_rows: np.ndarray
    heldout_subjects: np.ndarray


def partition_holdout(d: PanelDataset, x: int, seed: int) -> HoldoutPartition:
    """Hold out one random visit from each of ``x`` random multi-visit subjects."""
    eligible = np.flatnonzero(d.n_i >= 2)
    if x > len(eligible):
        raise PanelDataError(f"cannot hold out {x} subjects; only {len(eligible)} have >= 2 visits")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(eligible, size=x, replace=False)) if x else np.zeros(0, np.int64)
    starts = np.concatenate([[0], np.cumsum(d.n_i)[:-1]])
    held = np.array([starts[s] + rng.integers(d.n_i[s]) for s in chosen], dtype=np.int64)
    mask = np.ones(d.L, bool)
    mask[held] = False
    return HoldoutPartition(
        fit_rows=np.flatnonzero(mask),
        heldout_rows=np.sort(held),
        heldout_subjects=d.subjects[chosen],
    )


@dataclass(frozen=True)
class StandardizationParams:
    """Affine map of the outcome range onto [-0.5, 0.5]."""

    y_min: float
    y_max: float
    method: str = "range"

    def __post_init__(self):
        if not self.y_max > self.y_min:
            raise PanelDataError("outcome has zero range")

    @property
    def scale(self) -> float:
        return self.y_max - self.y_min

    def standardize(self, y):
        return (np.asarray(y, dtype=float) - self.y_min) / self.scale - 0.5

    def unstandardize(self, ys):
        return (np.asarray(ys, dtype=float) + 0.5) * self.scale + self.y_min


def standardize_outcome(d: PanelDataset) -> tuple[PanelDataset, StandardizationParams]:
    params = StandardizationParams(float(np.min(d.y)), float(np.max(d.y)))
    return d.with_y(params.standardize(d.y)), params


def _irls(X, yb, max_iter=100, tol=1e-8):
    beta = np.zeros(X.shape[1])
    dev_old = np.inf
    for it in range(max_iter):
        eta = np.clip(X @ beta, -700, 700)
        p = 1.0 / (1.0 + np.exp(-eta))
        wts = np.maximum(p * (1 - p), 1e-12)
        H = X.T @ (wts[:, None] * X) + 1e-10 * np.eye(X.shape[1])
        beta = beta + np.linalg.solve(H, X.T @ (yb - p))
        eta = np.clip(X @ beta, -700, 700)
        p = np.clip(1.0 / (1.0 + np.exp(-eta)), 1e-300, 1 - 1e-16)
        dev = -2 * np.sum(yb * np.log(p) + (1 - yb) * np.log1p(-p))
        if abs(dev_old - dev) < tol * (1 + abs(dev)):
            return p, True
        dev_old = dev
    return p, False


def estimate_propensity(d: PanelDataset, mode: str = "constant") -> np.ndarray:
    """Per-subject propensity of treatment, clamped to [0.01, 0.99]."""
    treated = (d.subject_z() > 0).astype(float)
    lo, hi = PI_CLAMP
    if mode == "supplied":
        if d.pi is None:
            raise PanelDataError("mode=supplied but the panel has no propensity column")
        pi = d.pi[d.first_rows()]
        if np.any((pi <= 0) | (pi >= 1)):
            raise PanelDataError("supplied propensity outside (0, 1)")
        return np.clip(pi, lo, hi)
    if mode == "constant":
        return np.clip(np.full(d.N, treated.mean()), lo, hi)
    if mode == "logistic":
        W = d.subject_W()
        if W.shape[1] == 0:
            raise PanelDataError("logistic propensity needs W columns")
        sd = W.std(axis=0)
        Ws = (W - W.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
        X = np.column_stack([np.ones(d.N), Ws])
        pi, ok = _irls(X, treated)
        if not ok:
            log.warning("logistic propensity did not converge in 100 iterations; using constant")
            warnings.warn("logistic propensity fit did not converge; falling back to constant",
                          RuntimeWarning, stacklevel=2)
            return estimate_propensity(d, "constant")
        if np.any((pi < lo) | (pi > hi)):
            warnings.warn("propensity outside [0.01, 0.99] clamped (possible separation)",
                          RuntimeWarning, stacklevel=2)
        return np.clip(pi, lo, hi)
    raise ValueError(f"unknown propensity mode {mode!r}")
