"""Weighted Lasso, CV for lambda, resampled inclusion frequencies, two-stage selection.

Objective solved by ``weighted_lasso``::

    0.5 * |y - X b|^2 + lam * sum_j w_j |b_j|

Callers that want an intercept centre y and standardize X first; the helpers
below (``cv_lambda``, ``vif_resample``, ``two_stage_select``) do that
themselves, always on the rows they fit.
"""
from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import AlignmentError, ContractError, ConvergenceError, DomainError, ShapeError

log = logging.getLogger(__name__)

TOL = 1e-8
MAX_SWEEPS = 10_000
KKT_TOL = 1e-6
VIF_FLOOR = 1e-3


def soft_threshold(z, gamma):
    if np.any(np.asarray(gamma) < 0):
        raise DomainError("threshold must be non-negative")
    return np.sign(z) * np.maximum(np.abs(z) - gamma, 0.0)


def kkt_violation(X, y, beta, lam, w) -> float:
    """Largest violation of the subgradient optimality conditions."""
    g = X.T @ (y - X @ beta)
    pen = lam * np.asarray(w, dtype=np.float64)
    zero = beta == 0
    v_zero = np.maximum(np.abs(g[zero]) - pen[zero], 0.0)
    v_nz = np.abs(g[~zero] - pen[~zero] * np.sign(beta[~zero]))
    return float(max(v_zero.max(initial=0.0), v_nz.max(initial=0.0)))


def _check_weights(w, p):
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size != p:
        raise ShapeError(f"{w.size} weights for {p} columns")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DomainError("penalty weights must be finite and >= 0")
    return w


def _violation(G, c, pen, beta):
    g = c - G @ beta
    nz = beta != 0
    return max(np.max(np.maximum(np.abs(g[~nz]) - pen[~nz], 0.0), initial=0.0),
               np.max(np.abs(g[nz] - pen[nz] * np.sign(beta[nz])), initial=0.0))


def _polish(G, c, pen, beta):
    """Solve the stationarity equations on the current support and signs.

    Returns the candidate if it keeps the sign pattern and satisfies KKT,
    else None.  Used when coordinate descent crawls on ill-conditioned
    problems (more columns than rows, unpenalized columns).
    """
    act = np.flatnonzero(beta)
    if act.size == 0:
        return None
    s = np.sign(beta[act])
    sol, *_ = np.linalg.lstsq(G[np.ix_(act, act)], c[act] - pen[act] * s, rcond=None)
    if np.any(np.sign(sol) != s):
        return None
    cand = np.zeros_like(beta)
    cand[act] = sol
    return cand if _violation(G, c, pen, cand) <= 0.1 * KKT_TOL else None


def _cd_gram(G, c, pen, beta, tol, max_sweeps, backend, chunk=500):
    """Coordinate descent on the Gram form (in place); returns (sweeps, KKT violation, ok).

    The step criterion max |delta| < tol alone leaves a gradient error of
    about G_jj * tol, which can exceed the KKT tolerance for large column
    norms, so the step tolerance is tightened until KKT holds too.  Converged
    runs, and runs that keep moving after ``chunk`` sweeps, get an exact
    active-set polish.
    """
    G = np.ascontiguousarray(G, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    pen = np.ascontiguousarray(pen, dtype=np.float64)
    used = 0
    step_tol = tol
    while used < max_sweeps:
        sweeps, delta = _backend.lasso_cd(G, c, pen, beta, step_tol,
                                          min(chunk, max_sweeps - used), backend)
        used += sweeps
        viol = _violation(G, c, pen, beta)
        if delta < step_tol:
            if viol <= 0.1 * KKT_TOL or step_tol < 1e-15:
                # the step rule leaves errors near tol; finish on the support exactly
                cand = _polish(G, c, pen, beta)
                if cand is not None and _violation(G, c, pen, cand) <= viol:
                    beta[:] = cand
                    viol = _violation(G, c, pen, beta)
                return used, viol, viol <= KKT_TOL
            step_tol *= 1e-2
            continue
        cand = _polish(G, c, pen, beta)
        if cand is not None:
            beta[:] = cand
            return used, _violation(G, c, pen, beta), True
    viol = _violation(G, c, pen, beta)
    return used, viol, viol <= KKT_TOL


def weighted_lasso(X, y, lam, w=None, beta0=None, tol=TOL, max_sweeps=MAX_SWEEPS,
                   backend=None) -> np.ndarray:
    """Cyclic coordinate descent for the weighted Lasso (no intercept)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ShapeError(f"design {X.shape} does not match {y.size} responses")
    if lam < 0:
        raise DomainError("lambda must be >= 0")
    p = X.shape[1]
    w = np.ones(p) if w is None else _check_weights(w, p)
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=np.float64)
    sweeps, viol, ok = _cd_gram(X.T @ X, X.T @ y, lam * w, beta, tol, max_sweeps, backend)
    if not ok:
        raise ConvergenceError(
            f"coordinate descent stopped after {sweeps} sweeps with KKT violation {viol:.3g}",
            kkt_violation=viol)
    return beta


def standardize(X):
    """Column means and sds of X; constant columns get sd 1 so they map to zeros."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mean)), sd, np.inf)
    return (X - mean) / sd, mean, sd


def lambda_max(Z, yc, w) -> float:
    """Smallest lambda with every penalized coefficient at zero.

    Unpenalized columns (w = 0) are fitted first by least squares.
    """
    w = np.asarray(w, dtype=np.float64)
    free = w == 0
    r = yc
    if free.any():
        coef, *_ = np.linalg.lstsq(Z[:, free], yc, rcond=None)
        r = yc - Z[:, free] @ coef
    g = np.abs(Z[:, ~free].T @ r)
    if g.size == 0:
        return 0.0
    return float(np.max(g / w[~free]))


def lambda_grid(lam_max, n=100, ratio=1e-3):
    if lam_max <= 0:
        lam_max = 1.0
    return np.geomspace(lam_max, ratio * lam_max, n)


def _fit_rows(X, y, rows, lam, w, beta0=None, backend=None):
    Z, mean, sd = standardize(X[rows])
    ybar = y[rows].mean()
    beta = weighted_lasso(Z, y[rows] - ybar, lam, w, beta0=beta0, backend=backend)
    return beta, mean, sd, ybar


@dataclass
class CvCurve:
    lambdas: np.ndarray
    mse: np.ndarray  # (folds, n_lambda)
    best: float

    @property
    def mean_mse(self):
        return self.mse.mean(axis=0)


def cv_lambda(X, y, w, folds=6, seed=0, n_lambda=100, ratio=1e-3, backend=None,
              return_curve=False):
    """Choose lambda by k-fold CV on held-out MSE over a log grid from lambda_max.

    The grid is defined on the full data.  Fold fits see fewer rows, and the
    objective is a sum over rows, so each fold uses lambda * n_train / n.
    Ties go to the larger lambda.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n, p = X.shape
    if folds < 2 or n < folds:
        raise ContractError(f"need folds >= 2 and n >= folds (n={n}, folds={folds})")
    if y.size != n:
        raise ShapeError("X and y row counts differ")
    w = _check_weights(w, p)
    Z, _, _ = standardize(X)
    lams = lambda_grid(lambda_max(Z, y - y.mean(), w), n_lambda, ratio)
    perm = np.random.default_rng(seed).permutation(n)
    mse = np.empty((folds, lams.size))
    for k, test in enumerate(np.array_split(perm, folds)):
        test = np.sort(test)
        train = np.setdiff1d(np.arange(n), test)
        scale = train.size / n
        beta = np.zeros(p)
        for i, lam in enumerate(lams):
            beta, mean, sd, ybar = _fit_rows(X, y, train, lam * scale, w, beta, backend)
            pred = ((X[test] - mean) / sd) @ beta + ybar
            mse[k, i] = np.mean((y[test] - pred) ** 2)
    avg = mse.mean(axis=0)
    best = float(lams[int(np.argmin(avg))])
    if return_curve:
        return best, CvCurve(lams, mse, best)
    return best


def vif_resample(X, y, w, lam, m=0.8, R=1000, seed=0, backend=None, return_coefs=False):
    """Inclusion frequency of each column over R subsamples of floor(m*n) rows.

    Columns are standardized on each subsample; lambda is scaled by k / n
    as in ``cv_lambda``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n, p = X.shape
    if not 0 < m <= 1 or R < 1:
        raise ContractError("need 0 < m <= 1 and R >= 1")
    w = _check_weights(w, p)
    k = int(np.floor(m * n))
    if k < 2:
        raise ContractError("subsample has fewer than 2 rows")
    rng = np.random.default_rng(seed)
    coefs = np.empty((R, p))
    for r in range(R):
        rows = np.sort(rng.choice(n, size=k, replace=False))
        coefs[r], *_ = _fit_rows(X, y, rows, lam * k / n, w, None, backend)
    vif = (coefs != 0).mean(axis=0)
    return (vif, coefs) if return_coefs else vif


def stage2_weights(vif_b0, n_b1, floor=VIF_FLOOR) -> np.ndarray:
    """-log(VIF) for the B0 block (floored), 1 for the B1 block."""
    vif_b0 = np.asarray(vif_b0, dtype=np.float64).ravel()
    if np.any(vif_b0 < 0) or np.any(vif_b0 > 1) or not np.all(np.isfinite(vif_b0)):
        raise DomainError("VIF values must lie in [0, 1]")
    w0 = -np.log(np.maximum(vif_b0, floor)) + 0.0  # + 0.0 turns -0.0 into 0.0
    return np.concatenate([w0, np.ones(int(n_b1))])


@dataclass
class SelectionReport:
    stage: str
    columns: list
    tags: list
    vif: np.ndarray
    weights: np.ndarray
    coef: np.ndarray  # full-data fit at lam, standardized scale
    lam: float
    n_resamples: int
    folds: int
    m: float
    seed: int
    respondents: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.columns) == len(self.tags) == self.vif.size == self.weights.size
                == self.coef.size):
            raise ShapeError("report fields must have one entry per column")

    @property
    def n_rows(self):
        return len(self.respondents)

    def rows(self):
        return [(c, t, float(v), float(wt), float(b)) for c, t, v, wt, b in
                zip(self.columns, self.tags, self.vif, self.weights, self.coef)]

    def vif_of(self, column):
        return float(self.vif[self.columns.index(column)])


def select(X, y, w, columns, tags, stage, folds=6, m=0.8, R=1000, seed=0,
           respondents=(), backend=None) -> SelectionReport:
    """CV once for lambda, then resample at that lambda; also refit on all rows."""
    ss = np.random.SeedSequence(seed)
    cv_seed, vif_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    lam = cv_lambda(X, y, w, folds=folds, seed=cv_seed, backend=backend)
    vif = vif_resample(X, y, w, lam, m=m, R=R, seed=vif_seed, backend=backend)
    coef, *_ = _fit_rows(np.asarray(X, float), np.asarray(y, float),
                         np.arange(len(y)), lam, w, None, backend)
    log.info("%s: lambda %.4g, %d columns with VIF >= 0.5", stage, lam, int((vif >= 0.5).sum()))
    return SelectionReport(stage, list(columns), list(tags), vif, np.asarray(w, float), coef,
                           lam, R, folds, m, seed, list(respondents))


def _rows(source, ids, what):
    if isinstance(source, Mapping):
        missing = [i for i in ids if i not in source]
        if missing:
            raise AlignmentError(f"{what} missing for respondents {missing[:5]}")
        return np.array([np.asarray(source[i], dtype=np.float64) for i in ids])
    arr = np.asarray(source, dtype=np.float64)
    if arr.shape[0] != len(ids):
        raise AlignmentError(f"{what} has {arr.shape[0]} rows, expected {len(ids)}")
    return arr


def _ids(source):
    if isinstance(source, Mapping):
        return sorted(source)
    return list(range(np.asarray(source).shape[0]))


def construct_names(n, prefix):
    return [f"{prefix}:c{j:02d}" for j in range(n)]


def two_stage_select(b0, b1, y_sp1, y_sp2, autoregressive=False, seed=0, folds=6, m=0.8,
                     R=1000, names=None, backend=None):
    """Stage 1 on B0 for sp1 targets, stage 2 on stacked [B0 | B1] for sp2 targets.

    Batteries and targets are either mappings keyed by respondent id or
    arrays with aligned rows.  Stage 1 uses every respondent with B0, stage 2
    every respondent with B1 (who must also have B0).  With
    ``autoregressive`` the sp1 target enters stage 2 as an extra column with
    weight 1.
    """
    ids1 = _ids(b0)
    X0 = _rows(b0, ids1, "B0")
    y1 = _rows(y_sp1, ids1, "sp1 target").ravel()
    if X0.ndim != 2:
        raise ShapeError("B0 must be a matrix")
    v = X0.shape[1]
    names = list(names) if names is not None else [f"c{j:02d}" for j in range(v)]
    if len(names) != v:
        raise ShapeError("one name per construct required")
    ss = np.random.SeedSequence(seed)
    s1, s2 = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    rep1 = select(X0, y1, np.ones(v), [f"B0:{c}" for c in names], ["B0"] * v, "sp1",
                  folds, m, R, s1, ids1, backend)

    ids2 = _ids(b1)
    if isinstance(b0, Mapping) != isinstance(b1, Mapping):
        raise AlignmentError("batteries must both be mappings or both be arrays")
    X0b = _rows(b0, ids2, "B0") if isinstance(b0, Mapping) else X0[: len(ids2)]
    if not isinstance(b0, Mapping) and X0.shape[0] != len(ids2):
        raise AlignmentError("array batteries must have the same rows")
    X1 = _rows(b1, ids2, "B1")
    if X1.shape[1] != v:
        raise ShapeError("B0 and B1 must have the same constructs")
    y2 = _rows(y_sp2, ids2, "sp2 target").ravel()
    X = np.hstack([X0b, X1])
    w = stage2_weights(rep1.vif, v)
    cols = [f"B0:{c}" for c in names] + [f"B1:{c}" for c in names]
    tags = ["B0"] * v + ["B1"] * v
    stage = "sp2"
    if autoregressive:
        ar = _rows(y_sp1, ids2, "sp1 target").reshape(-1, 1)
        X = np.hstack([X, ar])
        w = np.append(w, 1.0)
        cols.append("ar:eta2_sp1")
        tags.append("AR")
        stage = "sp2-ar"
    rep2 = select(X, y2, w, cols, tags, stage, folds, m, R, s2, ids2, backend)
    return rep1, rep2
