"""OLS with one or two absorbed fixed-effect factors and CZ-clustered inference.

Absorption uses alternating projections: each sweep subtracts within-group means
for every absorbed factor in turn, until the largest within-group mean of any
working column is below ``tol`` times that column's scale (root mean square of
the raw column). Coefficients then come from OLS on the demeaned columns, which
equals the dummy-variable solution.

With two factors the effects are pinned down only up to one constant per
connected component of the bipartite level graph. Within each component the
observation-weighted mean of the second factor's effects is set to zero and the
level loads onto the first factor.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from numba import njit
from scipy import sparse
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .errors import ConvergenceError, DataError, EstimationError, RankDeficiencyError

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000
COLLINEAR_RTOL = 1e-8
NORMALIZATION = "per connected component, observation-weighted mean of the last absorbed factor's effects is 0"


@dataclass(frozen=True)
class RegressionSpec:
    response: str
    covariates: tuple[str, ...] = ()
    absorb: tuple[str, ...] = ()
    cluster: str | None = "cz_id"
    sample_filter: str = "all"

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "absorb", tuple(self.absorb))
        if self.response in self.covariates:
            raise ValueError(f"response {self.response!r} is also a covariate")
        if len(set(self.absorb)) != len(self.absorb):
            raise ValueError("absorbed factors must be distinct")
        if len(self.absorb) > 2:
            raise ValueError("at most two absorbed factors are supported")


@dataclass
class EstimationResult:
    names: list[str]
    beta: np.ndarray
    vcov: np.ndarray
    r2: float
    n_obs: int
    n_clusters: int
    dof_k: int
    fe_values: dict[str, pd.DataFrame] = field(default_factory=dict)
    n_iterations: int = 0
    n_singletons: int = 0
    n_components: int = 0
    dropped: list[str] = field(default_factory=list)
    residuals: np.ndarray | None = field(default=None, repr=False)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def stderr(self, name: str) -> float:
        return float(self.se[self.names.index(name)])

    def coef_table(self) -> pd.DataFrame:
        return pd.DataFrame({"term": self.names, "estimate": self.beta, "se_clustered": self.se})


# --------------------------------------------------------------------------- demeaning kernels


@njit(cache=True)
def _group_means(M, codes, inv_n, out):
    out[:, :] = 0.0
    n, p = M.shape
    for i in range(n):
        g = codes[i]
        for c in range(p):
            out[g, c] += M[i, c]
    for g in range(out.shape[0]):
        for c in range(p):
            out[g, c] *= inv_n[g]


@njit(cache=True)
def _subtract_means(M, codes, means):
    n, p = M.shape
    for i in range(n):
        g = codes[i]
        for c in range(p):
            M[i, c] -= means[g, c]


@njit(cache=True)
def _max_rel(means, scale):
    worst = 0.0
    for g in range(means.shape[0]):
        for c in range(means.shape[1]):
            v = abs(means[g, c]) / scale[c]
            if v > worst:
                worst = v
    return worst


@dataclass
class _Factor:
    name: str
    codes: np.ndarray
    labels: np.ndarray
    counts: np.ndarray

    @property
    def n_levels(self) -> int:
        return self.labels.size


def _factorize(values: np.ndarray, name: str) -> _Factor:
    codes, labels = pd.factorize(values, sort=True)
    if (codes < 0).any():
        raise DataError(f"absorbed factor {name!r} has missing values")
    codes = codes.astype(np.int64)
    return _Factor(name, codes, np.asarray(labels), np.bincount(codes, minlength=labels.size))


DIRECT_MAX_LEVELS = 3000


def _direct_projection(W: np.ndarray, a: _Factor, b: _Factor) -> None:
    """Remove the two-factor dummy projection from every column of ``W`` in place.

    Solves the normal equations exactly by eliminating ``b`` (Schur complement on
    the levels of ``a``, which must be the small factor). The complement is
    singular with one null direction per connected component; the eigen-based
    pseudo-inverse picks one solution and the projection does not depend on it.
    """
    nb = b.counts.astype(float)
    N = sparse.csr_matrix((np.ones(a.codes.size), (a.codes, b.codes)), shape=(a.n_levels, b.n_levels))
    NB = N @ sparse.diags(1.0 / nb)
    S = np.diag(a.counts.astype(float)) - (NB @ N.T).toarray()
    S = (S + S.T) / 2
    evals, evecs = np.linalg.eigh(S)
    keep = evals > evals.max() * 1e-13
    sums_a = np.column_stack([np.bincount(a.codes, weights=W[:, c], minlength=a.n_levels) for c in range(W.shape[1])])
    sums_b = np.column_stack([np.bincount(b.codes, weights=W[:, c], minlength=b.n_levels) for c in range(W.shape[1])])
    rhs = sums_a - NB @ sums_b
    V = evecs[:, keep]
    ea = V @ ((V.T @ rhs) / evals[keep][:, None])
    eb = (sums_b - N.T @ ea) / nb[:, None]
    W -= ea[a.codes] + eb[b.codes]


def demean(
    M: np.ndarray,
    factors: Sequence[_Factor],
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    method: str = "auto",
) -> tuple[np.ndarray, int]:
    """Return the within-transformed copy of ``M`` and the number of sweeps used.

    Two factors use alternating projections (``method="map"``) or, when one
    factor has at most ``DIRECT_MAX_LEVELS`` levels, an exact elimination
    (``"direct"``) repeated until the same tolerance check passes. ``"auto"``
    picks direct when possible.
    """
    W = np.ascontiguousarray(M, dtype=np.float64).copy()
    if not factors:
        return W, 0
    scale = np.sqrt(np.mean(W * W, axis=0))
    scale[scale == 0] = 1.0
    bufs = [np.empty((f.n_levels, W.shape[1])) for f in factors]
    inv = [1.0 / f.counts for f in factors]
    if len(factors) == 1:
        f = factors[0]
        _group_means(W, f.codes, inv[0], bufs[0])
        _subtract_means(W, f.codes, bufs[0])
        return W, 1

    def worst():
        out = 0.0
        for f, buf, iv in zip(factors, bufs, inv):
            _group_means(W, f.codes, iv, buf)
            out = max(out, _max_rel(buf, scale))
        return out

    small = min(factors, key=lambda f: f.n_levels)
    if method not in ("auto", "map", "direct"):
        raise ValueError(f"unknown demeaning method {method!r}")
    if method == "direct" or (method == "auto" and small.n_levels <= DIRECT_MAX_LEVELS):
        other = factors[1] if small is factors[0] else factors[0]
        for it in range(1, 6):
            _direct_projection(W, small, other)
            if worst() <= tol:
                return W, it
        raise ConvergenceError(f"direct two-factor projection left relative group means of {worst():.3e}")

    a, b = factors
    for it in range(1, max_iter + 1):
        _group_means(W, a.codes, inv[0], bufs[0])
        if it > 1 and _max_rel(bufs[0], scale) <= tol:
            return W, it - 1
        _subtract_means(W, a.codes, bufs[0])
        _group_means(W, b.codes, inv[1], bufs[1])
        _subtract_means(W, b.codes, bufs[1])
    w = worst()
    if w <= tol:
        return W, max_iter
    raise ConvergenceError(f"demeaning did not converge in {max_iter} sweeps (max relative group mean {w:.3e} > {tol:g})")


# --------------------------------------------------------------------------- inference


def clustered_vcov(
    X: np.ndarray,
    resid: np.ndarray,
    clusters: np.ndarray | None,
    k: int | None = None,
    bread: np.ndarray | None = None,
) -> np.ndarray:
    """Cluster-robust sandwich with the CR1 factor G/(G-1) * (n-1)/(n-k).

    ``clusters=None`` treats every observation as its own cluster (HC1). ``k``
    defaults to the number of columns of ``X``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    k = p if k is None else k
    if clusters is None:
        codes = np.arange(n)
        G = n
    else:
        codes, uniq = pd.factorize(np.asarray(clusters), sort=True)
        G = uniq.size
    if G < 2:
        raise EstimationError("clustered standard errors need at least 2 clusters")
    if n <= k:
        raise EstimationError(f"no residual degrees of freedom (n={n}, k={k})")
    if bread is None:
        bread = np.linalg.inv(X.T @ X)
    scores = X * np.asarray(resid, dtype=float)[:, None]
    S = np.column_stack([np.bincount(codes, weights=scores[:, c], minlength=G) for c in range(p)]).reshape(G, p)
    meat = S.T @ S
    V = bread @ meat @ bread
    V = (V + V.T) / 2
    return V * (G / (G - 1)) * ((n - 1) / (n - k))


def dense_ols_oracle(y: np.ndarray, X: np.ndarray, rtol: float = 1e-10) -> tuple[np.ndarray, np.ndarray, float]:
    """Textbook OLS through a column-pivoted QR; raises on a singular design."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rtol * d[0])) if d.size else 0
    if rank < X.shape[1]:
        raise EstimationError(f"singular design: rank {rank} < {X.shape[1]} columns")
    z = scipy.linalg.solve_triangular(R, Q.T @ y)
    beta = np.empty_like(z)
    beta[piv] = z
    resid = y - X @ beta
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 0.0
    return beta, resid, r2


def dummy_matrix(values, drop_first: bool = False) -> np.ndarray:
    codes, labels = pd.factorize(np.asarray(values), sort=True)
    D = np.zeros((codes.size, labels.size))
    D[np.arange(codes.size), codes] = 1.0
    return D[:, 1:] if drop_first else D


# --------------------------------------------------------------------------- FE recovery


def _components(a: _Factor, b: _Factor) -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
    """Connected components of the bipartite level graph; returns cell pairs too."""
    na, nb = a.n_levels, b.n_levels
    pair = a.codes * nb + b.codes
    cells = np.unique(pair)
    ca, cb = cells // nb, cells % nb
    ntot = na + nb
    adj = sparse.coo_matrix((np.ones(cells.size), (ca, na + cb)), shape=(ntot, ntot)).tocsr()
    adj = adj + adj.T
    n_comp, labels = connected_components(adj, directed=False)
    return n_comp, labels, cells, adj


def recover_fixed_effects(
    f: np.ndarray,
    resid: np.ndarray,
    factors: Sequence[_Factor],
) -> tuple[dict[str, pd.DataFrame], int]:
    """Recover absorbed effects from ``f = y - X beta`` and the within residuals.

    ``f - resid`` is the fixed-effect part of the fit. One factor: group means of
    ``f``. Two factors: effects are read off a spanning tree of each connected
    component (cell means of the FE part), then normalized.
    """
    if len(factors) == 1:
        fa = factors[0]
        est = np.bincount(fa.codes, weights=f, minlength=fa.n_levels) / fa.counts
        return {fa.name: _fe_frame(fa, est, np.zeros(fa.n_levels, dtype=np.int64))}, 0

    a, b = factors
    na, nb = a.n_levels, b.n_levels
    n_comp, labels, cells, adj = _components(a, b)
    fitted = f - resid
    pair = a.codes * nb + b.codes
    cell_idx = np.searchsorted(cells, pair)
    cell_val = np.bincount(cell_idx, weights=fitted, minlength=cells.size) / np.bincount(cell_idx, minlength=cells.size)

    value = np.zeros(na + nb)
    seen = np.zeros(na + nb, dtype=bool)
    for comp in range(n_comp):
        root = int(np.flatnonzero(labels == comp)[0])
        order, pred = breadth_first_order(adj, root, directed=False, return_predecessors=True)
        value[root] = 0.0
        seen[root] = True
        nodes = order[1:]
        parents = pred[nodes]
        is_a = nodes < na
        ia = np.where(is_a, nodes, parents)
        ib = np.where(is_a, parents, nodes) - na
        edge = np.searchsorted(cells, ia * nb + ib)
        ev = cell_val[edge]
        for node, parent, v in zip(nodes.tolist(), parents.tolist(), ev.tolist()):
            value[node] = v - value[parent]
            seen[node] = True
    assert seen.all()

    ea, eb = value[:na].copy(), value[na:].copy()
    comp_a, comp_b = labels[:na], labels[na:]
    # normalize: employment-weighted mean of b effects within each component is zero
    wsum = np.bincount(comp_b, weights=eb * b.counts, minlength=n_comp)
    wcnt = np.bincount(comp_b, weights=b.counts.astype(float), minlength=n_comp)
    shift = wsum / wcnt
    eb -= shift[comp_b]
    ea += shift[comp_a]
    return {a.name: _fe_frame(a, ea, comp_a), b.name: _fe_frame(b, eb, comp_b)}, n_comp


def _fe_frame(fac: _Factor, est: np.ndarray, comp: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(
        {"level": fac.labels, "estimate": est, "component": comp.astype(np.int64), "n_obs": fac.counts}
    )


# --------------------------------------------------------------------------- estimation


def _check_rank(Xd: np.ndarray, Xraw: np.ndarray, names: list[str]) -> list[int]:
    """Indices of columns that add rank after demeaning, in order; others are collinear."""
    kept: list[int] = []
    Q = np.zeros((Xd.shape[0], 0))
    for k in range(Xd.shape[1]):
        col = Xd[:, k]
        raw_scale = np.linalg.norm(Xraw[:, k] - Xraw[:, k].mean()) + np.linalg.norm(Xraw[:, k]) * 1e-3
        r = col - Q @ (Q.T @ col) if kept else col
        nr = np.linalg.norm(r)
        if raw_scale == 0 or nr <= COLLINEAR_RTOL * raw_scale:
            continue
        kept.append(k)
        Q = np.column_stack([Q, r / nr])
    return kept


def absorb_and_estimate(
    data: pd.DataFrame,
    spec: RegressionSpec,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    drop_collinear: bool = False,
    recover_fe: bool = True,
    keep_residuals: bool = False,
    method: str = "auto",
) -> EstimationResult:
    """Estimate ``spec`` on ``data``.

    Without absorbed factors an intercept is added. Collinear covariates raise
    ``RankDeficiencyError`` unless ``drop_collinear`` is set, in which case they are
    dropped with a warning and listed in ``result.dropped``.
    """
    cols = [spec.response, *spec.covariates, *spec.absorb] + ([spec.cluster] if spec.cluster else [])
    missing = [c for c in dict.fromkeys(cols) if c not in data.columns]
    if missing:
        raise DataError(f"missing column(s) {missing}")
    n = len(data)
    if n == 0:
        raise EstimationError("empty estimation sample")

    y = data[spec.response].to_numpy(dtype=float)
    names = list(spec.covariates)
    X = np.column_stack([data[c].to_numpy(dtype=float) for c in names]) if names else np.zeros((n, 0))
    if not spec.absorb:
        X = np.column_stack([np.ones(n), X])
        names = ["intercept", *names]
    if not (np.isfinite(y).all() and np.isfinite(X).all()):
        raise DataError("non-finite values in response or covariates")

    factors = [_factorize(data[c].to_numpy(), c) for c in spec.absorb]
    for fac in factors:
        if fac.n_levels < 2:
            raise EstimationError(f"absorbed factor {fac.name!r} has fewer than 2 levels")
    singleton = np.zeros(n, dtype=bool)
    for fac in factors:
        singleton |= fac.counts[fac.codes] == 1

    W, n_iter = demean(np.column_stack([y, X]), factors, tol=tol, max_iter=max_iter, method=method)
    yd, Xd = W[:, 0], W[:, 1:]

    kept = _check_rank(Xd, X, names) if names else []
    dropped = [names[k] for k in range(len(names)) if k not in kept]
    if dropped:
        if not drop_collinear:
            raise RankDeficiencyError(dropped[0])
        warnings.warn(f"dropping collinear column(s) {dropped}", stacklevel=2)
        Xd, X = Xd[:, kept], X[:, kept]
        names = [names[k] for k in kept]

    if names:
        XtX = Xd.T @ Xd
        bread = np.linalg.inv(XtX)
        beta = bread @ (Xd.T @ yd)
        resid = yd - Xd @ beta
    else:
        bread = np.zeros((0, 0))
        beta = np.zeros(0)
        resid = yd.copy()

    n_comp = 0
    fe_values: dict[str, pd.DataFrame] = {}
    if factors:
        if len(factors) == 2:
            n_comp = _components(*factors)[0]
        if recover_fe:
            fe_values, n_comp = recover_fixed_effects(y - X @ beta, resid, factors)
    k = len(names) + sum(f.n_levels for f in factors) - (n_comp if len(factors) == 2 else 0)

    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 0.0
    r2 = min(max(r2, 0.0), 1.0)

    if spec.cluster:
        cl = data[spec.cluster].to_numpy()
        n_clusters = int(pd.unique(cl).size)
    else:
        cl, n_clusters = None, n
    if names:
        vcov = clustered_vcov(Xd, resid, cl, k=k, bread=bread)
    else:
        if n_clusters < 2:
            raise EstimationError("clustered standard errors need at least 2 clusters")
        vcov = np.zeros((0, 0))

    return EstimationResult(
        names=names,
        beta=beta,
        vcov=vcov,
        r2=r2,
        n_obs=n,
        n_clusters=n_clusters,
        dof_k=k,
        fe_values=fe_values,
        n_iterations=n_iter,
        n_singletons=int(singleton.sum()),
        n_components=n_comp,
        dropped=dropped,
        residuals=resid if keep_residuals else None,
    )
