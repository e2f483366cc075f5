"""Coworker wage-deviation statistics computed from running sums.

For a team with lagged wages sorted ascending, ``x_1 <= ... <= x_N``, worker ``j``
is characterised by four sums over teammates::

    S1+ = sum_i max(x_i - x_j, 0)        S2+ = sum_i max(x_i - x_j, 0)**2
    S1- = sum_i min(x_i - x_j, 0)        S2- = sum_i min(x_i - x_j, 0)**2

Writing ``Z_j`` and ``Z2_j`` for the running sums of ``x`` and ``x**2`` these are

    S1+ = Z_N - Z_j - (N - j) x_j
    S1- = Z_j - j x_j
    S2+ = (Z2_N - Z2_j) - 2 x_j (Z_N - Z_j) + (N - j) x_j**2
    S2- = Z2_j - 2 x_j (Z_j - x_j) + (j - 2) x_j**2

so a whole team costs O(N) once sorted. The regression controls divide each sum
by ``N - 1`` (zero for a worker with no teammates); dividing by ``N`` is exposed
for identity checks only.

``brute_force_stats`` evaluates the sums directly and is the test oracle.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numba
import numpy as np
import pandas as pd

Normalization = Literal["n_minus_1", "n"]

STAT_COLUMNS = ("y1_plus", "y1_minus", "y2_plus", "y2_minus")
MOMENT_COLUMNS = ("mean", "variance", "skewness", "kurtosis", "p1", "p10", "p90", "p99")
PERCENTILES = (1, 10, 90, 99)

# Teams above this size accumulate running sums with Neumaier compensation.
COMPENSATE_ABOVE = 100_000


@dataclass(frozen=True)
class SortedTeamWages:
    wages: np.ndarray
    member_ids: np.ndarray

    def __post_init__(self):
        if self.wages.shape != self.member_ids.shape:
            raise ValueError("wages and member_ids must align")
        if self.wages.size == 0:
            raise ValueError("a team has at least one member")
        if np.any(np.diff(self.wages) < 0):
            raise ValueError("wages must be sorted ascending")

    @property
    def N(self) -> int:
        return int(self.wages.size)

    @classmethod
    def from_unsorted(cls, wages, member_ids=None) -> SortedTeamWages:
        """Sort on (wage, member id) so tied wages have a deterministic order."""
        wages = np.asarray(wages, dtype=np.float64)
        if member_ids is None:
            member_ids = np.arange(wages.size)
        member_ids = np.asarray(member_ids)
        order = np.lexsort((member_ids, wages))
        return cls(wages[order], member_ids[order])


@dataclass(frozen=True)
class PrefixSums:
    Z: np.ndarray
    Z2: np.ndarray


@dataclass(frozen=True)
class CoworkerStats:
    """The four deviation statistics; scalars for one worker or arrays for a team."""

    y1_plus: np.ndarray | float
    y1_minus: np.ndarray | float
    y2_plus: np.ndarray | float
    y2_minus: np.ndarray | float

    def as_array(self) -> np.ndarray:
        return np.column_stack([np.atleast_1d(getattr(self, c)) for c in STAT_COLUMNS])


@dataclass(frozen=True)
class TeamMoments:
    mean: float
    variance: float
    skewness: float
    kurtosis: float
    p1: float
    p10: float
    p90: float
    p99: float


def prefix_sums(team: SortedTeamWages) -> PrefixSums:
    Z = np.empty(team.N)
    Z2 = np.empty(team.N)
    _running_sums(team.wages, Z, Z2, team.N > COMPENSATE_ABOVE)
    return PrefixSums(Z, Z2)


@numba.njit(cache=True)
def _running_sums(x, Z, Z2, compensate):
    s = 0.0
    s2 = 0.0
    c = 0.0
    c2 = 0.0
    for k in range(x.size):
        v = x[k]
        v2 = v * v
        if compensate:
            t = s + v
            if abs(s) >= abs(v):
                c += (s - t) + v
            else:
                c += (v - t) + s
            s = t
            t2 = s2 + v2
            if abs(s2) >= abs(v2):
                c2 += (s2 - t2) + v2
            else:
                c2 += (v2 - t2) + s2
            s2 = t2
            Z[k] = s + c
            Z2[k] = s2 + c2
        else:
            s += v
            s2 += v2
            Z[k] = s
            Z2[k] = s2


@numba.njit(cache=True)
def _grouped_deviation_stats(x, offsets, order, divide_by_n, y1p, y1m, y2p, y2m):
    """Normalised statistics for contiguous sorted groups.

    Row ``lo + k`` of the sorted data is written to position ``order[lo + k]`` of
    the outputs. Each group is shifted by its middle element before accumulation;
    the sums are translation invariant and the shift keeps Z2 small, which limits
    cancellation in S2-.
    """
    n_groups = offsets.size - 1
    for g in range(n_groups):
        lo = offsets[g]
        hi = offsets[g + 1]
        N = hi - lo
        if divide_by_n:
            divisor = float(N)
        else:
            divisor = float(N - 1)
        if divisor <= 0.0:
            for k in range(N):
                r = order[lo + k]
                y1p[r] = 0.0
                y1m[r] = 0.0
                y2p[r] = 0.0
                y2m[r] = 0.0
            continue
        shift = x[lo + (N - 1) // 2]
        c = np.empty(N)
        for k in range(N):
            c[k] = x[lo + k] - shift
        Z = np.empty(N)
        Z2 = np.empty(N)
        _running_sums(c, Z, Z2, N > COMPENSATE_ABOVE)
        ZN = Z[N - 1]
        Z2N = Z2[N - 1]
        for k in range(N):
            j = k + 1
            xj = c[k]
            Zj = Z[k]
            Z2j = Z2[k]
            s1p = ZN - Zj - (N - j) * xj
            s1m = Zj - j * xj
            s2p = (Z2N - Z2j) - 2.0 * xj * (ZN - Zj) + (N - j) * xj * xj
            s2m = Z2j - 2.0 * xj * (Zj - xj) + (j - 2) * xj * xj
            r = order[lo + k]
            # signs are exact in real arithmetic; rounding can leave residue of the wrong sign
            y1p[r] = s1p / divisor if s1p > 0.0 else 0.0
            y1m[r] = s1m / divisor if s1m < 0.0 else 0.0
            y2p[r] = s2p / divisor if s2p > 0.0 else 0.0
            y2m[r] = s2m / divisor if s2m > 0.0 else 0.0


def _check_normalization(normalization: Normalization) -> bool:
    if normalization not in ("n_minus_1", "n"):
        raise ValueError(f"unknown normalization {normalization!r}")
    return normalization == "n"


def deviation_stats(team: SortedTeamWages, normalization: Normalization = "n_minus_1") -> CoworkerStats:
    """Coworker statistics for every member of one team, in sorted order."""
    divide_by_n = _check_normalization(normalization)
    out = [np.empty(team.N) for _ in range(4)]
    _grouped_deviation_stats(
        team.wages, np.array([0, team.N], dtype=np.int64), np.arange(team.N), divide_by_n, *out
    )
    return CoworkerStats(*out)


def brute_force_stats(wages, j: int, normalization: Normalization = "n_minus_1") -> CoworkerStats:
    """Direct O(N) evaluation for member ``j`` (0-based index into ``wages``)."""
    x = np.asarray(wages, dtype=np.float64)
    d = x - x[j]
    pos = np.maximum(d, 0.0)
    neg = np.minimum(d, 0.0)
    sums = np.array([pos.sum(), neg.sum(), (pos * pos).sum(), (neg * neg).sum()])
    N = x.size
    divisor = N if _check_normalization(normalization) else N - 1
    if divisor <= 0:
        return CoworkerStats(0.0, 0.0, 0.0, 0.0)
    return CoworkerStats(*(float(v) for v in sums / divisor))


def team_moments(wages) -> TeamMoments:
    """Mean, central moments (denominator N) and nearest-rank percentiles."""
    x = np.sort(np.asarray(wages, dtype=np.float64))
    n = x.size
    if n == 0:
        raise ValueError("a team has at least one member")
    mean = x.mean()
    if x[0] == x[-1]:
        var = skew = kurt = 0.0
        mean = float(x[0])
    else:
        d = x - mean
        var = float(np.mean(d**2))
        skew = float(np.mean(d**3) / var**1.5)
        kurt = float(np.mean(d**4) / var**2)
    pct = [float(x[_nearest_rank(p, n) - 1]) for p in PERCENTILES]
    return TeamMoments(float(mean), var, skew, kurt, *pct)


def _nearest_rank(p, n):
    # ceil(p * n / 100) in integer arithmetic, at least 1
    return np.maximum((p * np.asarray(n) + 99) // 100, 1)


@numba.njit(cache=True)
def _grouped_moments(x, offsets, out):
    """TeamMoments columns for contiguous sorted groups; ``out`` has shape (G, 8)."""
    for g in range(offsets.size - 1):
        lo = offsets[g]
        hi = offsets[g + 1]
        n = hi - lo
        if x[lo] == x[hi - 1]:
            out[g, 0] = x[lo]
            out[g, 1] = 0.0
            out[g, 2] = 0.0
            out[g, 3] = 0.0
        else:
            s = 0.0
            for k in range(lo, hi):
                s += x[k]
            mean = s / n
            m2 = 0.0
            m3 = 0.0
            m4 = 0.0
            for k in range(lo, hi):
                d = x[k] - mean
                d2 = d * d
                m2 += d2
                m3 += d2 * d
                m4 += d2 * d2
            m2 /= n
            m3 /= n
            m4 /= n
            out[g, 0] = mean
            out[g, 1] = m2
            out[g, 2] = m3 / m2**1.5
            out[g, 3] = m4 / (m2 * m2)
        for c in range(4):
            p = (1, 10, 90, 99)[c]
            rank = (p * n + 99) // 100
            if rank < 1:
                rank = 1
            out[g, 4 + c] = x[lo + rank - 1]


@numba.njit(cache=True)
def _less(w, ids, a, b):
    return w[a] < w[b] or (w[a] == w[b] and ids[a] < ids[b])


@numba.njit(cache=True)
def _bucket_order(codes, n_groups, w, ids):
    """Row order grouped by team code, ascending (wage, id) within each team.

    A counting sort places rows by team; each team is then sorted on its own,
    so the cost is O(n + sum N log N) rather than a global O(n log n) sort.
    """
    n = codes.size
    offsets = np.zeros(n_groups + 1, dtype=np.int64)
    for i in range(n):
        offsets[codes[i] + 1] += 1
    for g in range(n_groups):
        offsets[g + 1] += offsets[g]
    pos = offsets[:-1].copy()
    order = np.empty(n, dtype=np.int64)
    for i in range(n):
        c = codes[i]
        order[pos[c]] = i
        pos[c] += 1
    for g in range(n_groups):
        lo = offsets[g]
        hi = offsets[g + 1]
        if hi - lo <= 48:
            for k in range(lo + 1, hi):
                v = order[k]
                m = k - 1
                while m >= lo and _less(w, ids, v, order[m]):
                    order[m + 1] = order[m]
                    m -= 1
                order[m + 1] = v
        else:
            seg = order[lo:hi].copy()
            seg = seg[np.argsort(ids[seg], kind="mergesort")]
            seg = seg[np.argsort(w[seg], kind="mergesort")]
            order[lo:hi] = seg
    return order, offsets


def _factorize_sorted(team_codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Codes 0..k-1 in ascending label order, as ``pd.factorize(sort=True)``.

    Integer labels spanning at most four times the row count are ranked through
    a presence table, which stays linear where a hash table falls out of cache.
    """
    n = team_codes.size
    if n and team_codes.dtype.kind in "iu":
        lo, hi = int(team_codes.min()), int(team_codes.max())
        span = hi - lo + 1
        if span <= 4 * n + 1024 and span < 2**31:
            rel = team_codes - lo
            present = np.zeros(span, dtype=bool)
            present[rel] = True
            rank = np.cumsum(present, dtype=np.int32) - 1
            return rank[rel].astype(np.int64), np.flatnonzero(present) + lo
    codes, labels = pd.factorize(team_codes, sort=True)
    return codes, np.asarray(labels)


def _sort_teams(team_codes: np.ndarray, wages: np.ndarray, member_ids: np.ndarray):
    if np.isnan(wages).any():
        raise ValueError("team wages contain NaN")
    codes, labels = _factorize_sorted(team_codes)
    ids = np.asarray(member_ids)
    if ids.dtype.kind not in "iu":
        ids = pd.factorize(ids, sort=True)[0]
    order, offsets = _bucket_order(codes.astype(np.int64), labels.size, wages, ids.astype(np.int64))
    return order, offsets, wages[order], np.asarray(labels)


def _worker_frame(x, offsets, order, normalization: Normalization) -> pd.DataFrame:
    divide_by_n = _check_normalization(normalization)
    n = x.size
    cols = {name: np.empty(n) for name in STAT_COLUMNS}
    _grouped_deviation_stats(x, offsets, order, divide_by_n, *cols.values())
    sizes = np.diff(offsets)
    team_size = np.empty(n, dtype=np.int64)
    team_size[order] = np.repeat(sizes, sizes)
    cols["team_size"] = team_size
    cols["no_coworkers"] = team_size == 1
    out = pd.DataFrame(cols, copy=False)
    out.attrs["n_teams"] = int(sizes.size)
    out.attrs["normalization"] = normalization
    return out


def _moments_frame(x, offsets, team_labels) -> pd.DataFrame:
    moments = np.empty((offsets.size - 1, len(MOMENT_COLUMNS)))
    _grouped_moments(x, offsets, moments)
    out = pd.DataFrame(moments, columns=list(MOMENT_COLUMNS), index=pd.Index(team_labels, name="team"))
    out.insert(0, "size", np.diff(offsets))
    out.attrs["percentile_rule"] = "nearest-rank"
    return out


def _as_arrays(team_codes, wages, member_ids):
    team_codes = np.asarray(team_codes)
    wages = np.asarray(wages, dtype=np.float64)
    member_ids = np.arange(wages.size) if member_ids is None else np.asarray(member_ids)
    return team_codes, wages, member_ids


def panel_deviation_stats(
    team_codes,
    wages,
    member_ids=None,
    normalization: Normalization = "n_minus_1",
) -> pd.DataFrame:
    """Group workers by team and compute the four statistics for everyone at once.

    Returns a frame aligned with the inputs (plus ``team_size`` and
    ``no_coworkers``). Cost is a counting sort by team, a sort within each
    team and linear passes.
    """
    team_codes, wages, member_ids = _as_arrays(team_codes, wages, member_ids)
    order, offsets, x, _ = _sort_teams(team_codes, wages, member_ids)
    return _worker_frame(x, offsets, order, normalization)


def panel_team_moments(team_codes, wages) -> pd.DataFrame:
    """One row of TeamMoments per team, indexed by team code."""
    team_codes, wages, member_ids = _as_arrays(team_codes, wages, None)
    _, offsets, x, labels = _sort_teams(team_codes, wages, member_ids)
    return _moments_frame(x, offsets, labels)


def compute_panel_coworker_stats(
    paired: pd.DataFrame,
    wage_col: str = "wage_prev",
    team_col: str = "team_prev",
    id_col: str = "worker_id",
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Coworker statistics for a paired panel, grouped on the lagged team.

    Returns the per-worker statistics (sharing the index of ``paired``) and the
    per-team moments table. Workers alone in their lagged team get zero
    statistics and ``no_coworkers = True``.
    """
    team_codes, wages, ids = _as_arrays(
        paired[team_col].to_numpy(), paired[wage_col].to_numpy(dtype=np.float64), paired[id_col].to_numpy()
    )
    order, offsets, x, labels = _sort_teams(team_codes, wages, ids)
    workers = _worker_frame(x, offsets, order, "n_minus_1")
    workers.index = paired.index
    return workers, _moments_frame(x, offsets, labels)
