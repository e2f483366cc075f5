"""Oracle and planted-parameter checks, one function per acceptance criterion.

Each check returns a ``CriterionResult`` with the measured discrepancy next to
its threshold. ``run_all`` drives them for ``urbanwage verify``; the test suite
calls the same functions.
"""
from __future__ import annotations

import filecmp
import statistics
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from . import fe
from .config import RunConfig
from .coworkers import SortedTeamWages, compute_panel_coworker_stats, deviation_stats
from .decomposition import (
    PreparedPanel,
    SpecId,
    percent_change,
    prepare_paired_panel,
    project_firm_fes,
    round_half_away,
    run_cell,
    symmetric_growth,
)
from .mobility import ee_regression
from .synthgen import DgpParams, SyntheticPanel, _draw_sizes, simulate_panel, team_size_location, write_panel

Kernel = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]

# Planted defaults: persistence and linear coworker coefficients of the
# estimated coworker specification, firm-effect and EE gradients.
PLANTED = DgpParams(nu=0.8, theta_plus_1=0.14, theta_minus_1=0.13, firm_fe_pop_slope=0.0496, ee_pop_slope=0.0296)

# Growth gradient carried by firm effects, EE wage gains and coworker composition;
# psi is drawn independently of population.
SORTING = PLANTED.replace(
    firm_fe_pop_slope=0.2,
    ee_wage_gain=1.0,
    national_firm_share=0.3,
    base_wage_pop_tilt=0.05,
    psi_pop_slope=0.0,
    seed=777,
)

PERCENT_CASES = ((0.09086, 0.23614, -61.5), (0.06361, 0.23614, -73.1), (0.04877, 0.23614, -79.3), (0.01405, 0.23614, -94.1))


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    measured: str
    threshold: str
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] criterion {self.number:>2} {self.name}: {self.measured} (threshold: {self.threshold})"


# --------------------------------------------------------------------------- kernel


def default_kernel(x: np.ndarray):
    s = deviation_stats(SortedTeamWages(x, np.arange(x.size)))
    return s.y1_plus, s.y1_minus, s.y2_plus, s.y2_minus


def brute_force_team(x: np.ndarray, divisor: float | None = None):
    """All four statistics for every member by the N x N difference matrix."""
    n = x.size
    d = x[None, :] - x[:, None]  # row j, column i: x_i - x_j
    pos, neg = np.maximum(d, 0.0), np.minimum(d, 0.0)
    div = (n - 1) if divisor is None else divisor
    if div <= 0:
        z = np.zeros(n)
        return z, z.copy(), z.copy(), z.copy()
    return pos.sum(1) / div, neg.sum(1) / div, (pos * pos).sum(1) / div, (neg * neg).sum(1) / div


def random_teams(n_teams: int, max_size: int, tie_rate: float, seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(n_teams):
        n = int(rng.integers(1, max_size + 1))
        x = np.exp(np.log(15.0) + 0.6 * rng.standard_normal(n))
        tie = rng.random(n) < tie_rate
        x[tie] = x[rng.integers(0, n, size=int(tie.sum()))]
        yield np.sort(x)


def check_kernel_oracle(n_teams: int = 5000, max_size: int = 200, tie_rate: float = 0.1, seed: int = 11, kernel: Kernel = default_kernel) -> CriterionResult:
    t0 = time.perf_counter()
    worst = 0.0
    for x in random_teams(n_teams, max_size, tie_rate, seed):
        got = kernel(x)
        want = brute_force_team(x)
        for g, w in zip(got, want):
            worst = max(worst, float(np.max(np.abs(np.asarray(g) - w) / (1.0 + np.abs(w)))))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and dt < 10.0
    return CriterionResult(1, "kernel vs brute-force oracle", ok, f"max rel discrepancy {worst:.2e}, {dt:.2f}s", "<= 1e-10, < 10 s", dt)


def check_mean_identity(n_teams: int = 5000, max_size: int = 200, tie_rate: float = 0.1, seed: int = 12) -> CriterionResult:
    t0 = time.perf_counter()
    worst = 0.0
    for x in random_teams(n_teams, max_size, tie_rate, seed):
        s = deviation_stats(SortedTeamWages(x, np.arange(x.size)), normalization="n")
        worst = max(worst, float(np.max(np.abs(s.y1_plus + s.y1_minus - (x.mean() - x)))))
    dt = time.perf_counter() - t0
    return CriterionResult(2, "kernel mean identity (1/N mode)", worst <= 1e-10, f"max abs deviation {worst:.2e}", "<= 1e-10", dt)


def scaling_panel(n_rows: int, seed: int = 13, shuffle: bool = False) -> pd.DataFrame:
    """Worker rows in lognormal-sized teams drawn as the generator draws them.

    By default rows come in the generator's order (worker ids assigned seat by
    seat, so teams are contiguous); ``shuffle`` permutes them at random.
    """
    p = DgpParams()
    rng = np.random.default_rng(seed)
    mu = team_size_location(p.team_size_mean, p.team_size_sigma, p.team_size_cap)
    sizes = _draw_sizes(rng, int(n_rows / p.team_size_mean * 1.2) + 10, mu, p)
    cut = int(np.searchsorted(np.cumsum(sizes), n_rows)) + 1
    sizes = sizes[:cut]
    sizes[-1] -= sizes.sum() - n_rows
    team = np.repeat(np.arange(sizes.size, dtype=np.int64) * 10 + 1, sizes)
    if shuffle:
        rng.shuffle(team)
    return pd.DataFrame(
        {"worker_id": np.arange(n_rows, dtype=np.int64), "team_prev": team, "wage_prev": np.exp(np.log(15) + 0.5 * rng.standard_normal(n_rows))}
    )


def time_kernel(df: pd.DataFrame, repeats: int = 3) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        compute_panel_coworker_stats(df)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def check_scaling(n_rows: int = 5_000_000, repeats: int = 3, shuffle: bool = False) -> CriterionResult:
    compute_panel_coworker_stats(scaling_panel(1000))  # compile
    small = time_kernel(scaling_panel(n_rows, shuffle=shuffle), repeats)
    big_df = scaling_panel(2 * n_rows, seed=14, shuffle=shuffle)
    big = time_kernel(big_df, repeats)
    del big_df
    ratio = big / small
    ok = ratio <= 2.3 and big <= 60.0
    layout = "shuffled rows" if shuffle else "generator row order"
    return CriterionResult(
        3, f"kernel linear-time scaling ({layout})", ok, f"{n_rows:,} rows {small:.2f}s, {2 * n_rows:,} rows {big:.2f}s, ratio {ratio:.2f}", "ratio <= 2.3, <= 60 s", small + big
    )


# --------------------------------------------------------------------------- FE solver


def _fwl_instance(rng):
    while True:
        n = int(rng.integers(60, 2001))
        n_fac = int(rng.integers(1, 3))
        p = int(rng.integers(1, 4))
        ga = int(rng.integers(3, max(4, min(40, n // 10))))
        a = rng.integers(0, ga, size=n)
        cols = {"cz": a}
        if n_fac == 2:
            gb = int(rng.integers(3, max(4, min(80, n // 8))))
            cols["firm"] = rng.integers(0, gb, size=n)
        X = rng.standard_normal((n, p)) + 0.3 * a[:, None]
        y = X @ rng.standard_normal(p) + 0.5 * a + (np.sin(cols["firm"]) if n_fac == 2 else 0) + rng.standard_normal(n) * (1 + 0.5 * (a % 3))
        df = pd.DataFrame({"y": y, **{f"x{k}": X[:, k] for k in range(p)}, **cols})
        levels_ok = all(np.unique(df[c]).size >= 2 for c in cols)
        if not levels_ok:
            continue
        if n_fac == 2:
            fa = fe._factorize(df["cz"].to_numpy(), "cz")
            fb = fe._factorize(df["firm"].to_numpy(), "firm")
            if fe._components(fa, fb)[0] != 1:
                continue
        return df, [f"x{k}" for k in range(p)], tuple(cols)


def dense_sandwich(D: np.ndarray, resid: np.ndarray, clusters: np.ndarray) -> np.ndarray:
    """CR1 sandwich by explicit loops over clusters on the full dummy design."""
    n, k = D.shape
    bread = np.linalg.inv(D.T @ D)
    meat = np.zeros((k, k))
    labels = np.unique(clusters)
    for g in labels:
        m = clusters == g
        s = D[m].T @ resid[m]
        meat += np.outer(s, s)
    G = labels.size
    return bread @ meat @ bread * (G / (G - 1)) * ((n - 1) / (n - k))


def check_fwl(n_instances: int = 200, seed: int = 21) -> CriterionResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_b = worst_se = 0.0
    for i in range(n_instances):
        df, cov, absorb = _fwl_instance(rng)
        method = "map" if i % 2 else "direct"
        res = fe.absorb_and_estimate(df, fe.RegressionSpec("y", tuple(cov), absorb, "cz"), method=method)
        parts = [df[cov].to_numpy(), fe.dummy_matrix(df["cz"])]
        if "firm" in absorb:
            parts.append(fe.dummy_matrix(df["firm"], drop_first=True))
        D = np.column_stack(parts)
        beta, resid, _ = fe.dense_ols_oracle(df["y"].to_numpy(), D)
        se = np.sqrt(np.diag(dense_sandwich(D, resid, df["cz"].to_numpy())))[: len(cov)]
        worst_b = max(worst_b, float(np.max(np.abs(res.beta - beta[: len(cov)]) / (1 + np.abs(beta[: len(cov)])))))
        worst_se = max(worst_se, float(np.max(np.abs(res.se - se) / (1 + se))))
    dt = time.perf_counter() - t0
    ok = worst_b <= 1e-8 and worst_se <= 1e-8
    return CriterionResult(4, "FE solver vs dense dummy OLS", ok, f"max rel coef diff {worst_b:.2e}, max rel SE diff {worst_se:.2e} over {n_instances} instances", "<= 1e-8", dt)


# --------------------------------------------------------------------------- planted recovery


def synthetic_prepared(params: DgpParams) -> tuple[SyntheticPanel, PreparedPanel]:
    """Simulate, then run the real preparation path (filters, dedup, deflation, pairing).

    The elapsed seconds are stored in ``metadata["setup_seconds"]``.
    """
    from .pipeline import prepare_records

    t0 = time.perf_counter()
    sp = simulate_panel(params)
    records = sp.records.drop(columns="hourly_wage")
    _, _, paired, _, _ = prepare_records(records, sp.cz_table, sp.cpi, RunConfig())
    pp = prepare_paired_panel(paired)
    pp.metadata["setup_seconds"] = time.perf_counter() - t0
    return sp, pp


def _within(est, se, truth, k=2.0):
    return abs(est - truth) <= k * se


def check_planted_recovery(data: tuple[SyntheticPanel, PreparedPanel] | None = None, params: DgpParams = PLANTED) -> CriterionResult:
    t0 = time.perf_counter()
    sp, pp = data if data is not None else synthetic_prepared(params)
    p = sp.truth.params
    res = run_cell(pp, SpecId("coworkers_firm_fe", "level", "all"), sp.cz_table).first
    truth = {
        "lagged_wage": p.nu,
        "y1_plus": p.theta_plus_1,
        "y1_minus": p.theta_minus_1,
        "y2_plus": p.theta_plus_2,
        "y2_minus": p.theta_minus_2,
    }
    z = {k: (res.coef(k) - v) / res.stderr(k) for k, v in truth.items()}
    dt = time.perf_counter() - t0 + (pp.metadata.get("setup_seconds", 0.0) if data is not None else 0.0)
    ok = all(abs(v) <= 2 for v in z.values()) and res.n_obs >= 500_000 and dt <= 300
    parts = ", ".join(f"{k} {res.coef(k):.5f} (z {v:+.2f})" for k, v in z.items())
    return CriterionResult(5, "planted first-stage recovery", ok, f"n={res.n_obs:,}; {parts}; {dt:.1f}s", "|z| <= 2, n >= 500k, <= 300 s", dt)


def check_sorting(data: tuple[SyntheticPanel, PreparedPanel] | None = None) -> CriterionResult:
    t0 = time.perf_counter()
    sp, pp = data if data is not None else synthetic_prepared(SORTING)
    cz = sp.cz_table
    base = run_cell(pp, SpecId("baseline", "level", "all"), cz).second
    full = run_cell(pp, SpecId("coworkers_firm_fe", "level", "all"), cz).second
    stay = run_cell(pp, SpecId("coworkers_firm_fe", "level", "stayers"), cz).second
    reduction = 1 - abs(full.alpha) / abs(base.alpha)
    ok = base.alpha / base.se_alpha > 1.96 and reduction >= 0.8 and abs(stay.alpha) <= 2 * stay.se_alpha
    dt = time.perf_counter() - t0
    msg = (
        f"baseline alpha {base.alpha:.4f} (t {base.alpha / base.se_alpha:.1f}); coworkers+firm FE {full.alpha:.4f} "
        f"(change {percent_change(full.alpha, base.alpha):.1f}%); stayers {stay.alpha:.4f} (z {stay.alpha / stay.se_alpha:+.2f})"
    )
    return CriterionResult(6, "sorting-mechanism decomposition", ok, msg, "t > 1.96, reduction >= 80%, stayers |z| <= 2", dt)


def check_firm_projection(data: tuple[SyntheticPanel, PreparedPanel] | None = None, params: DgpParams = PLANTED) -> CriterionResult:
    t0 = time.perf_counter()
    sp, pp = data if data is not None else synthetic_prepared(params)
    res = run_cell(pp, SpecId("firm_fe", "level", "all"), sp.cz_table).first
    sample = pp.data.loc[pp.data["same_cz"].to_numpy(dtype=bool)]
    proj, _ = project_firm_fes(res.fe_values["firm_key_prev"], sample, sp.cz_table)
    target = sp.truth.params.firm_fe_pop_slope
    z = (proj.alpha - target) / proj.se_alpha
    dt = time.perf_counter() - t0
    return CriterionResult(7, "firm-FE projection recovery", abs(z) <= 2, f"slope {proj.alpha:.4f} (se {proj.se_alpha:.4f}, z {z:+.2f}) vs {target}", "|z| <= 2", dt)


def check_ee(data: tuple[SyntheticPanel, PreparedPanel] | None = None, params: DgpParams = PLANTED) -> CriterionResult:
    t0 = time.perf_counter()
    sp, pp = data if data is not None else synthetic_prepared(params)
    target = sp.truth.params.ee_pop_slope
    r1 = ee_regression(pp.data)
    r2 = ee_regression(pp.data, include_lagged_wage=True)
    z1 = (r1.alpha_pop - target) / r1.se_alpha_pop
    z2 = r2.beta_wage / r2.se_beta_wage
    dt = time.perf_counter() - t0
    msg = f"alpha_pop {r1.alpha_pop:.5f} (z {z1:+.2f}) vs {target}; beta_wage {r2.beta_wage:.2e} (z {z2:+.2f})"
    return CriterionResult(8, "EE regression recovery", abs(z1) <= 2 and abs(z2) <= 2, msg, "|z| <= 2", dt)


# --------------------------------------------------------------------------- arithmetic and determinism


def check_percent_changes() -> CriterionResult:
    got = [round_half_away(percent_change(v, b), 1) for v, b, _ in PERCENT_CASES]
    want = [c for *_, c in PERCENT_CASES]
    return CriterionResult(9, "percent-change arithmetic", got == want, f"{got}", f"{want}")


def check_growth(seed: int = 31, n: int = 1_000_000) -> CriterionResult:
    rng = np.random.default_rng(seed)
    a = np.exp(rng.uniform(np.log(1e-3), np.log(1e6), n))
    b = np.exp(rng.uniform(np.log(1e-3), np.log(1e6), n))
    g = symmetric_growth(a, b)
    inside = bool(np.all((g > -2) & (g < 2)))
    anti = bool(np.array_equal(g, -symmetric_growth(b, a)))
    return CriterionResult(10, "growth bounds and antisymmetry", inside and anti, f"all in (-2,2): {inside}; exact antisymmetry: {anti}; max |g| {np.abs(g).max():.12f}", "open interval, exact")


def _same_tree(a: Path, b: Path) -> tuple[bool, list[str]]:
    fa = sorted(p.relative_to(a).as_posix() for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b).as_posix() for p in b.rglob("*") if p.is_file())
    if fa != fb:
        return False, sorted(set(fa) ^ set(fb))
    diff = [f for f in fa if not filecmp.cmp(a / f, b / f, shallow=False)]
    return not diff, diff


def check_determinism(params: DgpParams | None = None, threads: tuple[int, ...] = (1, 4)) -> CriterionResult:
    from .pipeline import cmd_decompose

    params = params or PLANTED.replace(n_cz=60, n_workers=30_000, seed=5)
    t0 = time.perf_counter()
    cfg = RunConfig(generate=params).with_seed(params.seed)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        write_panel(simulate_panel(params), tmp / "panel")
        outs = []
        for k, th in enumerate((threads[0], *threads)):
            out = tmp / f"out_{k}"
            cmd_decompose(cfg.with_threads(th), tmp / "panel", out)
            outs.append(out)
        results = [_same_tree(outs[0], o) for o in outs[1:]]
        n_files = len(list(outs[0].rglob("*.*")))
    ok = all(r[0] for r in results)
    diffs = sorted({d for r in results for d in r[1]})
    dt = time.perf_counter() - t0
    msg = f"{n_files} files, runs with threads {[threads[0], *threads]} identical: {ok}" + (f"; differing {diffs[:5]}" if diffs else "")
    return CriterionResult(11, "decompose byte-identical across runs and thread counts", ok, msg, "identical bytes", dt)


def run_all(cfg: RunConfig | None = None, report: Callable[[CriterionResult], None] | None = None) -> list[CriterionResult]:
    cfg = cfg or RunConfig()
    v = cfg.verify
    out: list[CriterionResult] = []

    def add(r):
        out.append(r)
        if report:
            report(r)

    add(check_kernel_oracle(n_teams=v.kernel_teams))
    add(check_mean_identity(n_teams=v.kernel_teams))
    if not v.skip_scaling:
        add(check_scaling(v.scaling_rows))
    add(check_fwl(v.fwl_instances))
    planted = synthetic_prepared(PLANTED.replace(n_workers=v.recovery_workers))
    add(check_planted_recovery(planted))
    add(check_sorting(synthetic_prepared(SORTING.replace(n_workers=v.recovery_workers))))
    add(check_firm_projection(planted))
    add(check_ee(planted))
    del planted
    add(check_percent_changes())
    add(check_growth())
    add(check_determinism())
    return out
