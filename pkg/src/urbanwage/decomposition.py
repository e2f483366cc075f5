"""First-stage specifications, second-stage projections and the decomposition report.

A prepared panel is the paired panel plus, for every dependent-variable scale,
the response, the lagged wage and the coworker statistics computed on that
scale's lagged wage:

    level   wage_t / wage_prev            residualized hourly wages
    log     log_wage_t / log_wage_prev    residualized log hourly wages
    growth  growth                        2 (w_t - w_prev) / (w_t + w_prev), raw wages

Growth has no lagged-wage covariate; its coworker controls are the level ones.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from . import fe
from .coworkers import MOMENT_COLUMNS, STAT_COLUMNS, compute_panel_coworker_stats
from .errors import DataError, EstimationError
from .panel import residualize_wages

log = logging.getLogger(__name__)

CONTROLS = ("baseline", "firm_fe", "coworkers", "coworkers_firm_fe", "moments")
TABLE_CONTROLS = CONTROLS[:4]
DVS = ("level", "log", "growth")
SAMPLES = ("all", "stayers")
N_MOMENT_STAGES = 1 + len(MOMENT_COLUMNS)

_DV = {
    "level": ("wage_t", "wage_prev", "level"),
    "log": ("log_wage_t", "log_wage_prev", "log"),
    "growth": ("growth", None, "level"),
}


@dataclass(frozen=True, order=True)
class SpecId:
    controls: str = "baseline"
    dv: str = "level"
    sample: str = "all"

    def __post_init__(self):
        if self.controls not in CONTROLS:
            raise ValueError(f"unknown control set {self.controls!r}")
        if self.dv not in DVS:
            raise ValueError(f"unknown dependent variable {self.dv!r}")
        if self.sample not in SAMPLES:
            raise ValueError(f"unknown sample {self.sample!r}")

    @property
    def name(self) -> str:
        return f"{self.controls}_{self.dv}_{self.sample}"

    @classmethod
    def parse(cls, text: str) -> SpecId:
        """``controls[:dv[:sample]]``, e.g. ``baseline`` or ``coworkers:log:stayers``."""
        parts = text.split(":")
        if not 1 <= len(parts) <= 3:
            raise ValueError(f"bad spec id {text!r}")
        return cls(*parts)


def spec_grid(
    controls: Iterable[str] = TABLE_CONTROLS,
    dvs: Iterable[str] = DVS,
    samples: Iterable[str] = SAMPLES,
) -> list[SpecId]:
    return [SpecId(c, d, s) for d in dvs for s in samples for c in controls]


# --------------------------------------------------------------------------- preparation


def symmetric_growth(w_t, w_prev):
    """2 (w_t - w_prev) / (w_t + w_prev); NaN where the denominator is zero."""
    w_t = np.asarray(w_t, dtype=float)
    w_prev = np.asarray(w_prev, dtype=float)
    den = w_t + w_prev
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 2.0 * (w_t - w_prev) / den
    return np.where(den == 0, np.nan, out)


@dataclass
class PreparedPanel:
    data: pd.DataFrame
    moments: dict[str, pd.DataFrame]
    counters: dict[str, int] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def prepare_paired_panel(paired: pd.DataFrame, residualize: bool = True) -> PreparedPanel:
    """Add responses, lagged wages and coworker statistics for every scale."""
    if paired.empty:
        raise DataError("paired panel is empty")
    if (paired["wage_t"] <= 0).any() or (paired["wage_prev"] <= 0).any():
        raise DataError("hourly wages must be positive")
    df = paired.copy()
    df["log_wage_t"] = np.log(df["wage_t"].to_numpy())
    df["log_wage_prev"] = np.log(df["wage_prev"].to_numpy())
    df["growth"] = symmetric_growth(df["wage_t"], df["wage_prev"])
    counters = {"growth_zero_denominator": int(np.isnan(df["growth"]).sum())}
    meta = {"residualized": residualize}
    if residualize:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            df = residualize_wages(df, ("wage_t", "wage_prev", "log_wage_t", "log_wage_prev"))
        for w in caught:
            log.warning("%s", w.message)
        meta["residualization"] = df.attrs.get("residualization")
    else:
        for c in ("wage_t", "wage_prev", "log_wage_t", "log_wage_prev"):
            df[f"{c}_raw"] = df[c]
    moments = {}
    for scale, col in (("level", "wage_prev"), ("log", "log_wage_prev")):
        stats, mom = compute_panel_coworker_stats(df, wage_col=col)
        for s in STAT_COLUMNS:
            df[f"{s}_{scale}"] = stats[s].to_numpy()
        moments[scale] = mom
        if scale == "level":
            df["team_size"] = stats["team_size"].to_numpy()
            df["no_coworkers"] = stats["no_coworkers"].to_numpy()
    meta["percentile_rule"] = "nearest-rank"
    meta["coworker_normalization"] = "divide by team size minus one; zero for singleton teams"
    return PreparedPanel(df, moments, counters, meta)


# --------------------------------------------------------------------------- first stage


@dataclass(frozen=True)
class StageOptions:
    tol: float = fe.DEFAULT_TOL
    max_iter: int = fe.DEFAULT_MAX_ITER
    coworker_singletons: str = "zero"  # zero | flag | drop
    cluster: str = "cz_id"

    def __post_init__(self):
        if self.coworker_singletons not in ("zero", "flag", "drop"):
            raise ValueError(f"coworker_singletons must be zero, flag or drop, not {self.coworker_singletons!r}")


def stayer_filter(paired: pd.DataFrame) -> tuple[pd.DataFrame, int]:
    """Pairs whose lagged and current team coincide."""
    out = paired.loc[~paired["is_ee"].to_numpy(dtype=bool)]
    if out.empty:
        warnings.warn("stayer subsample is empty", stacklevel=2)
    return out, len(out)


def estimation_sample(prepared: PreparedPanel, spec: SpecId, options: StageOptions = StageOptions()) -> pd.DataFrame:
    df = prepared.data
    keep = df["same_cz"].to_numpy(dtype=bool).copy()
    if spec.sample == "stayers":
        keep &= ~df["is_ee"].to_numpy(dtype=bool)
    if spec.dv == "growth":
        keep &= np.isfinite(df["growth"].to_numpy())
    if spec.controls.startswith("coworkers") and options.coworker_singletons == "drop":
        keep &= ~df["no_coworkers"].to_numpy(dtype=bool)
    out = df.loc[keep]
    if out.empty:
        raise EstimationError(f"{spec.name}: empty estimation sample")
    return out


def _covariates(spec: SpecId, options: StageOptions, moment_stage: int = N_MOMENT_STAGES) -> list[str]:
    response, lag, scale = _DV[spec.dv]
    cov = [lag] if lag else []
    if spec.controls.startswith("coworkers"):
        cov += [f"{s}_{scale}" for s in STAT_COLUMNS]
        if options.coworker_singletons == "flag":
            cov.append("no_coworkers")
    if spec.controls == "moments":
        for m in MOMENT_COLUMNS[: moment_stage - 1]:
            cov.append(f"team_{m}")
            if lag:
                cov.append(f"team_{m}_x_lag")
    return cov


def _absorb(spec: SpecId) -> tuple[str, ...]:
    return ("cz_id", "firm_key_prev") if spec.controls.endswith("firm_fe") else ("cz_id",)


def _with_moments(sample: pd.DataFrame, prepared: PreparedPanel, spec: SpecId, stage: int) -> pd.DataFrame:
    _, lag, scale = _DV[spec.dv]
    mom = prepared.moments[scale]
    out = sample.copy()
    rows = mom.reindex(out["team_prev"].to_numpy())
    for m in MOMENT_COLUMNS[: stage - 1]:
        out[f"team_{m}"] = rows[m].to_numpy()
        if lag:
            out[f"team_{m}_x_lag"] = out[f"team_{m}"].to_numpy() * out[lag].to_numpy()
    return out


def _rename(result: fe.EstimationResult, spec: SpecId) -> fe.EstimationResult:
    _, lag, scale = _DV[spec.dv]
    mapping = {lag: "lagged_wage"} if lag else {}
    mapping.update({f"{s}_{scale}": s for s in STAT_COLUMNS})
    result.names = [mapping.get(n, n) for n in result.names]
    result.dropped = [mapping.get(n, n) for n in result.dropped]
    return result


def run_first_stage(
    prepared: PreparedPanel,
    spec: SpecId,
    options: StageOptions = StageOptions(),
    moment_stage: int = N_MOMENT_STAGES,
) -> fe.EstimationResult:
    """Estimate one cell; coefficient names are canonical (lagged_wage, y1_plus, ...)."""
    sample = estimation_sample(prepared, spec, options)
    response = _DV[spec.dv][0]
    if spec.controls == "moments":
        if not 1 <= moment_stage <= N_MOMENT_STAGES:
            raise ValueError(f"moment stage must be in 1..{N_MOMENT_STAGES}")
        sample = _with_moments(sample, prepared, spec, moment_stage)
    rs = fe.RegressionSpec(response, tuple(_covariates(spec, options, moment_stage)), _absorb(spec), options.cluster, spec.sample)
    res = fe.absorb_and_estimate(
        sample, rs, tol=options.tol, max_iter=options.max_iter, drop_collinear=spec.controls == "moments"
    )
    return _rename(res, spec)


def run_moments_specification(
    prepared: PreparedPanel,
    stage: int,
    dv: str = "level",
    sample: str = "all",
    options: StageOptions = StageOptions(),
) -> fe.EstimationResult:
    """Cumulative moments stage 1..9: stage 1 is the baseline; each later stage adds one
    team moment and its interaction with the lagged wage."""
    return run_first_stage(prepared, SpecId("moments", dv, sample), options, moment_stage=stage)


# --------------------------------------------------------------------------- second stage


@dataclass(frozen=True)
class SecondStageResult:
    alpha0: float
    alpha: float
    r2: float
    se_alpha: float
    se_alpha0: float
    n_cz: int


def run_second_stage(
    psi: pd.Series,
    cz_table: pd.DataFrame,
    weights: pd.Series | None = None,
) -> SecondStageResult:
    """OLS of CZ effects on an intercept and log population, one row per CZ.

    Standard errors are heteroskedasticity-robust (HC1). ``weights`` switches to WLS.
    """
    psi = psi.dropna()
    if len(psi) < 3:
        raise EstimationError(f"second stage needs at least 3 CZs, got {len(psi)}")
    missing = psi.index.difference(cz_table.index)
    if len(missing):
        raise DataError(f"CZ(s) {list(missing[:5])} missing from the CZ table")
    p = cz_table["log_population"].reindex(psi.index).to_numpy(dtype=float)
    y = psi.to_numpy(dtype=float)
    w = np.ones_like(y) if weights is None else weights.reindex(psi.index).to_numpy(dtype=float)
    if np.ptp(p) == 0:
        raise EstimationError("log population has no variance across CZs")
    sw = np.sqrt(w)
    X = np.column_stack([np.ones_like(p), p]) * sw[:, None]
    yw = y * sw
    bread = np.linalg.inv(X.T @ X)
    beta = bread @ (X.T @ yw)
    resid = yw - X @ beta
    ybar = np.average(y, weights=w)
    tss = float(np.sum(w * (y - ybar) ** 2))
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 0.0
    if tss == 0:
        beta = np.array([ybar, 0.0])
    V = fe.clustered_vcov(X, resid, None, bread=bread)
    se = np.sqrt(np.clip(np.diag(V), 0, None))
    return SecondStageResult(float(beta[0]), float(beta[1]), float(min(max(r2, 0.0), 1.0)), float(se[1]), float(se[0]), len(psi))


def cz_effects(result: fe.EstimationResult) -> pd.Series:
    tab = result.fe_values["cz_id"]
    return pd.Series(tab["estimate"].to_numpy(), index=pd.Index(tab["level"].to_numpy(), name="cz_id"), name="psi")


def project_firm_fes(
    mu: pd.DataFrame,
    paired: pd.DataFrame,
    cz_table: pd.DataFrame,
    firm_col: str = "firm_key_prev",
    cz_col: str = "cz_prev",
) -> tuple[SecondStageResult, pd.Series]:
    """Employment-weighted mean firm effect per CZ, projected on log population.

    Weights are worker counts of each lagged firm key within the CZ of the lagged
    job. ``mu`` has columns ``level`` (firm key) and ``estimate``.
    """
    lookup = pd.Series(mu["estimate"].to_numpy(), index=mu["level"].to_numpy())
    per_worker = lookup.reindex(paired[firm_col].to_numpy()).to_numpy()
    ok = np.isfinite(per_worker)
    means = pd.Series(per_worker[ok]).groupby(paired[cz_col].to_numpy()[ok]).mean()
    means.index.name = "cz_id"
    return run_second_stage(means, cz_table), means


def percent_change(value: float, baseline: float) -> float:
    if baseline == 0:
        raise ValueError("percent change relative to a zero baseline")
    return 100.0 * (value / baseline - 1.0)


def round_half_away(x: float, digits: int = 1) -> float:
    """Round as printed tables do (halves away from zero), robust to binary noise."""
    q = 10.0**digits
    v = abs(x) * q
    r = math.floor(v + 0.5 + 1e-9)
    return math.copysign(r / q, x) if r else 0.0


def bin_fe_by_population(psi: pd.Series, cz_table: pd.DataFrame, n_bins: int = 50) -> pd.DataFrame:
    """Equal-count bins of CZs ordered by log population.

    With n CZs and B = min(n_bins, n) bins, bin b holds the items at sorted
    positions floor(b n / B) .. floor((b + 1) n / B) - 1, so sizes differ by at most one.
    """
    psi = psi.dropna()
    n = len(psi)
    if n == 0:
        return pd.DataFrame(columns=["bin", "n_cz", "mean_log_population", "mean_psi"])
    frame = pd.DataFrame(
        {"cz_id": psi.index.to_numpy(), "psi": psi.to_numpy(), "p": cz_table["log_population"].reindex(psi.index).to_numpy()}
    ).sort_values(["p", "cz_id"], kind="mergesort")
    B = min(n_bins, n)
    bounds = (np.arange(B + 1) * n) // B
    frame["bin"] = np.searchsorted(bounds, np.arange(n), side="right") - 1
    g = frame.groupby("bin", sort=True)
    return pd.DataFrame(
        {"bin": np.arange(B), "n_cz": g.size().to_numpy(), "mean_log_population": g["p"].mean().to_numpy(), "mean_psi": g["psi"].mean().to_numpy()}
    )


# --------------------------------------------------------------------------- grid and report


@dataclass
class CellResult:
    spec: SpecId
    first: fe.EstimationResult
    second: SecondStageResult
    psi: pd.Series


def run_cell(prepared: PreparedPanel, spec: SpecId, cz_table: pd.DataFrame, options: StageOptions = StageOptions()) -> CellResult:
    res = run_first_stage(prepared, spec, options)
    psi = cz_effects(res)
    return CellResult(spec, res, run_second_stage(psi, cz_table), psi)


def run_grid(
    prepared: PreparedPanel,
    specs: Sequence[SpecId],
    cz_table: pd.DataFrame,
    options: StageOptions = StageOptions(),
    threads: int = 1,
) -> dict[SpecId, CellResult]:
    """Run every cell; the result order follows ``specs`` whatever the thread count."""
    specs = list(dict.fromkeys(specs))
    if threads > 1 and len(specs) > 1:
        with ThreadPoolExecutor(threads) as ex:
            cells = list(ex.map(lambda s: run_cell(prepared, s, cz_table, options), specs))
    else:
        cells = [run_cell(prepared, s, cz_table, options) for s in specs]
    return dict(zip(specs, cells))


@dataclass
class DecompositionReport:
    panel_a: dict[tuple[str, str], pd.DataFrame]
    panel_b: dict[tuple[str, str], pd.DataFrame]


def _columns_for(results: Mapping[SpecId, CellResult], dv: str, sample: str) -> list[tuple[str, CellResult]]:
    cells = [r for s, r in results.items() if s.dv == dv and s.sample == sample]
    cells.sort(key=lambda r: CONTROLS.index(r.spec.controls))
    cols = [(r.spec.name, r) for r in cells]
    if sample == "stayers":
        base = results.get(SpecId("baseline", dv, "all"))
        if base is not None and cells:
            cols.insert(0, ("baseline_full_sample", base))
    return cols


def build_report(results: Mapping[SpecId, CellResult]) -> DecompositionReport:
    """Panel A (first-stage coefficients, long format) and Panel B (second stage) per (dv, sample).

    Percent changes are relative to column 1 (the full-sample baseline for the
    stayers grid) and are absent for column 1 itself.
    """
    if not results:
        raise EstimationError("no results to report")
    panel_a, panel_b = {}, {}
    for dv in DVS:
        for sample in SAMPLES:
            cols = _columns_for(results, dv, sample)
            if not cols:
                continue
            base = cols[0][1] if cols[0][1].spec.controls == "baseline" else None
            if len(cols) > 1 and base is None:
                raise EstimationError(f"{dv}/{sample}: baseline cell missing")
            a_rows, b_rows = [], []
            for i, (label, cell) in enumerate(cols, start=1):
                r = cell.first
                for term, est, se in zip(r.names, r.beta, r.se):
                    a_rows.append((i, label, term, est, se))
                fixed = ["cz_id", "firm_key_prev"] if cell.spec.controls.endswith("firm_fe") else ["cz_id"]
                a_rows += [
                    (i, label, "r2", r.r2, np.nan),
                    (i, label, "n_obs", float(r.n_obs), np.nan),
                    (i, label, "n_clusters", float(r.n_clusters), np.nan),
                    (i, label, "lagged_firm_fe", float("firm_key_prev" in fixed), np.nan),
                ]
                s = cell.second
                row = {
                    "column": i,
                    "spec": label,
                    "alpha": s.alpha,
                    "se_alpha": s.se_alpha,
                    "alpha0": s.alpha0,
                    "se_alpha0": s.se_alpha0,
                    "r2": s.r2,
                    "n_cz": s.n_cz,
                    "alpha_change_pct": np.nan,
                    "r2_change_pct": np.nan,
                }
                if i > 1 and base is not None:
                    row["alpha_change_pct"] = percent_change(s.alpha, base.second.alpha)
                    row["r2_change_pct"] = percent_change(s.r2, base.second.r2) if base.second.r2 else np.nan
                b_rows.append(row)
            panel_a[(dv, sample)] = pd.DataFrame(a_rows, columns=["column", "spec", "term", "estimate", "se_clustered"])
            b = pd.DataFrame(b_rows)
            if len(cols) == 1:
                b = b.drop(columns=["alpha_change_pct", "r2_change_pct"])
            panel_b[(dv, sample)] = b
    return DecompositionReport(panel_a, panel_b)
