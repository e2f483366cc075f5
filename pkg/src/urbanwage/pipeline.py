"""Stage functions behind the CLI: prepare a panel directory and run the decomposition."""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, fe
from .config import RunConfig
from .coworkers import PERCENTILES
from .decomposition import (
    CONTROLS,
    N_MOMENT_STAGES,
    PreparedPanel,
    SpecId,
    StageOptions,
    bin_fe_by_population,
    build_report,
    cz_effects,
    prepare_paired_panel,
    project_firm_fes,
    round_half_away,
    run_grid,
    run_moments_specification,
    run_second_stage,
    spec_grid,
)
from .errors import DataError, UrbanWageError
from .mobility import ee_regression, self_flow_rates
from .panel import (
    RESIDUALIZATION,
    FilterConfig,
    FilterReport,
    apply_sample_filters,
    build_paired_panel,
    deduplicate_jobs,
    deflate_wages,
    load_cpi,
    load_cz_table,
    load_panel,
    make_cz_table,
)

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def write_csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")


def write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


class StageError(UrbanWageError):
    """Wraps a library error with the pipeline stage it came from."""

    def __init__(self, stage: str, err: UrbanWageError):
        super().__init__(f"[{stage}] {err}")
        self.exit_code = err.exit_code
        self.stage = stage


class staged:
    def __init__(self, stage: str):
        self.stage = stage

    def __enter__(self):
        return self

    def __exit__(self, et, ev, tb):
        if ev is not None and isinstance(ev, UrbanWageError) and not isinstance(ev, StageError):
            raise StageError(self.stage, ev) from ev
        return False


class OutputDir:
    """Collect outputs in a sibling scratch directory, publish them on success.

    Files already in the destination are replaced only by name; nothing else
    there is touched. On failure the scratch directory is removed.
    """

    def __init__(self, out: str | Path):
        self.out = Path(out)
        self.tmp = self.out.parent / f".{self.out.name}.partial"

    def __enter__(self) -> Path:
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, et, ev, tb):
        if ev is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        self.out.mkdir(parents=True, exist_ok=True)
        for src in sorted(self.tmp.rglob("*")):
            if src.is_file():
                dst = self.out / src.relative_to(self.tmp)
                dst.parent.mkdir(parents=True, exist_ok=True)
                src.replace(dst)
        shutil.rmtree(self.tmp)
        return False


# --------------------------------------------------------------------------- prepare


@dataclass
class PreparedInputs:
    prepared: PreparedPanel
    cz_table: pd.DataFrame
    flows: pd.DataFrame
    filter_report: FilterReport | None
    info: dict


def filter_config(cfg: RunConfig) -> FilterConfig:
    p = cfg.prepare
    return FilterConfig(min_age=p.min_age, max_age=p.max_age, min_annual_wage=p.min_annual_wage)


def prepare_records(records: pd.DataFrame, cz_table: pd.DataFrame, cpi: dict[int, float], cfg: RunConfig):
    """Filters, job deduplication, deflation and pairing. Returns (prev, cur, paired, report, info)."""
    filtered, report = apply_sample_filters(records, filter_config(cfg), cz_table)
    deduped, n_dup = deduplicate_jobs(filtered)
    years = sorted(int(y) for y in pd.unique(deduped["year"]))
    if len(years) != 2 or years[1] != years[0] + 1:
        raise DataError(f"expected two consecutive years after filtering, found {years}")
    base = cfg.prepare.base_year or years[1]
    if cfg.prepare.use_precomputed_hourly and "hourly_wage" in deduped.columns and deduped["hourly_wage"].notna().all():
        real = deduped
    else:
        real = deflate_wages(deduped, cpi, base)
    prev = real.loc[real["year"] == years[0]]
    cur = real.loc[real["year"] == years[1]]
    paired = build_paired_panel(prev, cur, cz_table)
    info = {
        "years": years,
        "base_year": base,
        "duplicate_jobs_dropped": n_dup,
        "n_prev": len(prev),
        "n_t": len(cur),
        "n_paired": len(paired),
        "n_cross_cz_movers": int((~paired["same_cz"]).sum()),
    }
    return prev, cur, paired, report, info


def load_inputs(panel_dir: str | Path, cfg: RunConfig) -> PreparedInputs:
    """Read a raw panel directory (panel.csv, cz.csv, cpi.csv) or a prepared one (paired.csv, cz.csv)."""
    d = Path(panel_dir)
    if not d.is_dir():
        raise DataError(f"panel directory not found: {d}")
    with staged("load"):
        cz = load_cz_table(d / "cz.csv")
    if (d / "paired.csv").is_file():
        with staged("load"):
            paired = pd.read_csv(d / "paired.csv")
            info = json.loads((d / "prepare_info.json").read_text()) if (d / "prepare_info.json").is_file() else {}
        flows = self_flow_rates(*_cross_sections_from_pairs(paired))
        report = None
        if (d / "filter_report.csv").is_file():
            fr = pd.read_csv(d / "filter_report.csv")
            counts = dict(zip(fr["rule"], fr["count"]))
            report = FilterReport(int(counts.pop("n_in")), {k: int(v) for k, v in counts.items() if k != "n_out"})
    else:
        with staged("load"):
            records, load_report = load_panel(d / "panel.csv", error_budget=cfg.prepare.error_budget)
            cpi = load_cpi(d / "cpi.csv")
        with staged("prepare"):
            prev, cur, paired, report, info = prepare_records(records, cz, cpi, cfg)
        info["parse_errors"] = load_report.n_errors
        flows = self_flow_rates(prev, cur)
    with staged("prepare"):
        prepared = prepare_paired_panel(paired, residualize=cfg.prepare.residualize)
    return PreparedInputs(prepared, cz, flows, report, info)


def _cross_sections_from_pairs(paired: pd.DataFrame) -> tuple[pd.DataFrame, pd.DataFrame]:
    prev = pd.DataFrame(
        {"worker_id": paired["worker_id"], "firm_id": paired["firm_prev"], "establishment_id": paired["establishment_prev"], "occ1": paired["occ_prev"]}
    )
    cur = pd.DataFrame(
        {"worker_id": paired["worker_id"], "firm_id": paired["firm_t"], "establishment_id": paired["establishment_t"], "occ1": paired["occ_t"]}
    )
    return prev, cur


PAIRED_COLUMNS = [
    "worker_id", "cz_id", "cz_prev", "establishment_prev", "occ_prev", "firm_prev", "establishment_t", "occ_t",
    "firm_t", "age", "gender", "wage_prev", "wage_t", "team_prev", "team_t", "firm_key_prev", "is_ee", "same_cz",
    "log_population",
]


def cmd_prepare(cfg: RunConfig, panel_dir: str | Path, out: str | Path) -> Path:
    d = Path(panel_dir)
    with staged("load"):
        cz = load_cz_table(d / "cz.csv")
        records, load_report = load_panel(d / "panel.csv", error_budget=cfg.prepare.error_budget)
        cpi = load_cpi(d / "cpi.csv")
    with staged("prepare"):
        prev, cur, paired, report, info = prepare_records(records, cz, cpi, cfg)
    info["parse_errors"] = load_report.n_errors
    with OutputDir(out) as tmp:
        write_csv(paired[PAIRED_COLUMNS], tmp / "paired.csv")
        write_csv(cz.reset_index()[["cz_id", "population"]], tmp / "cz.csv")
        write_csv(report.to_frame(), tmp / "filter_report.csv")
        write_json(info, tmp / "prepare_info.json")
        write_json({"version": __version__, "config": cfg.echo(), "residualization": RESIDUALIZATION}, tmp / "run_metadata.json")
    return Path(out)


# --------------------------------------------------------------------------- decompose


def selected_specs(cfg: RunConfig, only: str | None) -> list[SpecId]:
    if only:
        return [SpecId.parse(only)]
    d = cfg.decompose
    return spec_grid([c for c in d.items("controls") if c != "moments"], d.items("dvs"), d.items("samples"))


def cmd_decompose(cfg: RunConfig, panel_dir: str | Path, out: str | Path, only: str | None = None) -> Path:
    inputs = load_inputs(panel_dir, cfg)
    d = cfg.decompose
    options = StageOptions(tol=d.tol, max_iter=d.max_iter, coworker_singletons=d.coworker_singletons)
    specs = selected_specs(cfg, only)
    pp, cz = inputs.prepared, inputs.cz_table

    with staged("first_stage"):
        results = run_grid(pp, specs, cz, options, threads=cfg.run.threads)
    with staged("report"):
        report = build_report(results)

    with OutputDir(out) as tmp:
        for (dv, sample), tab in report.panel_a.items():
            write_csv(tab, tmp / f"panel_a_{dv}_{sample}.csv")
        for (dv, sample), tab in report.panel_b.items():
            write_csv(tab, tmp / f"panel_b_{dv}_{sample}.csv")
        conv = []
        for spec, cell in results.items():
            write_csv(bin_fe_by_population(cell.psi, cz, d.n_bins), tmp / f"fe_bins_{spec.name}.csv")
            write_csv(cell.first.fe_values["cz_id"].rename(columns={"level": "cz_id"}), tmp / f"cz_effects_{spec.name}.csv")
            r = cell.first
            conv.append(
                {
                    "spec": spec.name,
                    "n_obs": r.n_obs,
                    "n_iterations": r.n_iterations,
                    "n_components": r.n_components,
                    "n_singletons": r.n_singletons,
                    "dof_k": r.dof_k,
                    "dropped": ";".join(r.dropped),
                }
            )
        write_csv(pd.DataFrame(conv), tmp / "convergence_log.csv")

        if only is None:
            with staged("firm_fe_projection"):
                rows = []
                for spec, cell in results.items():
                    if spec.controls.endswith("firm_fe") and spec.sample == "all" and spec.dv == "level":
                        mu = cell.first.fe_values["firm_key_prev"]
                        sample = pp.data.loc[pp.data["same_cz"].to_numpy(dtype=bool)]
                        res, _ = project_firm_fes(mu, sample, cz)
                        rows.append({"source_spec": spec.name, **asdict(res)})
                if rows:
                    write_csv(pd.DataFrame(rows), tmp / "firm_fe_projection.csv")
            with staged("mobility"):
                ee_rows = [
                    ee_regression(pp.data).as_row("ee_1"),
                    ee_regression(pp.data, include_lagged_wage=True).as_row("ee_2"),
                ]
                if d.ee_fixed_effects != "none":
                    ee_rows.append(
                        ee_regression(pp.data, include_lagged_wage=True, fixed_effects=d.ee_fixed_effects).as_row(
                            f"ee_2_{d.ee_fixed_effects}_fe"
                        )
                    )
                write_csv(pd.DataFrame(ee_rows), tmp / "ee_regressions.csv")
                write_csv(inputs.flows, tmp / "self_flow_rates.csv")
            if d.moments or "moments" in d.items("controls"):
                with staged("moments"):
                    write_csv(_moments_table(pp, cz, options), tmp / "moments_level_all.csv")
        if inputs.filter_report is not None:
            write_csv(inputs.filter_report.to_frame(), tmp / "filter_report.csv")

        write_json(_metadata(cfg, inputs, specs, only), tmp / "run_metadata.json")
        (tmp / "summary.txt").write_text(_summary(report, results), encoding="utf-8")
    return Path(out)


def _moments_table(pp: PreparedPanel, cz: pd.DataFrame, options: StageOptions) -> pd.DataFrame:
    rows = []
    for stage in range(1, N_MOMENT_STAGES + 1):
        r = run_moments_specification(pp, stage, "level", "all", options)
        s = run_second_stage(cz_effects(r), cz)
        rows.append({"stage": stage, "alpha": s.alpha, "se_alpha": s.se_alpha, "r2": s.r2, "n_covariates": len(r.names), "dropped": ";".join(r.dropped)})
    out = pd.DataFrame(rows)
    out["alpha_change_pct"] = 100.0 * (out["alpha"] / out["alpha"].iloc[0] - 1.0)
    return out


def _metadata(cfg: RunConfig, inputs: PreparedInputs, specs, only) -> dict:
    return {
        "version": __version__,
        "config": cfg.echo(),
        "only": only,
        "specs": [s.name for s in specs],
        "seed": cfg.run.seed,
        "prepare": inputs.info,
        "counters": inputs.prepared.counters,
        "tolerances": {"demeaning_tol": cfg.decompose.tol, "max_iter": cfg.decompose.max_iter, "direct_max_levels": fe.DIRECT_MAX_LEVELS},
        "normalizations": {
            "two_way_fixed_effects": fe.NORMALIZATION,
            "coworker_stats": inputs.prepared.metadata.get("coworker_normalization"),
            "coworker_singletons": cfg.decompose.coworker_singletons,
            "percentiles": f"nearest-rank, p in {list(PERCENTILES)}",
        },
        "residualization": RESIDUALIZATION,
        "inference": {
            "first_stage": "CR1 clustered by cz_id; k = covariates + absorbed levels - connected components",
            "second_stage": "unweighted CZ-level OLS, HC1 robust standard errors",
            "ee": "linear probability model, CR1 clustered by cz_id",
        },
        "fe_bins": "equal-count bins of CZs sorted by log population",
        "sample": "pairs with the same CZ in both years; stayers additionally keep their lagged team",
    }


def _summary(report, results) -> str:
    lines = [f"urbanwage {__version__}", ""]
    for (dv, sample), b in report.panel_b.items():
        lines.append(f"== dv={dv} sample={sample}")
        a = report.panel_a[(dv, sample)]
        for _, row in b.iterrows():
            col = a.loc[a["column"] == row["column"]]
            coefs = ", ".join(
                f"{t} {e:.4f} ({s:.4f})" for t, e, s in zip(col["term"], col["estimate"], col["se_clustered"]) if not np.isnan(s)
            )
            change = row.get("alpha_change_pct", np.nan)
            ch = "" if pd.isna(change) else f"  change {round_half_away(change, 1):.1f}%"
            lines.append(
                f"({int(row['column'])}) {row['spec']}: alpha {row['alpha']:.5f} ({row['se_alpha']:.5f}), R2 {row['r2']:.4f}{ch}"
            )
            if coefs:
                lines.append(f"    {coefs}")
        lines.append("")
    return "\n".join(lines)
