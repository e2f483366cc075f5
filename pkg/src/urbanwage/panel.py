"""Worker-year panel: ingestion, sample filters, deflation, pairing, residualization.

Tables are pandas frames. A cross-section has one row per worker-year with the
columns in ``REQUIRED_COLUMNS``; a paired panel has one row per worker observed
in both years (see ``build_paired_panel``).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np
import pandas as pd

from .errors import DataError

log = logging.getLogger(__name__)

ID_COLUMNS = ("worker_id", "firm_id", "establishment_id", "cz_id")
INT_COLUMNS = ("worker_id", "year", "firm_id", "establishment_id", "occ1", "cz_id", "age", "gender")
FLOAT_COLUMNS = ("gross_annual_wage", "hours")
REQUIRED_COLUMNS = (
    "worker_id",
    "year",
    "firm_id",
    "establishment_id",
    "occ1",
    "cz_id",
    "gross_annual_wage",
    "hours",
    "age",
    "gender",
)
OPTIONAL_COLUMNS = ("hourly_wage",)
VALID_OCC1 = (1, 2, 3, 4, 5, 6, 9)


@dataclass(frozen=True)
class PanelRecord:
    worker_id: int
    year: int
    firm_id: int
    establishment_id: int
    occ1: int
    cz_id: int
    gross_annual_wage: float
    hours: float
    age: int
    gender: int
    hourly_wage: float | None = None


def records_to_frame(records: Iterable[PanelRecord]) -> pd.DataFrame:
    rows = [asdict(r) for r in records]
    df = pd.DataFrame(rows, columns=[*REQUIRED_COLUMNS, "hourly_wage"])
    df["hourly_wage"] = df["hourly_wage"].astype(float)
    return df


def iter_records(df: pd.DataFrame) -> Iterable[PanelRecord]:
    has_hourly = "hourly_wage" in df.columns
    for row in df.itertuples(index=False):
        values = {c: getattr(row, c) for c in REQUIRED_COLUMNS}
        hw = getattr(row, "hourly_wage") if has_hourly else None
        yield PanelRecord(**values, hourly_wage=None if hw is None or pd.isna(hw) else float(hw))


class TeamKey(NamedTuple):
    """Establishment x 1-digit occupation."""

    establishment_id: int
    occ1: int

    def encode(self) -> int:
        return encode_key(self.establishment_id, self.occ1)


class FirmKey(NamedTuple):
    """Employer x 1-digit occupation; the unit of the lagged firm effect."""

    firm_id: int
    occ1: int

    def encode(self) -> int:
        return encode_key(self.firm_id, self.occ1)


def encode_key(unit_id, occ1):
    """Pack (unit id, occ1) into one integer: ``unit_id * 10 + occ1``."""
    return np.asarray(unit_id, dtype=np.int64) * 10 + np.asarray(occ1, dtype=np.int64)


def decode_key(code) -> tuple[np.ndarray, np.ndarray]:
    code = np.asarray(code, dtype=np.int64)
    return code // 10, code % 10


# --------------------------------------------------------------------------- ingestion


@dataclass
class LoadReport:
    n_rows: int = 0
    n_loaded: int = 0
    parse_errors: dict[str, int] = field(default_factory=dict)
    bad_lines: list[int] = field(default_factory=list)

    @property
    def n_errors(self) -> int:
        return self.n_rows - self.n_loaded


def _read_delimited(path: Path, what: str) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{what} file not found: {path}")
    return pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""], encoding="utf-8")


def load_panel(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    error_budget: int = 0,
) -> tuple[pd.DataFrame, LoadReport]:
    """Read a comma-delimited panel with a header row.

    ``schema`` maps canonical column names to the names used in the file. Empty
    fields load as missing (the sample filters drop them); non-empty fields that
    do not parse are parse errors. Rows with parse errors are dropped and reported,
    and more than ``error_budget`` of them is fatal.
    """
    raw = _read_delimited(path, "panel")
    rename = {v: k for k, v in (schema or {}).items()}
    raw = raw.rename(columns=rename)
    missing = [c for c in REQUIRED_COLUMNS if c not in raw.columns]
    if missing:
        raise DataError(f"{path}: missing required column(s) {', '.join(missing)}")

    report = LoadReport(n_rows=len(raw))
    out = {}
    bad_any = np.zeros(len(raw), dtype=bool)
    for col in [*REQUIRED_COLUMNS, *[c for c in OPTIONAL_COLUMNS if c in raw.columns]]:
        text = raw[col].str.strip()
        values = pd.to_numeric(text, errors="coerce")
        bad = values.isna().to_numpy() & text.notna().to_numpy()
        if col in INT_COLUMNS:
            v = values.to_numpy(dtype=float)
            frac = np.isfinite(v) & (np.floor(v) != v)
            bad |= frac
            values = values.where(~frac)
        if bad.any():
            report.parse_errors[col] = int(bad.sum())
        bad_any |= bad
        out[col] = values

    df = pd.DataFrame(out)
    for col in INT_COLUMNS:
        df[col] = df[col].astype("Int64")
    for col in FLOAT_COLUMNS:
        df[col] = df[col].astype(float)

    if bad_any.any():
        rows = np.flatnonzero(bad_any)
        report.bad_lines = [int(r) + 2 for r in rows[:100]]  # header is line 1
        if rows.size > error_budget:
            first = int(rows[0])
            cols = [c for c in out if _bad_cell(raw[c].iloc[first])]
            raise DataError(
                f"{path}: {rows.size} row(s) with unparseable fields exceed the error budget "
                f"({error_budget}); first at line {first + 2} (data row {first}), column(s) {', '.join(cols)}"
            )
        log.warning("%s: dropped %d unparseable row(s)", path, rows.size)
        df = df.loc[~bad_any].reset_index(drop=True)
    report.n_loaded = len(df)
    return df, report


def _bad_cell(text) -> bool:
    if text is None or (isinstance(text, float) and np.isnan(text)):
        return False
    try:
        float(str(text).strip())
    except ValueError:
        return True
    return False


def make_cz_table(cz_id, population) -> pd.DataFrame:
    """Commuting-zone table indexed by ``cz_id`` with population and its log."""
    cz_id = np.asarray(cz_id, dtype=np.int64)
    population = np.asarray(population, dtype=np.float64)
    if cz_id.shape != population.shape:
        raise DataError("cz_id and population must align")
    if np.unique(cz_id).size != cz_id.size:
        raise DataError("duplicate cz_id in commuting-zone table")
    if not np.all(population > 0):
        raise DataError("commuting-zone population must be positive")
    return pd.DataFrame(
        {"population": population, "log_population": np.log(population)},
        index=pd.Index(cz_id, name="cz_id"),
    )


def load_cz_table(path: str | Path) -> pd.DataFrame:
    raw = _read_delimited(path, "commuting-zone")
    if not {"cz_id", "population"} <= set(raw.columns):
        raise DataError(f"{path}: expected columns cz_id,population")
    try:
        return make_cz_table(raw["cz_id"].astype(np.int64), raw["population"].astype(float))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def load_cpi(path: str | Path) -> dict[int, float]:
    raw = _read_delimited(path, "CPI")
    if not {"year", "index"} <= set(raw.columns):
        raise DataError(f"{path}: expected columns year,index")
    try:
        return {int(y): float(v) for y, v in zip(raw["year"], raw["index"])}
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------- filters


@dataclass(frozen=True)
class FilterConfig:
    min_age: int = 18
    max_age: int = 65
    min_annual_wage: float = 100.0
    required: tuple[str, ...] = (
        "worker_id",
        "year",
        "firm_id",
        "establishment_id",
        "occ1",
        "gross_annual_wage",
        "hours",
        "age",
        "gender",
    )
    valid_occ1: tuple[int, ...] = VALID_OCC1


@dataclass
class FilterReport:
    """Rows dropped per rule. A row failing several rules counts under the first."""

    n_in: int = 0
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def n_dropped(self) -> int:
        return sum(self.counts.values())

    @property
    def n_out(self) -> int:
        return self.n_in - self.n_dropped

    def merge(self, other: FilterReport) -> FilterReport:
        counts = dict(self.counts)
        for k, v in other.counts.items():
            counts[k] = counts.get(k, 0) + v
        return FilterReport(self.n_in + other.n_in, counts)

    def to_frame(self) -> pd.DataFrame:
        rows = [("n_in", self.n_in), *self.counts.items(), ("n_out", self.n_out)]
        return pd.DataFrame(rows, columns=["rule", "count"])


FILTER_RULES = ("missing_fields", "invalid_occ1", "nonpositive_hours", "age", "wage_floor", "missing_cz")


def apply_sample_filters(
    df: pd.DataFrame,
    config: FilterConfig = FilterConfig(),
    cz_table: pd.DataFrame | None = None,
) -> tuple[pd.DataFrame, FilterReport]:
    """Drop rows outside the estimation sample.

    The wage floor applies to the nominal annual wage. There is no upper trim.
    With ``cz_table`` given, rows whose commuting zone is absent from it count as
    ``missing_cz`` like rows with no commuting zone at all.
    """
    keep = np.ones(len(df), dtype=bool)
    report = FilterReport(n_in=len(df))

    def rule(name, failing):
        nonlocal keep
        failing = np.asarray(failing, dtype=bool)
        hit = keep & failing
        report.counts[name] = int(hit.sum())
        keep &= ~failing

    rule("missing_fields", df[list(config.required)].isna().any(axis=1).to_numpy())
    occ = df["occ1"].to_numpy(dtype=float, na_value=np.nan)
    rule("invalid_occ1", ~np.isin(occ, config.valid_occ1))
    hours = df["hours"].to_numpy(dtype=float, na_value=np.nan)
    rule("nonpositive_hours", ~(hours > 0))
    age = df["age"].to_numpy(dtype=float, na_value=np.nan)
    rule("age", ~((age >= config.min_age) & (age <= config.max_age)))
    wage = df["gross_annual_wage"].to_numpy(dtype=float, na_value=np.nan)
    rule("wage_floor", ~(wage >= config.min_annual_wage))
    cz = df["cz_id"]
    no_cz = cz.isna().to_numpy()
    if cz_table is not None:
        no_cz |= ~cz.isin(cz_table.index).to_numpy()
    rule("missing_cz", no_cz)

    out = df.loc[keep]
    if not out.empty:
        out = out.astype({c: np.int64 for c in INT_COLUMNS})
    return out, report


def deduplicate_jobs(df: pd.DataFrame) -> tuple[pd.DataFrame, int]:
    """Keep one job per worker-year: most hours, then highest gross wage, then lowest establishment id."""
    ordered = df.sort_values(
        ["worker_id", "year", "hours", "gross_annual_wage", "establishment_id"],
        ascending=[True, True, False, False, True],
        kind="mergesort",
    )
    kept = ordered.drop_duplicates(["worker_id", "year"], keep="first").sort_index()
    return kept, len(df) - len(kept)


def deflate_wages(df: pd.DataFrame, cpi: Mapping[int, float], base_year: int) -> pd.DataFrame:
    """Real hourly wage: gross annual wage in base-year prices divided by hours."""
    if base_year not in cpi:
        raise DataError(f"base year {base_year} missing from CPI series")
    years = pd.unique(df["year"])
    absent = sorted(int(y) for y in years if int(y) not in cpi)
    if absent:
        raise DataError(f"CPI series has no index for year(s) {absent}")
    hours = df["hours"].to_numpy(dtype=float)
    if np.any(hours <= 0):
        raise DataError("hours must be positive before deflation")
    factor = df["year"].map(lambda y: cpi[base_year] / cpi[int(y)]).to_numpy(dtype=float)
    out = df.copy()
    out["hourly_wage"] = df["gross_annual_wage"].to_numpy(dtype=float) * factor / hours
    return out


# --------------------------------------------------------------------------- pairing


def build_paired_panel(prev: pd.DataFrame, cur: pd.DataFrame, cz_table: pd.DataFrame | None = None) -> pd.DataFrame:
    """Link workers present in both cross-sections.

    Keys at t-1 define the lagged team and firm. ``is_ee`` flags a change of
    establishment or 1-digit occupation. Output is sorted by worker id.
    """
    for name, frame in (("t-1", prev), ("t", cur)):
        dup = frame["worker_id"].duplicated()
        if dup.any():
            wid = frame.loc[dup, "worker_id"].iloc[0]
            raise DataError(f"duplicate worker_id {wid} in the {name} cross-section after deduplication")
        if "hourly_wage" not in frame.columns:
            raise DataError(f"{name} cross-section has no hourly_wage; deflate first")

    cols = ["worker_id", "firm_id", "establishment_id", "occ1", "cz_id", "hourly_wage", "age", "gender"]
    m = pd.merge(prev[cols], cur[cols], on="worker_id", suffixes=("_prev", "_t"), how="inner", sort=True)
    out = pd.DataFrame(
        {
            "worker_id": m["worker_id"].to_numpy(np.int64),
            "cz_id": m["cz_id_t"].to_numpy(np.int64),
            "cz_prev": m["cz_id_prev"].to_numpy(np.int64),
            "establishment_prev": m["establishment_id_prev"].to_numpy(np.int64),
            "occ_prev": m["occ1_prev"].to_numpy(np.int64),
            "firm_prev": m["firm_id_prev"].to_numpy(np.int64),
            "establishment_t": m["establishment_id_t"].to_numpy(np.int64),
            "occ_t": m["occ1_t"].to_numpy(np.int64),
            "firm_t": m["firm_id_t"].to_numpy(np.int64),
            "age": m["age_t"].to_numpy(np.int64),
            "gender": m["gender_t"].to_numpy(np.int64),
            "wage_prev": m["hourly_wage_prev"].to_numpy(float),
            "wage_t": m["hourly_wage_t"].to_numpy(float),
        }
    )
    out["team_prev"] = encode_key(out["establishment_prev"], out["occ_prev"])
    out["team_t"] = encode_key(out["establishment_t"], out["occ_t"])
    out["firm_key_prev"] = encode_key(out["firm_prev"], out["occ_prev"])
    out["is_ee"] = out["team_prev"].to_numpy() != out["team_t"].to_numpy()
    out["same_cz"] = out["cz_id"].to_numpy() == out["cz_prev"].to_numpy()
    if cz_table is not None:
        out["log_population"] = cz_table["log_population"].reindex(out["cz_id"]).to_numpy()
    return out


# --------------------------------------------------------------------------- residualization

RESIDUALIZATION = "OLS on intercept, age, age^2, gender indicator; pooled over the paired sample"


def _control_matrix(age: np.ndarray, gender: np.ndarray) -> tuple[np.ndarray, list[str]]:
    a = age.astype(float) - age.mean()
    levels = np.unique(gender)
    g = (gender == levels[-1]).astype(float) if levels.size > 1 else np.zeros(age.size)
    return np.column_stack([np.ones(age.size), a, a * a, g]), ["intercept", "age", "age_sq", "gender"]


def _independent_columns(X: np.ndarray, names: list[str], rtol: float = 1e-10) -> list[int]:
    kept: list[int] = []
    for k in range(X.shape[1]):
        col = X[:, k]
        norm = np.linalg.norm(col)
        if norm == 0:
            continue
        if kept:
            Q, _ = np.linalg.qr(X[:, kept])
            resid = col - Q @ (Q.T @ col)
            if np.linalg.norm(resid) <= rtol * norm:
                continue
        kept.append(k)
    return kept


def residualize_wages(
    paired: pd.DataFrame,
    columns: Iterable[str] = ("wage_t", "wage_prev"),
) -> pd.DataFrame:
    """Replace each wage column by its residual on age, age squared and gender.

    One regression per column, fit on the whole frame. The raw values are kept as
    ``<column>_raw``. Degenerate controls (a single gender, constant age) are
    dropped with a warning.
    """
    if paired.empty:
        raise DataError("cannot residualize an empty sample")
    X, names = _control_matrix(paired["age"].to_numpy(), paired["gender"].to_numpy())
    kept = _independent_columns(X, names)
    dropped = [names[k] for k in range(len(names)) if k not in kept]
    if dropped:
        warnings.warn(f"residualization: dropping degenerate control(s) {dropped}", stacklevel=2)
    X = X[:, kept]
    out = paired.copy()
    for col in columns:
        y = paired[col].to_numpy(dtype=float)
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        out[f"{col}_raw"] = y
        out[col] = y - X @ beta
    out.attrs["residualization"] = {"controls": [names[k] for k in kept], "dropped": dropped, "form": RESIDUALIZATION}
    return out
