"""Synthetic two-period matched employer-employee panels with planted parameters.

Generation is per commuting zone. Each CZ draws from its own seed stream
(``SeedSequence(seed, spawn_key=(cz_rank, k))``), so results do not depend on
processing order or thread count. Shared objects (national firm effects, CZ
growth effects) come from one global stream.

Period t wage for worker i in lagged team k, lagged firm key j, CZ c:

    w_t = nu * w_prev + psi_c + mu_j + theta . y_i + ee_wage_gain * EE_i + e_i

with the coworker terms y computed by ``coworkers.panel_deviation_stats`` on the
t-1 team wages (divisor N - 1).
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.stats import norm

from .coworkers import panel_deviation_stats
from .errors import ConfigError
from .panel import VALID_OCC1, encode_key, make_cz_table

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


@dataclass(frozen=True)
class DgpParams:
    # city system
    n_cz: int = 304
    zipf_exponent: float = 1.0
    max_population: float = 5.0e6
    # employers
    n_workers: int = 520_000
    teams_per_cz_scale: float = 1.0
    team_size_mean: float = 4.66
    team_size_sigma: float = 1.5
    team_size_cap: int = 5000
    occ_per_establishment_p: float = 0.34
    n_national_firms: int = 25
    national_firm_share: float = 0.05
    local_firm_merge_prob: float = 0.1
    # wages
    base_wage: float = 15.0
    base_wage_sd: float = 0.35
    team_wage_sd: float = 0.2
    base_wage_pop_tilt: float = 0.0
    nu: float = 0.8
    psi_level: float = 3.0
    psi_pop_slope: float = 0.0
    psi_sd: float = 0.05
    firm_fe_pop_slope: float = 0.0496
    firm_fe_sd: float = 0.3
    theta_plus_1: float = 0.14
    theta_minus_1: float = 0.13
    theta_plus_2: float = 0.0
    theta_minus_2: float = -0.0001
    ee_wage_gain: float = 0.0
    noise_sd: float = 0.5
    # mobility
    ee_intercept: float = -0.13
    ee_pop_slope: float = 0.0296
    # record layout
    year_prev: int = 2014
    cpi_prev: float = 99.6
    cpi_t: float = 100.0
    hours_min: int = 1000
    hours_max: int = 1820
    seed: int = 20240611

    def validate(self) -> None:
        if self.n_cz < 1:
            raise ConfigError("n_cz must be at least 1")
        if self.zipf_exponent <= 0:
            raise ConfigError("zipf_exponent must be positive")
        if self.n_workers <= 0:
            raise ConfigError("n_workers must be positive")
        if self.teams_per_cz_scale <= 0:
            raise ConfigError("teams_per_cz_scale must be positive")
        if not self.team_size_mean > 1.0:
            raise ConfigError("team_size_mean must exceed 1")
        if self.team_size_sigma <= 0 or self.team_size_cap < 2:
            raise ConfigError("team_size_sigma must be positive and team_size_cap at least 2")
        if not 0 <= self.national_firm_share < 1:
            raise ConfigError("national_firm_share must lie in [0, 1)")
        if self.national_firm_share > 0 and self.n_national_firms < 1:
            raise ConfigError("national_firm_share > 0 needs n_national_firms >= 1")
        if not 0 <= self.local_firm_merge_prob < 1:
            raise ConfigError("local_firm_merge_prob must lie in [0, 1)")
        if not 0 <= self.occ_per_establishment_p <= 1:
            raise ConfigError("occ_per_establishment_p must lie in [0, 1]")
        if min(self.noise_sd, self.base_wage_sd, self.team_wage_sd, self.psi_sd, self.firm_fe_sd) < 0:
            raise ConfigError("standard deviations must be nonnegative")
        if self.base_wage <= 0 or self.max_population <= 0:
            raise ConfigError("base_wage and max_population must be positive")
        if not 0 < self.hours_min <= self.hours_max:
            raise ConfigError("need 0 < hours_min <= hours_max")
        if self.cpi_prev <= 0 or self.cpi_t <= 0:
            raise ConfigError("CPI values must be positive")

    def replace(self, **changes) -> DgpParams:
        return DgpParams(**{**asdict(self), **changes})

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}


# --------------------------------------------------------------------------- city system


def sample_city_system(params: DgpParams, seed: int | None = None) -> pd.DataFrame:
    """Rank-size populations ``max_population * r**(-1/zipf_exponent)``; ids by rank.

    Deterministic, so ``seed`` is accepted only for interface symmetry.
    """
    if params.n_cz < 1:
        raise ConfigError("n_cz must be at least 1")
    rank = np.arange(1, params.n_cz + 1, dtype=float)
    pop = params.max_population * rank ** (-1.0 / params.zipf_exponent)
    return make_cz_table(np.arange(1, params.n_cz + 1), pop)


# --------------------------------------------------------------------------- employers


def team_size_location(mean: float, sigma: float, cap: int) -> float:
    """Location of the lognormal whose ceiling (capped) has the requested mean."""
    k = np.arange(1, cap, dtype=float)
    lk = np.log(k)

    def excess(mu):
        return 1.0 + norm.sf((lk - mu) / sigma).sum() - mean

    return brentq(excess, -20.0, np.log(cap) + 5 * sigma, xtol=1e-14)


def _stream(seed: int, cz_rank: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(cz_rank, k)))


def _draw_sizes(rng, n, mu, params: DgpParams) -> np.ndarray:
    raw = np.ceil(np.exp(mu + params.team_size_sigma * rng.standard_normal(n)))
    return np.clip(raw, 1, params.team_size_cap).astype(np.int64)


@dataclass
class _CzEmployers:
    occ1: np.ndarray  # per team
    est_local: np.ndarray  # establishment index within CZ
    national: np.ndarray  # per establishment
    firm_local: np.ndarray  # per establishment: national firm index or local firm index
    size: np.ndarray  # per team


def _cz_employers(rng, n_teams: int, mu: float, params: DgpParams) -> _CzEmployers:
    occ_codes = np.asarray(VALID_OCC1)
    per_est = 1 + rng.binomial(len(occ_codes) - 1, params.occ_per_establishment_p, size=n_teams)
    n_est = int(np.searchsorted(np.cumsum(per_est), n_teams) + 1)
    per_est = per_est[:n_est].copy()
    per_est[-1] -= per_est.sum() - n_teams
    keys = rng.random((n_est, len(occ_codes)))
    ranked = np.argsort(keys, axis=1)
    est_of_team = np.repeat(np.arange(n_est), per_est)
    slot = np.arange(n_teams) - np.repeat(np.cumsum(per_est) - per_est, per_est)
    occ = occ_codes[np.sort(np.where(np.arange(len(occ_codes)) < per_est[:, None], ranked, 99), axis=1)[est_of_team, slot]]

    national = rng.random(n_est) < params.national_firm_share
    if params.national_firm_share > 0 and not national.any():
        national[0] = True
    firm = np.empty(n_est, dtype=np.int64)
    n_nat = int(national.sum())
    firm[national] = rng.integers(0, max(params.n_national_firms, 1), size=n_nat)
    merge = rng.random(n_est - n_nat) < params.local_firm_merge_prob
    if merge.size:
        merge[0] = False
    firm[~national] = np.cumsum(~merge) - 1
    size = _draw_sizes(rng, n_teams, mu, params)
    return _CzEmployers(occ, est_of_team, national, firm, size)


def sample_employers(cz_table: pd.DataFrame, params: DgpParams, seed: int | None = None) -> pd.DataFrame:
    """One row per team: CZ, establishment, firm, occupation, size, national flag."""
    params.validate()
    seed = params.seed if seed is None else seed
    mu = team_size_location(params.team_size_mean, params.team_size_sigma, params.team_size_cap)
    counts = _teams_per_cz(cz_table, params)
    parts = []
    for rank, (cz, n_teams) in enumerate(zip(cz_table.index, counts), start=1):
        e = _cz_employers(_stream(seed, rank, 0), int(n_teams), mu, params)
        parts.append((cz, e))
    return _employer_frame(parts, params)


def _teams_per_cz(cz_table: pd.DataFrame, params: DgpParams) -> np.ndarray:
    share = cz_table["population"].to_numpy() / cz_table["population"].sum()
    raw = params.teams_per_cz_scale * params.n_workers * share / params.team_size_mean
    return np.maximum(1, np.rint(raw)).astype(np.int64)


def _employer_frame(parts, params: DgpParams) -> pd.DataFrame:
    rows = []
    est_offset = 0
    firm_offset = params.n_national_firms
    for cz, e in parts:
        est_global = est_offset + 1 + e.est_local
        nat_team = e.national[e.est_local]
        firm_team = e.firm_local[e.est_local]
        firm_id = np.where(nat_team, firm_team + 1, firm_offset + 1 + firm_team)
        rows.append(
            pd.DataFrame(
                {
                    "cz_id": np.full(e.size.size, cz, dtype=np.int64),
                    "establishment_id": est_global.astype(np.int64),
                    "occ1": e.occ1.astype(np.int64),
                    "firm_id": firm_id.astype(np.int64),
                    "national": nat_team,
                    "size": e.size,
                }
            )
        )
        est_offset += e.national.size
        n_local = int((~e.national).sum())
        firm_offset += int(e.firm_local[~e.national].max() + 1) if n_local else 0
    out = pd.concat(rows, ignore_index=True)
    out["team"] = encode_key(out["establishment_id"], out["occ1"])
    out["firm_key"] = encode_key(out["firm_id"], out["occ1"])
    return out


# --------------------------------------------------------------------------- panel


@dataclass
class GroundTruth:
    psi: pd.DataFrame  # cz_id, population, log_population, psi, ee_prob, national_share
    mu: pd.DataFrame  # firm_id, occ1, mu, national
    workers: pd.DataFrame  # per-worker generation terms
    params: DgpParams = field(default_factory=DgpParams)


@dataclass
class SyntheticPanel:
    prev: pd.DataFrame
    cur: pd.DataFrame
    cz_table: pd.DataFrame
    cpi: dict[int, float]
    teams: pd.DataFrame
    truth: GroundTruth
    report: dict

    @property
    def records(self) -> pd.DataFrame:
        return pd.concat([self.prev, self.cur], ignore_index=True)


def ee_probabilities(log_pop: np.ndarray, params: DgpParams) -> np.ndarray:
    raw = params.ee_intercept + params.ee_pop_slope * np.asarray(log_pop, dtype=float)
    if np.all((raw < 0) | (raw > 1)):
        raise ConfigError(
            f"EE probability {params.ee_intercept} + {params.ee_pop_slope} * log_pop lies outside [0, 1] for every CZ"
        )
    return np.clip(raw, 0.0, 1.0)


def _simulate_cz(rank, cz, logp, psi_c, ee_p, mu_loc, params: DgpParams, nat_mu, pbar, n_teams):
    seed = params.seed
    emp = _cz_employers(_stream(seed, rank, 0), n_teams, mu_loc, params)
    rng = _stream(seed, rank, 1)

    team_of_seat = np.repeat(np.arange(n_teams), emp.size)
    n = team_of_seat.size
    est = emp.est_local[team_of_seat]
    nat_seat = emp.national[est]
    share = nat_seat.mean()
    if share >= 0.999:
        share = params.national_firm_share
    local_slope = params.firm_fe_pop_slope / (1.0 - share)

    # firm-key effects: national ones are shared across CZs, local ones drawn here
    n_local_firms = int(emp.firm_local[~emp.national].max() + 1) if (~emp.national).any() else 0
    eta_local = rng.standard_normal((max(n_local_firms, 1), 10)) * params.firm_fe_sd
    firm_team = emp.firm_local[emp.est_local]
    nat_team = emp.national[emp.est_local]
    mu_team = np.where(
        nat_team,
        nat_mu[np.where(nat_team, firm_team, 0), emp.occ1],
        local_slope * logp + eta_local[np.where(nat_team, 0, firm_team), emp.occ1],
    )

    team_u = rng.standard_normal(n_teams)
    loc = np.log(params.base_wage) + params.base_wage_pop_tilt * (logp - pbar)
    w_prev = np.exp(loc + params.team_wage_sd * team_u[team_of_seat] + params.base_wage_sd * rng.standard_normal(n))
    age = rng.integers(18, 65, size=n)
    gender = rng.integers(1, 3, size=n)
    hours_prev = rng.integers(params.hours_min, params.hours_max + 1, size=n)
    hours_t = rng.integers(params.hours_min, params.hours_max + 1, size=n)

    ee = rng.random(n) < ee_p
    if n_teams >= 2:
        dest = rng.integers(0, n_teams - 1, size=n)
        dest += dest >= team_of_seat
    else:
        dest = team_of_seat.copy()
        ee[:] = False
    team_t = np.where(ee, dest, team_of_seat)
    noise = params.noise_sd * rng.standard_normal(n)

    stats = panel_deviation_stats(team_of_seat, w_prev)
    return dict(
        emp=emp,
        team_prev=team_of_seat,
        team_t=team_t,
        w_prev=w_prev,
        age=age,
        gender=gender,
        hours_prev=hours_prev,
        hours_t=hours_t,
        ee=ee,
        noise=noise,
        mu=mu_team[team_of_seat],
        mu_team=mu_team,
        stats=stats,
        national_share=float(nat_seat.mean()),
        eta_local=eta_local,
    )


def recompute_wages(workers: pd.DataFrame, params: DgpParams) -> np.ndarray:
    """Period-t wages from the stored generation terms (bit-identical to the panel)."""
    w = params.nu * workers["wage_prev"].to_numpy()
    w = w + workers["psi"].to_numpy()
    w = w + workers["mu"].to_numpy()
    w = w + params.theta_plus_1 * workers["y1_plus"].to_numpy()
    w = w + params.theta_minus_1 * workers["y1_minus"].to_numpy()
    w = w + params.theta_plus_2 * workers["y2_plus"].to_numpy()
    w = w + params.theta_minus_2 * workers["y2_minus"].to_numpy()
    w = w + params.ee_wage_gain * workers["ee"].to_numpy().astype(float)
    return w + workers["noise"].to_numpy()


def simulate_panel(params: DgpParams = DgpParams(), threads: int = 1) -> SyntheticPanel:
    """Draw the full two-period panel and its ground truth."""
    params.validate()
    cz = sample_city_system(params)
    logp = cz["log_population"].to_numpy()
    ee_p = ee_probabilities(logp, params)
    pbar = float(logp.mean())
    mu_loc = team_size_location(params.team_size_mean, params.team_size_sigma, params.team_size_cap)
    counts = _teams_per_cz(cz, params)

    g = _stream(params.seed, 0, 0)
    psi = params.psi_level + params.psi_pop_slope * logp + params.psi_sd * g.standard_normal(params.n_cz)
    nat_mu = g.standard_normal((max(params.n_national_firms, 1), 10)) * params.firm_fe_sd

    jobs = [(r + 1, int(c), logp[r], psi[r], ee_p[r], mu_loc, params, nat_mu, pbar, int(counts[r])) for r, c in enumerate(cz.index)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda a: _simulate_cz(*a), jobs))
    else:
        parts = [_simulate_cz(*a) for a in jobs]

    teams = _employer_frame([(j[1], p["emp"]) for j, p in zip(jobs, parts)], params)
    team_offsets = np.concatenate([[0], np.cumsum([p["emp"].size.size for p in parts])])

    wk = []
    for r, (job, p) in enumerate(zip(jobs, parts)):
        off = team_offsets[r]
        s = p["stats"]
        wk.append(
            pd.DataFrame(
                {
                    "cz_id": job[1],
                    "team_index_prev": off + p["team_prev"],
                    "team_index_t": off + p["team_t"],
                    "age": p["age"],
                    "gender": p["gender"],
                    "hours_prev": p["hours_prev"],
                    "hours_t": p["hours_t"],
                    "wage_prev": p["w_prev"],
                    "psi": psi[r],
                    "mu": p["mu"],
                    "y1_plus": s["y1_plus"].to_numpy(),
                    "y1_minus": s["y1_minus"].to_numpy(),
                    "y2_plus": s["y2_plus"].to_numpy(),
                    "y2_minus": s["y2_minus"].to_numpy(),
                    "ee_prob": ee_p[r],
                    "ee": p["ee"],
                    "noise": p["noise"],
                }
            )
        )
    workers = pd.concat(wk, ignore_index=True)
    workers.insert(0, "worker_id", np.arange(1, len(workers) + 1, dtype=np.int64))
    workers["wage_t"] = recompute_wages(workers, params)
    tp = teams.iloc[workers["team_index_prev"].to_numpy()]
    tt = teams.iloc[workers["team_index_t"].to_numpy()]
    workers["establishment_prev"] = tp["establishment_id"].to_numpy()
    workers["occ_prev"] = tp["occ1"].to_numpy()
    workers["firm_prev"] = tp["firm_id"].to_numpy()

    cpi = {params.year_prev: params.cpi_prev, params.year_prev + 1: params.cpi_t}
    prev = _records(workers, tp, params.year_prev, "hours_prev", "wage_prev", cpi, params)
    cur = _records(workers, tt, params.year_prev + 1, "hours_t", "wage_t", cpi, params, age_shift=1)

    mu_tab = (
        teams[["firm_id", "occ1", "national"]]
        .assign(mu=np.concatenate([p["mu_team"] for p in parts]))
        .drop_duplicates(["firm_id", "occ1"])
        .sort_values(["firm_id", "occ1"], kind="mergesort")
        .reset_index(drop=True)
    )
    psi_tab = cz.reset_index().assign(
        psi=psi, ee_prob=ee_p, national_share=[p["national_share"] for p in parts]
    )
    seats = len(workers)
    report = {
        "n_workers_target": params.n_workers,
        "n_workers": seats,
        "seat_worker_ratio": seats / params.n_workers,
        "n_teams": len(teams),
        "n_establishments": int(teams["establishment_id"].nunique()),
        "n_firms": int(teams["firm_id"].nunique()),
        "mean_team_size": float(teams["size"].mean()),
        "team_size_location": mu_loc,
        "ee_share": float(workers["ee"].mean()),
        "records_emitted": len(prev) + len(cur),
    }
    truth = GroundTruth(psi=psi_tab, mu=mu_tab, workers=workers, params=params)
    return SyntheticPanel(prev=prev, cur=cur, cz_table=cz, cpi=cpi, teams=teams, truth=truth, report=report)


def _records(workers, team_rows, year, hours_col, wage_col, cpi, params: DgpParams, age_shift=0) -> pd.DataFrame:
    hours = workers[hours_col].to_numpy().astype(float)
    hourly = workers[wage_col].to_numpy()
    base = cpi[params.year_prev + 1]
    return pd.DataFrame(
        {
            "worker_id": workers["worker_id"].to_numpy(),
            "year": np.full(len(workers), year, dtype=np.int64),
            "firm_id": team_rows["firm_id"].to_numpy(),
            "establishment_id": team_rows["establishment_id"].to_numpy(),
            "occ1": team_rows["occ1"].to_numpy(),
            "cz_id": team_rows["cz_id"].to_numpy(),
            "gross_annual_wage": hourly * hours * cpi[year] / base,
            "hours": hours,
            "age": workers["age"].to_numpy() + age_shift,
            "gender": workers["gender"].to_numpy(),
            "hourly_wage": hourly,
        }
    )


# --------------------------------------------------------------------------- output


def write_csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_panel(sp: SyntheticPanel, out: str | Path) -> dict[str, Path]:
    """Write panel, CZ and CPI tables, ground truth and a params echo under ``out``."""
    out = Path(out)
    gt = out / "ground_truth"
    gt.mkdir(parents=True, exist_ok=True)
    paths = {
        "panel": out / "panel.csv",
        "cz": out / "cz.csv",
        "cpi": out / "cpi.csv",
        "psi_by_cz": gt / "psi_by_cz.csv",
        "mu_by_firm": gt / "mu_by_firm.csv",
        "worker_terms": gt / "worker_terms.csv",
        "params": out / "params.json",
    }
    write_csv(sp.records, paths["panel"])
    write_csv(sp.cz_table.reset_index()[["cz_id", "population"]], paths["cz"])
    write_csv(pd.DataFrame({"year": list(sp.cpi), "index": list(sp.cpi.values())}), paths["cpi"])
    write_csv(sp.truth.psi, paths["psi_by_cz"])
    write_csv(sp.truth.mu, paths["mu_by_firm"])
    cols = [c for c in sp.truth.workers.columns if not c.startswith("team_index")]
    write_csv(sp.truth.workers[cols], paths["worker_terms"])
    echo = {"params": asdict(sp.truth.params), "report": sp.report, "base_year": sp.truth.params.year_prev + 1}
    paths["params"].write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
