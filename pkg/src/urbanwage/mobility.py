"""Job-to-job transitions: EE linear probability regressions and self-flow rates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import fe
from .decomposition import stayer_filter
from .errors import DataError, EstimationError

__all__ = ["EeRegressionResult", "ee_regression", "self_flow_rates", "stayer_filter", "movers"]

GROUPINGS = {
    "occ1": ("occ1",),
    "firm": ("firm_id",),
    "establishment": ("establishment_id",),
    "establishment_x_occ1": ("establishment_id", "occ1"),
}


@dataclass(frozen=True)
class EeRegressionResult:
    alpha0: float
    alpha_pop: float
    beta_wage: float
    se_alpha0: float
    se_alpha_pop: float
    se_beta_wage: float
    r2: float
    n_obs: int
    n_clusters: int
    fixed_effects: str

    def as_row(self, label: str) -> dict:
        return {"model": label, **self.__dict__}


def ee_regression(
    paired: pd.DataFrame,
    include_lagged_wage: bool = False,
    fixed_effects: str | None = None,
    wage_col: str = "wage_prev_raw",
) -> EeRegressionResult:
    """Linear probability model of the EE flag on log population (+ lagged hourly wage).

    SEs are clustered by CZ. ``fixed_effects`` is None (the default, no FE),
    ``"cz"`` (log population is then absorbed and ``alpha_pop`` is NaN) or
    ``"firm"`` (lagged firm key absorbed).
    """
    if "log_population" not in paired.columns:
        raise DataError("paired panel has no log_population column; join the CZ table")
    if wage_col not in paired.columns:
        wage_col = "wage_prev"
    df = paired.assign(ee=paired["is_ee"].to_numpy(dtype=float))
    cov = [] if fixed_effects == "cz" else ["log_population"]
    if include_lagged_wage:
        cov.append(wage_col)
    absorb = {None: (), "cz": ("cz_id",), "firm": ("firm_key_prev",)}[fixed_effects]
    if not cov:
        raise EstimationError("the CZ fixed-effect variant needs include_lagged_wage")
    if df["cz_id"].nunique() < 2:
        raise EstimationError("EE regression needs at least 2 commuting zones")
    res = fe.absorb_and_estimate(df, fe.RegressionSpec("ee", tuple(cov), absorb, "cz_id"), recover_fe=False)

    def pick(name):
        return (res.coef(name), res.stderr(name)) if name in res.names else (np.nan, np.nan)

    a0, se0 = pick("intercept")
    ap, sep = pick("log_population")
    bw, sew = pick(wage_col)
    return EeRegressionResult(a0, ap, bw, se0, sep, sew, res.r2, res.n_obs, res.n_clusters, fixed_effects or "none")


def self_flow_rates(prev: pd.DataFrame, cur: pd.DataFrame) -> pd.DataFrame:
    """Percent of workers linked across the two years whose unit is unchanged."""
    cols = ["worker_id", "firm_id", "establishment_id", "occ1"]
    m = pd.merge(prev[cols], cur[cols], on="worker_id", suffixes=("_prev", "_t"))
    n = len(m)
    rows = []
    for name, keys in GROUPINGS.items():
        same = np.ones(n, dtype=bool)
        for k in keys:
            same &= m[f"{k}_prev"].to_numpy() == m[f"{k}_t"].to_numpy()
        rows.append((name, 100.0 * same.mean() if n else np.nan, int(same.sum()), n))
    return pd.DataFrame(rows, columns=["grouping", "share_pct", "n_same", "n_linked"])


def movers(paired: pd.DataFrame) -> pd.DataFrame:
    return paired.loc[paired["is_ee"].to_numpy(dtype=bool)]
