from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from urbanwage.errors import DataError, EstimationError
from urbanwage.mobility import ee_regression, movers, self_flow_rates, stayer_filter
from urbanwage.verify import PLANTED, synthetic_prepared


def toy_paired(n=10, n_movers=4, n_cz=3, seed=0):
    rng = np.random.default_rng(seed)
    cz = np.arange(n) % n_cz + 1
    return pd.DataFrame(
        {
            "worker_id": np.arange(n),
            "cz_id": cz,
            "log_population": np.log(1000.0 * cz),
            "is_ee": np.arange(n) < n_movers,
            "wage_prev": rng.lognormal(2.5, 0.3, n),
            "firm_key_prev": np.arange(n) % 4 * 10 + 1,
        }
    )


@pytest.fixture(scope="module")
def planted():
    return synthetic_prepared(PLANTED.replace(n_cz=100, n_workers=150_000, seed=41))


def test_stayers_and_movers_partition():
    p = toy_paired()
    stay, n = stayer_filter(p)
    mv = movers(p)
    assert n == 6 and len(mv) == 4
    assert not stay["is_ee"].any() and mv["is_ee"].all()
    assert sorted(stay.index.tolist() + mv.index.tolist()) == list(p.index)


def test_empty_stayers_warns():
    with pytest.warns(UserWarning):
        _, n = stayer_filter(toy_paired(n_movers=10))
    assert n == 0


def test_no_moves_gives_zero_slope():
    p = toy_paired(n=30, n_movers=0)
    r = ee_regression(p)
    assert r.alpha_pop == 0.0 and r.r2 == 0.0 and r.n_clusters == 3


def test_single_cz_is_an_error():
    with pytest.raises(EstimationError):
        ee_regression(toy_paired(n_cz=1))


def test_missing_log_population():
    with pytest.raises(DataError):
        ee_regression(toy_paired().drop(columns="log_population"))


def test_fixed_effect_variants(planted):
    _, pp = planted
    cz = ee_regression(pp.data, include_lagged_wage=True, fixed_effects="cz")
    assert np.isnan(cz.alpha_pop) and np.isfinite(cz.beta_wage) and cz.fixed_effects == "cz"
    firm = ee_regression(pp.data, fixed_effects="firm")
    assert np.isfinite(firm.alpha_pop) and np.isnan(firm.alpha0)
    with pytest.raises(EstimationError):
        ee_regression(pp.data, fixed_effects="cz")


def test_planted_slope_and_null_wage_effect(planted):
    _, pp = planted
    r1 = ee_regression(pp.data)
    assert abs(r1.alpha_pop - 0.0296) <= 2 * r1.se_alpha_pop
    r2 = ee_regression(pp.data, include_lagged_wage=True)
    assert abs(r2.beta_wage) <= 2 * r2.se_beta_wage
    assert r1.n_obs == len(pp.data)


def cross_sections(n=50, seed=0):
    rng = np.random.default_rng(seed)
    prev = pd.DataFrame(
        {"worker_id": np.arange(n), "firm_id": rng.integers(1, 5, n), "establishment_id": rng.integers(1, 9, n), "occ1": rng.integers(2, 7, n)}
    )
    return prev


def test_self_flow_frozen_panel():
    prev = cross_sections()
    tab = self_flow_rates(prev, prev.copy())
    assert tab["grouping"].tolist() == ["occ1", "firm", "establishment", "establishment_x_occ1"]
    assert (tab["share_pct"] == 100.0).all()


def test_self_flow_nesting():
    prev = cross_sections(seed=1)
    cur = cross_sections(seed=2)
    tab = self_flow_rates(prev, cur).set_index("grouping")["share_pct"]
    assert ((tab >= 0) & (tab <= 100)).all()
    assert tab["establishment_x_occ1"] <= min(tab["establishment"], tab["occ1"])


def test_self_flow_counts_linked_workers_only():
    prev = cross_sections(n=10)
    cur = prev.iloc[:6].copy()
    cur.loc[0, "occ1"] = 9
    tab = self_flow_rates(prev, cur).set_index("grouping")
    assert tab.loc["occ1", "n_linked"] == 6 and tab.loc["occ1", "n_same"] == 5
