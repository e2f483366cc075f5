from __future__ import annotations

import filecmp

import numpy as np
import pandas as pd
import pytest

from urbanwage.errors import ConfigError
from urbanwage.mobility import self_flow_rates
from urbanwage.panel import load_panel
from urbanwage.synthgen import (
    DgpParams,
    ee_probabilities,
    recompute_wages,
    sample_city_system,
    sample_employers,
    simulate_panel,
    team_size_location,
    write_panel,
)

SMALL = DgpParams(n_cz=40, n_workers=40_000, seed=3)


@pytest.fixture(scope="module")
def default_200k():
    return simulate_panel(DgpParams(n_workers=200_000))


# --------------------------------------------------------------------------- city system


def test_rank_size_two_cities():
    cz = sample_city_system(DgpParams(n_cz=2, zipf_exponent=1.0))
    assert cz["population"].iloc[0] / cz["population"].iloc[1] == pytest.approx(2.0, rel=1e-15)


def test_default_city_count():
    cz = sample_city_system(DgpParams())
    assert len(cz) == 304 and (cz["population"] > 0).all()
    np.testing.assert_allclose(cz["log_population"], np.log(cz["population"]), atol=1e-12)


@pytest.mark.parametrize("exponent", [0.8, 1.0, 1.3])
def test_rank_size_exponent_fit(exponent):
    cz = sample_city_system(DgpParams(n_cz=1000, zipf_exponent=exponent))
    rank = np.arange(1, 1001)
    slope = np.polyfit(np.log(rank), cz["log_population"].to_numpy(), 1)[0]
    assert abs(-1.0 / slope - exponent) <= 0.1


# --------------------------------------------------------------------------- employers


def test_mean_team_size_over_10k_teams():
    p = DgpParams(n_workers=60_000)
    teams = sample_employers(sample_city_system(p), p)
    assert len(teams) >= 10_000
    assert abs(teams["size"].mean() / 4.66 - 1) <= 0.10


def test_team_size_location_calibration():
    mu = team_size_location(4.66, 1.5, 5000)
    draws = np.clip(np.ceil(np.exp(mu + 1.5 * np.random.default_rng(0).standard_normal(2_000_000))), 1, 5000)
    assert draws.mean() == pytest.approx(4.66, rel=0.02)


def test_teams_nested_in_one_firm_and_cz():
    teams = sample_employers(sample_city_system(SMALL), SMALL)
    assert teams.groupby("team")["cz_id"].nunique().max() == 1
    assert teams.groupby("team")["firm_id"].nunique().max() == 1
    assert teams["team"].is_unique
    # team counts proportional to population
    per_cz = teams.groupby("cz_id").size()
    assert per_cz.iloc[0] > per_cz.iloc[-1]


def test_single_cz_config():
    p = DgpParams(n_cz=1, n_workers=2000, national_firm_share=0.0)
    sp = simulate_panel(p)
    assert set(sp.teams["cz_id"]) == {1}
    assert set(sp.prev["cz_id"]) == {1} and set(sp.cur["cz_id"]) == {1}


def test_seat_ratio(default_200k):
    assert 0.9 <= default_200k.report["seat_worker_ratio"] <= 1.1


# --------------------------------------------------------------------------- wages and truth


def test_identity_dgp():
    p = DgpParams(
        n_cz=20, n_workers=20_000, noise_sd=0.0, nu=1.0, psi_level=0.0, psi_sd=0.0, firm_fe_pop_slope=0.0, firm_fe_sd=0.0,
        theta_plus_1=0.0, theta_minus_1=0.0, theta_plus_2=0.0, theta_minus_2=0.0,
    )
    w = simulate_panel(p).truth.workers
    stay = ~w["ee"]
    assert np.array_equal(w.loc[stay, "wage_t"], w.loc[stay, "wage_prev"])


@pytest.mark.parametrize("noise", [0.0, 0.5])
def test_recompute_is_bit_exact(noise):
    sp = simulate_panel(SMALL.replace(noise_sd=noise))
    w = recompute_wages(sp.truth.workers, sp.truth.params)
    assert np.array_equal(w, sp.truth.workers["wage_t"].to_numpy())
    assert np.array_equal(w, sp.cur.sort_values("worker_id")["hourly_wage"].to_numpy())


def test_affine_within_cell_without_quadratic_terms():
    p = SMALL.replace(noise_sd=0.0, theta_plus_2=0.0, theta_minus_2=0.0)
    w = simulate_panel(p).truth.workers
    X = np.column_stack([w["wage_prev"], w["y1_plus"], w["y1_minus"]])
    resid = w["wage_t"].to_numpy() - X @ np.array([p.nu, p.theta_plus_1, p.theta_minus_1]) - w["ee"] * p.ee_wage_gain
    # what remains is psi + mu, constant within each (cz, firm key) cell
    key = w["cz_id"].astype(str) + "_" + w["firm_prev"].astype(str) + "_" + w["occ_prev"].astype(str)
    assert pd.Series(resid.to_numpy()).groupby(key.to_numpy()).agg(np.ptp).max() <= 1e-12


def test_generated_stats_match_kernel_on_lagged_team():
    from urbanwage.coworkers import panel_deviation_stats

    sp = simulate_panel(SMALL)
    w = sp.truth.workers
    s = panel_deviation_stats(w["team_index_prev"], w["wage_prev"])
    for c in ("y1_plus", "y1_minus", "y2_plus", "y2_minus"):
        np.testing.assert_allclose(s[c], w[c], atol=1e-10)


def test_seat_conservation():
    sp = simulate_panel(SMALL)
    assert sp.prev["worker_id"].is_unique and sp.cur["worker_id"].is_unique
    assert len(sp.prev) == len(sp.cur) == sp.report["n_workers"]
    assert sp.teams["size"].sum() == sp.report["n_workers"]


def test_firm_effect_gradient(default_200k):
    sp = default_200k
    w = sp.truth.workers
    means = w.groupby("cz_id")["mu"].mean()
    p = sp.cz_table["log_population"].reindex(means.index).to_numpy()
    X = np.column_stack([np.ones_like(p), p])
    beta, *_ = np.linalg.lstsq(X, means.to_numpy(), rcond=None)
    e = means.to_numpy() - X @ beta
    bread = np.linalg.inv(X.T @ X)
    V = bread @ (X.T * e**2) @ X @ bread * len(p) / (len(p) - 2)
    se = np.sqrt(V[1, 1])
    assert abs(beta[1] - 0.0496) <= 2 * se, (beta[1], se)


def test_ee_frequency_within_binomial_bounds(default_200k):
    w = default_200k.truth.workers
    g = w.groupby("cz_id").agg(n=("ee", "size"), rate=("ee", "mean"), p=("ee_prob", "first"))
    big = g[g["n"] >= 1000]
    assert len(big) > 20
    sd = np.sqrt(big["p"] * (1 - big["p"]) / big["n"])
    assert (np.abs(big["rate"] - big["p"]) <= 3 * sd).all()


def test_movers_stay_in_their_cz():
    sp = simulate_panel(SMALL)
    m = sp.prev.merge(sp.cur, on="worker_id", suffixes=("_p", "_t"))
    assert (m["cz_id_p"] == m["cz_id_t"]).all()


def test_planted_self_flow_rate():
    sp = simulate_panel(DgpParams(n_cz=50, n_workers=100_000, ee_intercept=0.2, ee_pop_slope=0.0, seed=8))
    tab = self_flow_rates(sp.prev, sp.cur).set_index("grouping")
    n = tab.loc["establishment_x_occ1", "n_linked"]
    sd = 100 * np.sqrt(0.2 * 0.8 / n)
    assert abs(tab.loc["establishment_x_occ1", "share_pct"] - 80.0) <= 3 * sd


def test_ee_probabilities_outside_unit_interval():
    with pytest.raises(ConfigError):
        ee_probabilities(np.array([10.0, 12.0]), DgpParams(ee_intercept=2.0))
    p = ee_probabilities(np.array([0.0, 100.0]), DgpParams(ee_intercept=0.5, ee_pop_slope=0.01))
    assert p.tolist() == [0.5, 1.0]


def test_invalid_params():
    with pytest.raises(ConfigError):
        simulate_panel(DgpParams(n_workers=0))
    with pytest.raises(ConfigError):
        DgpParams(zipf_exponent=0).validate()


# --------------------------------------------------------------------------- determinism and files


def test_threads_do_not_change_output():
    a = simulate_panel(SMALL)
    b = simulate_panel(SMALL, threads=4)
    pd.testing.assert_frame_equal(a.records, b.records)


def test_byte_identical_files(tmp_path):
    for name in ("a", "b"):
        write_panel(simulate_panel(SMALL), tmp_path / name)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert {str(f) for f in files} >= {"panel.csv", "cz.csv", "cpi.csv", "params.json", "ground_truth/psi_by_cz.csv", "ground_truth/mu_by_firm.csv", "ground_truth/worker_terms.csv"}
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", [str(f) for f in files], shallow=False)
    assert not mismatch and not errors


def test_different_seed_changes_output():
    a = simulate_panel(SMALL).records
    b = simulate_panel(SMALL.replace(seed=4)).records
    assert not a.equals(b)


def test_round_trip_one_million_records(tmp_path):
    sp = simulate_panel(DgpParams(n_workers=520_000))
    write_panel(sp, tmp_path)
    df, rep = load_panel(tmp_path / "panel.csv")
    assert rep.n_errors == 0
    assert len(df) == sp.report["records_emitted"] >= 1_000_000
