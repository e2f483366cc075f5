from __future__ import annotations

import warnings

import numpy as np
import pandas as pd
import pytest

from urbanwage.errors import DataError
from urbanwage.panel import (
    FirmKey,
    FilterConfig,
    PanelRecord,
    TeamKey,
    apply_sample_filters,
    build_paired_panel,
    decode_key,
    deduplicate_jobs,
    deflate_wages,
    encode_key,
    iter_records,
    load_cpi,
    load_cz_table,
    load_panel,
    make_cz_table,
    records_to_frame,
    residualize_wages,
)

HEADER = "worker_id,year,firm_id,establishment_id,occ1,cz_id,gross_annual_wage,hours,age,gender"


def write(tmp_path, text, name="panel.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def row(**kw):
    base = dict(worker_id=1, year=2014, firm_id=10, establishment_id=100, occ1=3, cz_id=1, gross_annual_wage=20000.0, hours=1500.0, age=40, gender=1)
    base.update(kw)
    return base


# --------------------------------------------------------------------------- ingestion


def test_load_three_rows(tmp_path):
    p = write(tmp_path, HEADER + "\n1,2014,10,100,3,1,20000,1500,40,1\n2,2014,10,100,3,1,21000,1500,41,2\n3,2014,11,110,5,2,18000,1400,30,1\n")
    df, rep = load_panel(p)
    assert len(df) == 3 and rep.n_errors == 0 and rep.n_rows == 3
    assert df["worker_id"].tolist() == [1, 2, 3]  # file order


def test_parse_error_names_line(tmp_path):
    p = write(tmp_path, HEADER + "\n1,2014,10,100,3,1,20000,1500,40,1\n2,2014,10,100,3,1,21000,lots,41,2\n")
    with pytest.raises(DataError, match=r"line 3.*hours"):
        load_panel(p, error_budget=0)


def test_parse_errors_within_budget_are_reported(tmp_path):
    p = write(tmp_path, HEADER + "\n1,2014,10,100,3,1,20000,1500,40,1\n2,2014,10,100,3,1,21000,lots,41,2\n")
    df, rep = load_panel(p, error_budget=1)
    assert len(df) == 1 and rep.n_errors == 1 and rep.parse_errors == {"hours": 1} and rep.bad_lines == [3]


def test_fractional_integer_field_is_a_parse_error(tmp_path):
    p = write(tmp_path, HEADER + "\n1.5,2014,10,100,3,1,20000,1500,40,1\n")
    with pytest.raises(DataError):
        load_panel(p)


def test_empty_field_loads_as_missing(tmp_path):
    p = write(tmp_path, HEADER + "\n1,2014,10,100,3,,20000,1500,40,1\n")
    df, rep = load_panel(p)
    assert rep.n_errors == 0 and pd.isna(df.loc[0, "cz_id"])


def test_missing_file_and_column(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_panel(tmp_path / "nope.csv")
    p = write(tmp_path, "worker_id,year\n1,2014\n")
    with pytest.raises(DataError, match="missing required column"):
        load_panel(p)


def test_schema_maps_column_names(tmp_path):
    p = write(tmp_path, HEADER.replace("worker_id", "ident") + "\n1,2014,10,100,3,1,20000,1500,40,1\n")
    df, _ = load_panel(p, schema={"worker_id": "ident"})
    assert df["worker_id"].tolist() == [1]


def test_records_round_trip():
    df = pd.DataFrame([row(), row(worker_id=2, age=30)])
    recs = list(iter_records(df))
    assert isinstance(recs[0], PanelRecord) and recs[1].age == 30
    back = records_to_frame(recs)
    assert back["worker_id"].tolist() == [1, 2]


def test_cz_and_cpi_tables(tmp_path):
    cz = load_cz_table(write(tmp_path, "cz_id,population\n1,1000\n2,500\n", "cz.csv"))
    assert cz.loc[2, "log_population"] == pytest.approx(np.log(500), abs=1e-12)
    assert load_cpi(write(tmp_path, "year,index\n2014,99.6\n2015,100\n", "cpi.csv")) == {2014: 99.6, 2015: 100.0}
    with pytest.raises(DataError):
        make_cz_table([1, 2], [10.0, 0.0])
    with pytest.raises(DataError):
        make_cz_table([1, 1], [10.0, 20.0])


def test_keys():
    assert TeamKey(100, 3).encode() == 1003 and FirmKey(10, 3).encode() == 103
    est, occ = decode_key(encode_key(np.array([100, 7]), np.array([3, 9])))
    assert est.tolist() == [100, 7] and occ.tolist() == [3, 9]
    assert TeamKey(1, 2) == TeamKey(1, 2) and TeamKey(1, 2) != TeamKey(1, 3)


# --------------------------------------------------------------------------- filters


def test_filter_rules():
    df = pd.DataFrame([row(worker_id=1, age=17), row(worker_id=2, gross_annual_wage=99.0), row(worker_id=3), row(worker_id=4, hours=0.0)])
    out, rep = apply_sample_filters(df)
    assert out["worker_id"].tolist() == [3]
    assert rep.counts["age"] == 1 and rep.counts["wage_floor"] == 1 and rep.counts["nonpositive_hours"] == 1
    assert rep.n_in == 4 and rep.n_out == 1


def test_filter_boundaries_and_no_upper_trim():
    df = pd.DataFrame([row(worker_id=1, age=18), row(worker_id=2, age=65), row(worker_id=3, age=66), row(worker_id=4, gross_annual_wage=100.0), row(worker_id=5, gross_annual_wage=1e9)])
    out, _ = apply_sample_filters(df)
    assert out["worker_id"].tolist() == [1, 2, 4, 5]


def test_filter_missing_fields_and_cz():
    df = pd.DataFrame([row(worker_id=1), row(worker_id=2, cz_id=99), row(worker_id=3)]).astype({"gender": "Float64"})
    df.loc[2, "gender"] = pd.NA
    cz = make_cz_table([1], [1000.0])
    out, rep = apply_sample_filters(df, cz_table=cz)
    assert out["worker_id"].tolist() == [1]
    assert rep.counts["missing_fields"] == 1 and rep.counts["missing_cz"] == 1
    assert list(rep.to_frame()["rule"])[0] == "n_in"


def test_filter_idempotent():
    rng = np.random.default_rng(0)
    df = pd.DataFrame([row(worker_id=i, age=int(rng.integers(10, 80)), gross_annual_wage=float(rng.integers(0, 300))) for i in range(200)])
    once, _ = apply_sample_filters(df)
    twice, rep2 = apply_sample_filters(once)
    pd.testing.assert_frame_equal(once, twice)
    assert rep2.n_dropped == 0


def test_filter_config_ages():
    df = pd.DataFrame([row(age=20)])
    out, _ = apply_sample_filters(df, FilterConfig(min_age=25))
    assert out.empty


# --------------------------------------------------------------------------- dedup and deflation


def test_dedup_rules():
    df = pd.DataFrame(
        [
            row(worker_id=1, hours=1000.0, establishment_id=5),
            row(worker_id=1, hours=1500.0, establishment_id=6),
            row(worker_id=2, hours=1500.0, gross_annual_wage=1000.0, establishment_id=7),
            row(worker_id=2, hours=1500.0, gross_annual_wage=2000.0, establishment_id=8),
            row(worker_id=3, establishment_id=9),
            row(worker_id=3, establishment_id=4),
        ]
    )
    out, n = deduplicate_jobs(df)
    assert n == 3
    assert out.set_index("worker_id")["establishment_id"].to_dict() == {1: 6, 2: 8, 3: 4}


def test_deflate_examples():
    df = pd.DataFrame([row(year=2014, gross_annual_wage=1100.0, hours=100.0), row(worker_id=2, year=2015, gross_annual_wage=1500.0, hours=100.0)])
    out = deflate_wages(df, {2014: 100.0, 2015: 110.0}, 2015)
    assert out["hourly_wage"].tolist() == pytest.approx([12.1, 15.0], rel=1e-15)
    assert out.loc[1, "hourly_wage"] == 1500.0 / 100.0  # identity at the base year


def test_deflate_errors():
    df = pd.DataFrame([row(year=2013)])
    with pytest.raises(DataError):
        deflate_wages(df, {2014: 100.0}, 2014)
    with pytest.raises(DataError):
        deflate_wages(df, {2013: 100.0}, 2015)
    with pytest.raises(DataError):
        deflate_wages(pd.DataFrame([row(hours=0.0)]), {2014: 100.0}, 2014)


# --------------------------------------------------------------------------- pairing


def cross_section(rows):
    df = pd.DataFrame(rows)
    df["hourly_wage"] = df["gross_annual_wage"] / df["hours"]
    return df


def test_pairing_flags():
    prev = cross_section([row(worker_id=1), row(worker_id=2), row(worker_id=3, establishment_id=300)])
    cur = cross_section(
        [
            row(worker_id=1, year=2015),  # same establishment and occupation
            row(worker_id=2, year=2015, occ1=4),  # new occupation, same establishment
            row(worker_id=4, year=2015),  # only present at t
            row(worker_id=3, year=2015, establishment_id=301, cz_id=2),
        ]
    )
    cz = make_cz_table([1, 2], [1000.0, 2000.0])
    p = build_paired_panel(prev, cur, cz)
    assert p["worker_id"].tolist() == [1, 2, 3]
    assert p["is_ee"].tolist() == [False, True, True]
    assert p["same_cz"].tolist() == [True, True, False]
    assert p.loc[2, "log_population"] == pytest.approx(np.log(2000.0))
    assert np.array_equal(p["is_ee"], p["team_prev"] != p["team_t"])
    assert len(p) <= min(len(prev), len(cur))


def test_pairing_rejects_duplicates():
    prev = cross_section([row(worker_id=1), row(worker_id=1)])
    cur = cross_section([row(worker_id=1, year=2015)])
    with pytest.raises(DataError, match="duplicate worker_id 1"):
        build_paired_panel(prev, cur)


# --------------------------------------------------------------------------- residualization


def paired_frame(age, gender, wage):
    return pd.DataFrame({"age": age, "gender": gender, "wage_t": wage, "wage_prev": wage})


def test_residualize_constant_controls():
    w = np.array([10.0, 12.0, 17.0, 9.0])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = residualize_wages(paired_frame([40] * 4, [1] * 4, w))
    assert caught, "degenerate controls should warn"
    np.testing.assert_allclose(out["wage_t"], w - w.mean(), atol=1e-12)
    assert out["wage_t_raw"].tolist() == w.tolist()


def test_residualize_perfect_fit():
    age = np.arange(20, 60)
    out = residualize_wages(paired_frame(age, np.where(age % 2, 1, 2), 2.0 * age))
    assert np.max(np.abs(out["wage_t"])) <= 1e-10


def test_residualize_orthogonality():
    rng = np.random.default_rng(1)
    age = rng.integers(18, 66, 200)
    gender = rng.integers(1, 3, 200)
    w = 10 + 0.2 * age - 0.002 * age**2 + 1.5 * gender + rng.standard_normal(200)
    out = residualize_wages(paired_frame(age, gender, w))
    r = out["wage_t"].to_numpy()
    assert abs(r.mean()) <= 1e-10
    for col in (age.astype(float), gender.astype(float)):
        assert abs(r @ col) <= 1e-8 * np.linalg.norm(r) * np.linalg.norm(col)
    assert out.attrs["residualization"]["controls"] == ["intercept", "age", "age_sq", "gender"]


def test_residualize_empty():
    with pytest.raises(DataError):
        residualize_wages(paired_frame([], [], []))
