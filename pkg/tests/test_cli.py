from __future__ import annotations

import filecmp
import json

import pandas as pd
import pytest

from urbanwage import cli
from urbanwage.config import RunConfig, load_config, parse_config
from urbanwage.errors import ConfigError, VerificationError
from urbanwage.verify import CriterionResult

SMALL_CONFIG = """
[run]
seed = 11

[generate]
n_cz = 40
n_workers = 30000
"""


def tree(path):
    return sorted(p.relative_to(path).as_posix() for p in path.rglob("*") if p.is_file())


def same_tree(a, b):
    files = tree(a)
    if files != tree(b):
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    return not mismatch and not errors


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.ini"
    cfg.write_text(SMALL_CONFIG)
    assert cli.main(["generate", "--config", str(cfg), "--out", str(root / "panel")]) == 0
    return root, cfg


# --------------------------------------------------------------------------- configuration


def test_defaults_and_seed_propagation():
    cfg = parse_config("[run]\nseed = 5\n")
    assert cfg.generate.seed == 5
    cfg = parse_config("[run]\nseed = 5\n[generate]\nseed = 9\n")
    assert cfg.run.seed == 5 and cfg.generate.seed == 9
    assert load_config(None) == RunConfig()


def test_unknown_keys_and_sections():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("[generate]\nn_wrokers = 5\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[estimate]\ntol = 1e-8\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config("[generate]\nn_workers = many\n")
    with pytest.raises(ConfigError):
        parse_config("[decompose]\ndvs = level,wages\n")


def test_echo_excludes_threads():
    cfg = RunConfig().with_threads(4)
    echo = cfg.echo()
    assert "threads" not in echo["run"] and echo["generate"]["n_workers"] == 520_000
    with pytest.raises(ConfigError):
        RunConfig().with_threads(0)


# --------------------------------------------------------------------------- generate


def test_generate_files(workspace):
    root, _ = workspace
    files = tree(root / "panel")
    for f in ("panel.csv", "cz.csv", "cpi.csv", "params.json", "ground_truth/psi_by_cz.csv", "ground_truth/mu_by_firm.csv", "ground_truth/worker_terms.csv"):
        assert f in files
    echo = json.loads((root / "panel" / "params.json").read_text())
    assert echo["params"]["seed"] == 11 and echo["params"]["n_workers"] == 30000
    assert b"\r\n" not in (root / "panel" / "panel.csv").read_bytes()


def test_generate_same_seed_identical(workspace, tmp_path):
    root, cfg = workspace
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "again"), "--threads", "3"]) == 0
    assert same_tree(root / "panel", tmp_path / "again")


def test_generate_invalid_config_writes_nothing(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[generate]\nn_workers = 0\n")
    out = tmp_path / "out"
    assert cli.main(["generate", "--config", str(cfg), "--out", str(out)]) == 1
    assert not out.exists()
    assert "n_workers" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["generate", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path / "o")]) == 1


# --------------------------------------------------------------------------- prepare and decompose


def test_prepare_outputs(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "prepared"
    assert cli.main(["prepare", "--config", str(cfg), "--panel", str(root / "panel"), "--out", str(out)]) == 0
    assert {"paired.csv", "cz.csv", "filter_report.csv", "prepare_info.json", "run_metadata.json"} <= set(tree(out))
    fr = pd.read_csv(out / "filter_report.csv")
    assert fr["rule"].iloc[0] == "n_in" and fr["rule"].iloc[-1] == "n_out"
    # decompose accepts the prepared directory and gives the same tables as the raw one
    a, b = tmp_path / "from_raw", tmp_path / "from_prepared"
    assert cli.main(["decompose", "--config", str(cfg), "--panel", str(root / "panel"), "--out", str(a), "--only", "coworkers_firm_fe"]) == 0
    assert cli.main(["decompose", "--config", str(cfg), "--panel", str(out), "--out", str(b), "--only", "coworkers_firm_fe"]) == 0
    pd.testing.assert_frame_equal(pd.read_csv(a / "panel_b_level_all.csv"), pd.read_csv(b / "panel_b_level_all.csv"))


@pytest.fixture(scope="module")
def full_run(workspace):
    root, cfg = workspace
    out = root / "report"
    assert cli.main(["decompose", "--config", str(cfg), "--panel", str(root / "panel"), "--out", str(out)]) == 0
    return out


def test_full_grid_file_set(full_run):
    files = set(tree(full_run))
    for dv in ("level", "log", "growth"):
        for sample in ("all", "stayers"):
            assert f"panel_a_{dv}_{sample}.csv" in files and f"panel_b_{dv}_{sample}.csv" in files
    for f in ("ee_regressions.csv", "self_flow_rates.csv", "firm_fe_projection.csv", "filter_report.csv", "convergence_log.csv", "run_metadata.json", "summary.txt"):
        assert f in files
    assert "fe_bins_baseline_level_all.csv" in files and "cz_effects_coworkers_firm_fe_growth_stayers.csv" in files
    b = pd.read_csv(full_run / "panel_b_level_stayers.csv")
    assert len(b) == 5 and b["spec"].iloc[0] == "baseline_full_sample"


def test_metadata_contents(full_run):
    meta = json.loads((full_run / "run_metadata.json").read_text())
    assert meta["seed"] == 11 and meta["config"]["generate"]["n_cz"] == 40
    assert {"version", "tolerances", "normalizations", "residualization", "inference"} <= set(meta)
    assert "timestamp" not in json.dumps(meta)


def test_decompose_rerun_is_byte_identical(workspace, full_run, tmp_path):
    root, cfg = workspace
    out = tmp_path / "rerun"
    assert cli.main(["decompose", "--config", str(cfg), "--panel", str(root / "panel"), "--out", str(out), "--threads", "4"]) == 0
    assert same_tree(full_run, out)


def test_only_baseline(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "only"
    assert cli.main(["decompose", "--config", str(cfg), "--panel", str(root / "panel"), "--out", str(out), "--only", "baseline"]) == 0
    files = set(tree(out))
    assert "ee_regressions.csv" not in files
    b = pd.read_csv(out / "panel_b_level_all.csv")
    assert len(b) == 1 and "alpha_change_pct" not in b.columns


def test_only_rejects_bad_spec(workspace, tmp_path):
    root, cfg = workspace
    assert cli.main(["decompose", "--config", str(cfg), "--panel", str(root / "panel"), "--out", str(tmp_path / "x"), "--only", "everything"]) == 1


def test_data_error_exit_code(tmp_path, capsys):
    (tmp_path / "p").mkdir()
    (tmp_path / "p" / "cz.csv").write_text("cz_id,population\n1,100\n")
    (tmp_path / "p" / "cpi.csv").write_text("year,index\n2014,100\n2015,100\n")
    (tmp_path / "p" / "panel.csv").write_text(
        "worker_id,year,firm_id,establishment_id,occ1,cz_id,gross_annual_wage,hours,age,gender\n1,2014,1,1,3,1,20000,oops,40,1\n"
    )
    out = tmp_path / "o"
    assert cli.main(["decompose", "--panel", str(tmp_path / "p"), "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert "[load]" in err and "line 2" in err
    assert not out.exists() and not (tmp_path / ".o.partial").exists()


def test_estimation_error_exit_code(tmp_path):
    # a single commuting zone cannot be absorbed as a fixed effect
    (tmp_path / "p").mkdir()
    (tmp_path / "p" / "cz.csv").write_text("cz_id,population\n1,100\n")
    (tmp_path / "p" / "cpi.csv").write_text("year,index\n2014,100\n2015,100\n")
    rows = ["worker_id,year,firm_id,establishment_id,occ1,cz_id,gross_annual_wage,hours,age,gender"]
    for w in range(1, 21):
        for y in (2014, 2015):
            rows.append(f"{w},{y},{w % 3 + 1},{w % 3 + 1},3,1,{20000 + 100 * w + y},1500,{20 + w},{w % 2 + 1}")
    (tmp_path / "p" / "panel.csv").write_text("\n".join(rows) + "\n")
    assert cli.main(["decompose", "--panel", str(tmp_path / "p"), "--out", str(tmp_path / "o"), "--only", "baseline"]) == 3


# --------------------------------------------------------------------------- verify


def test_verify_failure_exit_code(monkeypatch, tmp_path, capsys):
    def fake_run_all(cfg, report=None):
        out = [CriterionResult(1, "kernel", False, "max rel discrepancy 1.0e+00", "<= 1e-10")]
        for r in out:
            report(r)
        return out

    monkeypatch.setattr("urbanwage.verify.run_all", fake_run_all)
    assert cli.main(["verify", "--out", str(tmp_path)]) == 4
    assert "[FAIL] criterion  1" in capsys.readouterr().out
    assert (tmp_path / "verify_report.csv").is_file()
    with pytest.raises(VerificationError):
        cli.cmd_verify(RunConfig(), None)
