import csv
import json
import os

import numpy as np
import pytest

from costq.cli import DEFAULT_CONFIG, _compare_cell, load_config, main
from costq.data import load_dataset_csv
from costq.errors import ConfigError


def run_cli(*args):
    return main(list(args))


@pytest.fixture()
def sim_dir(tmp_path):
    cfg = tmp_path / "sim.toml"
    cfg.write_text(
        "[run]\nscenario = 's1'\nn = [60]\nseeds = [1, 2]\n"
    )
    out = tmp_path / "data"
    assert run_cli("simulate", "--config", str(cfg), "--out", str(out)) == 0
    return out


class TestConfig:
    def test_defaults_load_without_file(self):
        cfg = load_config(None)
        assert cfg["run"]["scenario"] == "s1"
        assert cfg["crossfit"]["n_folds"] == 5

    def test_unknown_key_rejected_with_path(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[run]\nscenari = 's1'\n")
        with pytest.raises(ConfigError, match="run.scenari"):
            load_config(str(path))

    def test_toml_syntax_error_carries_context(self, tmp_path):
        path = tmp_path / "broken.toml"
        path.write_text("[run\nscenario = 's1'\n")
        with pytest.raises(ConfigError, match="broken.toml"):
            load_config(str(path))

    def test_bad_config_exit_code(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[run]\nmystery = 1\n")
        assert run_cli("simulate", "--config", str(path), "--out", str(tmp_path / "o")) == 2

    def test_invalid_method_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[run]\nmethods = ['costq', 'bowl']\n")
        with pytest.raises(ConfigError, match="bowl"):
            load_config(str(path))


class TestSimulate:
    def test_writes_expected_files(self, sim_dir):
        for seed in (1, 2):
            for suffix in ("observed", "full", "propensities"):
                assert (sim_dir / f"s1_n60_seed{seed}_{suffix}.csv").exists()
        observed = load_dataset_csv(str(sim_dir / "s1_n60_seed1_observed.csv"))
        assert len(observed) == 60
        full = load_dataset_csv(str(sim_dir / "s1_n60_seed1_full.csv"))
        assert full.fully_observed

    def test_resolved_config_echoed(self, sim_dir):
        text = (sim_dir / "resolved_config.toml").read_text()
        assert "scenario" in text and "[crossfit]" in text

    def test_rerun_byte_identical(self, sim_dir, tmp_path):
        cfg = tmp_path / "sim2.toml"
        cfg.write_text("[run]\nscenario = 's1'\nn = [60]\nseeds = [1, 2]\n")
        out2 = tmp_path / "data2"
        assert run_cli("simulate", "--config", str(cfg), "--out", str(out2)) == 0
        for name in ("s1_n60_seed1_observed.csv", "s1_n60_seed2_full.csv"):
            assert (sim_dir / name).read_bytes() == (out2 / name).read_bytes()


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("fit")
    cfg = tmp / "c.toml"
    cfg.write_text("[run]\nscenario = 's1'\nn = [400]\nseeds = [3]\n")
    data_dir = tmp / "data"
    assert run_cli("simulate", "--config", str(cfg), "--out", str(data_dir)) == 0
    train = data_dir / "s1_n400_seed3_observed.csv"
    eval_csv = data_dir / "s1_n400_seed3_full.csv"
    policy = tmp / "policy.json"
    diag = tmp / "diag.json"
    code = run_cli("fit", "--config", str(cfg), "--data", str(train),
                   "--method", "costq", "--seed", "3",
                   "--out", str(policy), "--diagnostics", str(diag))
    assert code == 0
    return tmp, cfg, train, eval_csv, policy, diag


class TestFit:
    def test_policy_file_has_all_contrasts(self, fitted):
        _, _, _, _, policy, diag = fitted
        d = json.loads(policy.read_text())
        assert d["method"] == "costq"
        assert set(d["contrasts"]["stage2"]) == {"1", "2"}
        assert set(d["contrasts"]["stage1"]) == {"1", "2"}
        assert set(d["core"]) == {"S0", "S1only", "S2only", "S12"}
        assert "value_estimate" in json.loads(diag.read_text())

    def test_fixed_method(self, fitted, tmp_path):
        _, cfg, train, _, _, _ = fitted
        out = tmp_path / "stop.json"
        assert run_cli("fit", "--config", str(cfg), "--data", str(train),
                       "--method", "always_stop", "--out", str(out)) == 0
        assert json.loads(out.read_text())["method"] == "always_stop"

    def test_corrupt_row_reports_data_error(self, fitted, tmp_path, capsys):
        _, cfg, train, _, _, _ = fitted
        bad = tmp_path / "bad.csv"
        rows = train.read_text().splitlines()
        parts = rows[3].split(",")
        parts[-2] = "3"
        rows[3] = ",".join(parts)
        bad.write_text("\n".join(rows) + "\n")
        code = run_cli("fit", "--config", str(cfg), "--data", str(bad),
                       "--method", "always_stop", "--out", str(tmp_path / "p.json"))
        assert code == 3
        assert "row 4" in capsys.readouterr().err


class TestEvaluate:
    def test_test_all_cost_is_exact(self, fitted, tmp_path):
        tmp, cfg, train, eval_csv, _, _ = fitted
        policy = tmp_path / "ata.json"
        assert run_cli("fit", "--config", str(cfg), "--data", str(train),
                       "--method", "always_test_all", "--out", str(policy)) == 0
        report = tmp_path / "report.json"
        assert run_cli("evaluate", "--policy", str(policy), "--data", str(eval_csv),
                       "--out", str(report)) == 0
        d = json.loads(report.read_text())
        assert d["avg_cost"] == pytest.approx(0.03, abs=1e-15)
        assert sum(d["path_props"].values()) == pytest.approx(1.0, abs=1e-12)
        assert report.with_suffix(".csv").exists()

    def test_rerun_identical(self, fitted, tmp_path):
        tmp, cfg, train, eval_csv, policy, _ = fitted
        r1, r2 = tmp_path / "r1.json", tmp_path / "r2.json"
        assert run_cli("evaluate", "--policy", str(policy), "--data", str(eval_csv),
                       "--out", str(r1)) == 0
        assert run_cli("evaluate", "--policy", str(policy), "--data", str(eval_csv),
                       "--out", str(r2)) == 0
        assert r1.read_bytes() == r2.read_bytes()


COMPARE_TOML = """
[run]
scenario = "s1"
settings = ["A"]
n = [300, 400]
seeds = [1, 2, 3]
methods = ["always_stop", "one_time"]
eval_n = 500
"""


class TestCompare:
    def test_row_count_and_schema(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text(COMPARE_TOML)
        out = tmp_path / "runs"
        assert run_cli("compare", "--config", str(cfg), "--out", str(out)) == 0
        with open(out / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 2 * 3
        assert rows[0]["setting"] == "A"
        methods = {r["method"] for r in rows}
        assert methods == {"always_stop", "one_time"}

    def test_parse_back_matches_in_memory_report(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text(COMPARE_TOML)
        out = tmp_path / "runs"
        run_cli("compare", "--config", str(cfg), "--out", str(out))
        rows_mem, errors = _compare_cell(
            {"cfg": load_config(str(cfg)), "setting": "A", "n": 300, "seed": 1}
        )
        assert not errors
        with open(out / "results.csv") as fh:
            rows_csv = [r for r in csv.reader(fh)][1:]
        match = [r for r in rows_csv if r[:4] == ["A", "s1", "300", "1"]]
        by_method = {r["report"][0]: r["report"] for r in rows_mem}
        for row in match:
            assert [str(v) for v in by_method[row[4]]] == row[4:]

    def test_parallel_runs_byte_identical(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text(COMPARE_TOML)
        out1, out2 = tmp_path / "serial", tmp_path / "parallel"
        assert run_cli("compare", "--config", str(cfg), "--out", str(out1), "--jobs", "1") == 0
        assert run_cli("compare", "--config", str(cfg), "--out", str(out2), "--jobs", "3") == 0
        assert (out1 / "results.csv").read_bytes() == (out2 / "results.csv").read_bytes()

    def test_partial_failure_logged_and_flagged(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text(
            "[run]\nscenario = 's1'\nsettings = ['A']\nn = [400, 14]\nseeds = [1]\n"
            "methods = ['costq', 'always_stop']\neval_n = 200\n"
        )
        out = tmp_path / "runs"
        code = run_cli("compare", "--config", str(cfg), "--out", str(out))
        assert code == 4
        err = capsys.readouterr().err
        assert "FAILED" in err and "n=14" in err
        with open(out / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["method"] for r in rows if r["n_train"] == "400"} == {"costq", "always_stop"}

    def test_env_var_overrides_jobs(self, tmp_path, monkeypatch):
        monkeypatch.setenv("COSTQ_JOBS", "not-a-number")
        cfg = tmp_path / "c.toml"
        cfg.write_text(COMPARE_TOML)
        assert run_cli("compare", "--config", str(cfg), "--out", str(tmp_path / "o")) == 2


class TestServe:
    def test_invalid_policy_file_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "broken.json"
        bad.write_text("{ not json")
        code = run_cli("serve", "--policy", str(bad), "--bind", "127.0.0.1:0")
        assert code == 3
        assert "cannot load policy" in capsys.readouterr().err
