"""Command-line interface: flag handling, row schema, artifacts, and the
fuzz loop's pass/fail behavior."""

import json

import pytest

from thunderbolt.cli import CSV_FIELDS, main

HEADER = ("protocol,replicas,f,executors,batch,theta,pr,cross_pct,"
          "k,k_rotate,seed,committed,tps,avg_latency_s,reexec,reconfigs")


def run_cli(argv, capsys):
    code = main(argv)
    out = capsys.readouterr().out
    return code, out.strip().splitlines()


def fast_run(extra):
    return ["run", "--txs", "30", "--accounts", "64", "--batch", "20",
            "--horizon", "20"] + extra


class TestRun:
    def test_header_is_golden(self, capsys):
        code, lines = run_cli(fast_run(["--seed", "1"]), capsys)
        assert code == 0
        assert lines[0] == HEADER
        assert ",".join(CSV_FIELDS) == HEADER

    def test_row_values_round_trip(self, capsys):
        code, lines = run_cli(
            fast_run(["--protocol", "thunderbolt", "--replicas", "4",
                      "--faults", "1", "--seed", "9"]), capsys)
        row = dict(zip(CSV_FIELDS, lines[1].split(",")))
        assert row["protocol"] == "thunderbolt"
        assert (row["replicas"], row["f"], row["seed"]) == ("4", "1", "9")
        assert int(row["committed"]) == 30
        assert float(row["tps"]) > 0

    def test_protocol_mode_rows_identical(self, capsys):
        argv = fast_run(["--seed", "4", "--cross-pct", "30"])
        _, first = run_cli(argv, capsys)
        _, second = run_cli(argv, capsys)
        assert first == second

    def test_faults_derived_from_replicas(self, capsys):
        code, lines = run_cli(fast_run(["--replicas", "7"]), capsys)
        assert code == 0
        assert lines[1].split(",")[2] == "2"

    def test_inconsistent_faults_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--replicas", "5", "--faults", "1"])
        assert exc.value.code == 2

    def test_unknown_scenario_usage_error(self, capsys):
        with pytest.raises(SystemExit):
            main(["run", "--scenario", "nope"])

    def test_jsonl_format(self, capsys):
        code, lines = run_cli(
            fast_run(["--format", "jsonl", "--seed", "2"]), capsys)
        row = json.loads(lines[0])
        assert set(row) == set(CSV_FIELDS)
        assert row["committed"] == 30

    def test_exec_protocols_report_reexec(self, capsys):
        for proto in ("ce", "occ", "tpl-nowait"):
            code, lines = run_cli(
                ["run", "--protocol", proto, "--txs", "80", "--accounts",
                 "64", "--executors", "2", "--seed", "5"], capsys)
            assert code == 0
            row = dict(zip(CSV_FIELDS, lines[1].split(",")))
            assert int(row["committed"]) == 80
            assert int(row["reexec"]) >= 0
            assert row["reconfigs"] == "0"

    def test_config_file_defaults_and_flag_override(self, tmp_path, capsys):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(
            {"txs": 25, "seed": 11, "accounts": 64, "batch": 20}))
        code, lines = run_cli(
            ["run", "--config", str(cfg), "--seed", "12"], capsys)
        row = dict(zip(CSV_FIELDS, lines[1].split(",")))
        assert row["seed"] == "12"          # flag wins
        assert int(row["committed"]) == 25  # config supplies the rest

    def test_config_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"txz": 1}))
        with pytest.raises(SystemExit):
            main(["run", "--config", str(cfg)])

    def test_out_dir_artifacts(self, tmp_path, capsys):
        out = tmp_path / "artifacts"
        code, lines = run_cli(
            fast_run(["--seed", "3", "--out", str(out)]), capsys)
        assert code == 0
        assert (out / "metrics.csv").read_text().splitlines()[0] == HEADER
        report = json.loads((out / "report.json").read_text())
        assert len(report["replicas"]) == 4
        for rid in range(4):
            log = (out / f"replica-{rid}.log").read_text()
            assert "PROPOSE dag=0 round=0" in log


class TestScenario:
    def test_fig5_trace(self, tmp_path, capsys):
        out = tmp_path / "fig5"
        code, lines = run_cli(
            ["run", "--scenario", "fig5", "--seed", "7",
             "--out", str(out)], capsys)
        assert code == 0
        row = dict(zip(CSV_FIELDS, lines[1].split(",")))
        assert (row["k"], row["k_rotate"]) == ("2", "6")
        assert int(row["reconfigs"]) >= 1
        shift_rounds = []
        for rid in (0, 2, 3):
            log = (out / f"replica-{rid}.log").read_text().splitlines()
            first_dag = log[:next(i for i, e in enumerate(log)
                                  if e.startswith("NEWDAG"))]
            shifts = [e for e in first_dag if e.startswith("SHIFT")]
            assert shifts and "reason=silent" in shifts[0]
            shift_rounds.append(int(shifts[0].split()[1].split("=")[1]))
        assert sorted(shift_rounds) == [4, 4, 5]


class TestFuzz:
    def test_clean_build_passes(self, capsys):
        code, lines = run_cli(["fuzz", "--count", "80", "--seed", "0"],
                              capsys)
        assert code == 0
        assert lines[-1].startswith("fuzz ok count=80")

    def test_injected_bug_caught_and_minimized(self, tmp_path, capsys):
        repro = tmp_path / "repro.txt"
        code, lines = run_cli(
            ["fuzz", "--count", "200", "--seed", "0", "--skip-read-guard",
             "--out", str(repro)], capsys)
        assert code == 1
        assert lines[0].startswith("fuzz FAIL seed=")
        dumped = repro.read_text().strip().splitlines()
        assert 1 <= len(dumped) <= 8

    def test_failure_reproducible_by_seed(self, tmp_path, capsys):
        repro = tmp_path / "r.txt"
        argv = ["fuzz", "--count", "200", "--seed", "0", "--skip-read-guard",
                "--out", str(repro)]
        _, first = run_cli(argv, capsys)
        _, second = run_cli(argv, capsys)
        assert first[0] == second[0]
