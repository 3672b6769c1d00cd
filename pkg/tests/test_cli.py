import subprocess
import sys

import pytest

from sharpopt.cli import main
from sharpopt.harness import RunConfig, UsageError, parse_config_text, parse_record

FAST = ["--epochs", "2", "--n-train", "64", "--n-test", "64"]


def _records(path):
    return [parse_record(line) for line in path.read_text().splitlines()]


def test_train_delta_sam_writes_run_directory(out_root):
    assert main(["train", "--mode", "delta-sam", "--dataset", "two-moons", "--rho", "0.05",
                 "--eta", "1e-4", "--seed", "0", *FAST]) == 0
    run = out_root / "delta-sam-two-moons-seed0"
    assert {p.name for p in run.iterdir()} == {"config.txt", "metrics.tsv", "eval.tsv", "summary.txt"}
    recs = _records(run / "metrics.tsv")
    assert len(recs) == 4
    assert all(r["fwd_unrecorded"] == "3" and r["fwd_recorded"] == "2" for r in recs)
    assert all(float(r["g_min"]) >= 0 for r in recs)
    assert "status=ok" in (run / "summary.txt").read_text()


def test_config_echo_reruns_identically(out_root, tmp_path):
    assert main(["train", "--mode", "sam", "--seed", "3", *FAST]) == 0
    first = out_root / "sam-two-moons-seed3"
    assert main(["train", "--config", str(first / "config.txt"), "--out", str(tmp_path / "again")]) == 0
    again = tmp_path / "again"
    for name in ("metrics.tsv", "eval.tsv", "summary.txt"):
        assert (again / name).read_bytes() == (first / name).read_bytes()


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\nmode=delta-sam\nrho=0.02\nbatch-size=16\n")
    values = parse_config_text(cfg.read_text())
    assert values == {"mode": "delta_sam", "rho": 0.02, "batch_size": 16}
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--rho", "0.01", "--out", str(out), *FAST]) == 0
    echo = dict(line.split("=", 1) for line in (out / "config.txt").read_text().splitlines())
    assert echo["rho"] == "0.01" and echo["mode"] == "delta_sam" and echo["batch_size"] == "16"


def test_bad_config_lines():
    with pytest.raises(UsageError, match="unknown key"):
        parse_config_text("colour=blue\n")
    with pytest.raises(UsageError, match="key=value"):
        parse_config_text("rho 0.1\n")
    with pytest.raises(UsageError, match="cannot parse"):
        parse_config_text("rho=abc\n")


def test_per_instance_large_batch_refused_before_compute(out_root, capsys):
    assert main(["train", "--mode", "per-instance-sam", "--batch-size", "128"]) == 2
    assert "oracle cap" in capsys.readouterr().err
    assert not out_root.exists()


@pytest.mark.parametrize("argv", [
    ["train", "--rho", "-1"],
    ["train", "--dataset", "csv"],
    ["train", "--csv", "x.csv"],
    ["train", "--epochs", "0"],
    ["verify", "--mc-samples", "10"],
    ["compare", "--seeds", "0"],
])
def test_usage_errors_exit_2(argv, out_root):
    assert main(argv) == 2


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["train", "--mode", "nonsense"])
    assert info.value.code == 2


def test_sweep_rho_makes_three_subdirectories(out_root):
    assert main(["train", "--mode", "sam", "--sweep-rho", *FAST]) == 0
    root = out_root / "sam-two-moons-seed0"
    assert sorted(p.name for p in root.iterdir()) == ["rho-0.01", "rho-0.02", "rho-0.05"]
    echoes = [(root / d / "config.txt").read_text() for d in ("rho-0.01", "rho-0.05")]
    assert "rho=0.01\n" in echoes[0] and "rho=0.05\n" in echoes[1]


def test_numeric_abort_exit_3(tmp_path):
    out = tmp_path / "div"
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--dataset", "linreg", "--hidden", "0", "--optimizer", "sgd",
                     "--lr", "100", "--epochs", "50", "--out", str(out)])
    assert code == 3
    assert (out / "summary.txt").read_text() == "status=aborted\n"
    assert (out / "metrics.tsv").read_text()


def test_csv_ingestion_matches_in_memory(tmp_path):
    assert main(["gen-data", "--n-train", "96", "--n-test", "40", "--seed", "2",
                 "--out", str(tmp_path / "csv")]) == 0
    common = ["--epochs", "3", "--seed", "2", "--mode", "delta-sam"]
    assert main(["train", *common, "--n-train", "96", "--n-test", "40",
                 "--out", str(tmp_path / "mem")]) == 0
    assert main(["train", *common, "--dataset", "csv", "--csv", str(tmp_path / "csv" / "train.csv"),
                 "--csv-test", str(tmp_path / "csv" / "test.csv"), "--out", str(tmp_path / "file")]) == 0
    for name in ("metrics.tsv", "eval.tsv"):
        assert (tmp_path / "mem" / name).read_bytes() == (tmp_path / "file" / name).read_bytes()


def test_csv_holdout_and_regression(tmp_path):
    assert main(["gen-data", "--dataset", "linreg", "--n-train", "50", "--n-test", "10",
                 "--target", "y", "--out", str(tmp_path / "lr")]) == 0
    out = tmp_path / "run"
    assert main(["train", "--dataset", "csv", "--csv", str(tmp_path / "lr" / "train.csv"),
                 "--target", "y", "--task", "regression", "--hidden", "0", "--epochs", "2",
                 "--out", str(out)]) == 0
    assert "metric=mse" in (out / "summary.txt").read_text()


def test_missing_csv_is_usage_error(tmp_path, out_root):
    assert main(["train", "--dataset", "csv", "--csv", str(tmp_path / "nope.csv")]) == 2
    assert not out_root.exists()


def test_compare_table(tmp_path, capsys):
    out = tmp_path / "cmp"
    argv = ["compare", "--seeds", "2", "--epochs", "1", "--n-train", "64", "--n-test", "32",
            "--out", str(out)]
    assert main(argv) == 0
    table = (out / "summary.tsv").read_text().splitlines()
    rows = {line.split("\t")[0]: line.split("\t") for line in table[1:]}
    assert set(rows) == {"base", "sam", "delta-sam", "per-instance-sam"}
    assert rows["base"][3:6] == ["1", "0", "1"]
    assert rows["sam"][3:6] == ["2", "0", "2"]
    assert rows["delta-sam"][3:7] == ["2", "3", "2", "3"]
    assert rows["per-instance-sam"][3:6] == ["64", "0", "64"]
    first = (out / "summary.tsv").read_bytes()
    assert main(argv) == 0
    assert (out / "summary.tsv").read_bytes() == first


def test_compare_omits_per_instance_above_cap(tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", "--seeds", "1", "--epochs", "1", "--n-train", "128",
                 "--n-test", "32", "--batch-size", "128", "--out", str(out)]) == 0
    modes = [line.split("\t")[0] for line in (out / "summary.tsv").read_text().splitlines()[1:]]
    assert modes == ["base", "sam", "delta-sam"]


def test_verify_seed_reproducible(capsys, monkeypatch):
    from sharpopt import verify
    from sharpopt.verify import CheckResult

    # the full battery runs in the acceptance suite; here only the wiring
    monkeypatch.setattr(verify, "run_battery",
                        lambda seed, mc: [CheckResult("a", True, f"seed={seed} mc={mc}")])
    assert main(["verify", "--seed", "5", "--mc-samples", "1000"]) == 0
    assert "PASS" in capsys.readouterr().out
    monkeypatch.setattr(verify, "run_battery", lambda seed, mc: [CheckResult("a", False, "")])
    assert main(["verify"]) == 1


def test_module_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "sharpopt", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "train" in res.stdout and "gen-data" in res.stdout


def test_run_config_defaults():
    cfg = RunConfig()
    assert (cfg.rho, cfg.eta, cfg.sigma, cfg.optimizer) == (0.05, 1e-4, 1.0, "adam")
