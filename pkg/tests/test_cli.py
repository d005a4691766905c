import csv
import io

import pytest

from budgeted_bo.cli import main, read_config_file


def test_list_problems(capsys):
    assert main(["list-problems"]) == 0
    out = capsys.readouterr().out
    assert "dropwave" in out and "shekel5" in out


def test_verify_theorem1_csv(capsys):
    assert main(["verify-theorem1", "--epsilons", "0.2,0.1", "--trajectories", "2000", "--seed", "3"]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["epsilon", "delta", "variant", "policy", "mean", "std_error", "ratio"]
    assert len(rows) == 9
    assert {r[3] for r in rows[1:]} == {"high_once", "ei_puc", "low_only", "ei"}


def test_run_with_flags(tmp_path, capsys):
    out = tmp_path / "o"
    code = main(["run", "--problem", "dropwave", "--acq", "ei", "--budget", "5", "--reps", "1",
                 "--seed", "2", "--out", str(out), "--optimizer-preset", "desk"])
    assert code == 0
    assert (out / "traces.csv").exists() and (out / "aggregate.csv").exists()


def test_run_with_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    out = tmp_path / "o"
    cfg.write_text(f"# demo\nproblem = dropwave\nacq = ei_puc\nbudget = 4\nreps = 1\nout = {out}\n")
    assert main(["run", "--config", str(cfg), "--seed", "5"]) == 0
    assert (out / "traces.csv").exists()


def test_config_file_errors(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("colour = red\n")
    with pytest.raises(ValueError):
        read_config_file(p)
    p.write_text("problem dropwave\n")
    with pytest.raises(ValueError):
        read_config_file(p)


def test_run_reports_bad_input(capsys):
    assert main(["run", "--problem", "nowhere", "--budget", "3"]) == 2
    assert main(["run", "--problem", "dropwave"]) == 2
    assert "error" in capsys.readouterr().err
