import csv
import dataclasses
import subprocess
import sys

import pytest

from ssfa_lab import cli
from ssfa_lab.engine import TrainConfig

TINY = ["--B", "4", "--mu", "2", "--widths", "16,12,8,8", "--steps", "5"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-bundle", "--n-labeled", "40", "--n-unlabeled", "200", "--n-classes", "4",
                     "--n-test", "60", "--seed", "1", "--out", str(root / "b.ssfa")]) == 0
    assert cli.main(["train", "--bundle", str(root / "b.ssfa"), *TINY, "--out", str(root / "run")]) == 0
    return root


def test_every_config_field_has_a_flag():
    parser = cli.build_parser()
    train = parser._subparsers._group_actions[0].choices["train"]
    flags = {opt for a in train._actions for opt in a.option_strings}
    for f in dataclasses.fields(TrainConfig):
        assert "--" + f.name.replace("_", "-") in flags
    for flag in ("--ratio", "--tau", "--aux-task", "--shared-count", "--ssfa", "--no-ssfa", "--seed",
                 "--steps", "--out", "--diag-ipp", "--config"):
        assert flag in flags


def test_train_outputs(workdir):
    run = workdir / "run"
    for name in ("history.csv", "model.ckpt", "metrics.csv"):
        assert (run / name).exists()
    with open(run / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows[1:]] == ["L", "UL", "US", "UU"]


def test_eval(workdir, capsys):
    assert cli.main(["eval", "--ckpt", str(workdir / "run" / "model.ckpt"), "--bundle", str(workdir / "b.ssfa"),
                     "--protocol", "L", "--protocol", "UU", "--tau", "1.0", "--B", "4", "--mu", "2"]) == 0
    out = capsys.readouterr().out.split()
    assert out[0].startswith("L=") and out[1] == "UU=undefined"


def test_config_file_and_override(workdir, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("B = 4\nmu = 2\nwidths = 16, 12, 8, 8\nsteps = 3\ntau = 0.8\n")
    assert cli.main(["train", "--bundle", str(workdir / "b.ssfa"), "--config", str(cfg), "--steps", "2",
                     "--no-ssfa", "--out", str(tmp_path / "r")]) == 0
    lines = (tmp_path / "r" / "history.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[1].endswith(",0.8")


def test_diag_lemma1(tmp_path, capsys):
    assert cli.main(["diag", "lemma1", "--trials", "200", "--seed", "0", "--out", str(tmp_path / "l.csv")]) == 0
    assert "violations=0" in capsys.readouterr().out
    assert len((tmp_path / "l.csv").read_text().splitlines()) == 201


def test_diag_ipp_and_adist(workdir, tmp_path, capsys):
    args = ["--ckpt", str(workdir / "run" / "model.ckpt"), "--bundle", str(workdir / "b.ssfa")]
    assert cli.main(["diag", "ipp", *args, "--out", str(tmp_path / "ipp.csv")]) == 0
    rows = list(csv.reader(open(tmp_path / "ipp.csv")))
    assert rows[0] == ["group_id", "ipp", "improvement"] and len(rows) > 1
    assert cli.main(["diag", "adist", *args]) == 0
    value = float(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0.0 <= value <= 2.0


def test_dump_features(workdir, tmp_path, capsys):
    assert cli.main(["dump-features", "--ckpt", str(workdir / "run" / "model.ckpt"), "--bundle",
                     str(workdir / "b.ssfa"), "--out", str(tmp_path / "f.csv")]) == 0
    assert "rows=240" in capsys.readouterr().out


def test_grid(tmp_path, capsys):
    assert cli.main(["grid", "--n-labeled", "40", "--n-unlabeled", "200", "--n-classes", "4", "--n-test", "60",
                     "--seeds", "0", *TINY, "--out", str(tmp_path / "g")]) == 0
    assert "fixmatch" in capsys.readouterr().out
    assert (tmp_path / "g" / "summary.csv").exists()


def test_errors_are_machine_parsable(tmp_path, capsys):
    assert cli.main(["eval", "--ckpt", str(tmp_path / "nope.ckpt"), "--bundle", str(tmp_path / "nope")]) == 1
    last = capsys.readouterr().err.strip().splitlines()[-1]
    assert last.startswith("error: FileNotFoundError: ")
    assert cli.main(["train", "--tau", "2.0", "--out", str(tmp_path / "x"), "--n-labeled", "10"]) == 1
    assert capsys.readouterr().err.strip().startswith("error: ValueError: ")
    assert cli.main(["diag", "ipp"]) == 2


def test_console_script_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "ssfa_lab.cli", "diag", "lemma1", "--trials", "20"],
                        capture_output=True, text=True)
    assert ok.returncode == 0 and "trials=20" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "ssfa_lab.cli", "gen-bundle", "--ratio", "3", "--out",
                          str(tmp_path / "b")], capture_output=True, text=True)
    assert bad.returncode == 1 and bad.stderr.strip().splitlines()[-1].startswith("error: ValueError")
