import json
import os
import subprocess
import sys

import pytest

from mvcl.cli import build_parser, effective_config, main
from mvcl.config import load_config

SMALL = ["--set", "synthetic.subjects_per_class=4", "--set", "train.hidden=8", "--set", "train.kmeans_restarts=2"]


@pytest.fixture
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("MVCL_WORKERS", raising=False)
    return tmp_path


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_gradcheck_seed_1(in_tmp, capsys):
    code, out, _ = run(["gradcheck", "--seed", "1"], capsys)
    assert code == 0
    top = float(out.strip().splitlines()[-1].split()[-1])
    assert top <= 1e-6


def test_gradcheck_failure_exits_5(in_tmp, capsys):
    # a coarse step at low temperature leaves O(h^2) truncation above the threshold
    code, _, err = run(["gradcheck", "--tau", "0.05", "--step", "1e-3"], capsys)
    assert code == 5 and "max_rel_error" in err


def test_train_zero_epochs(in_tmp, capsys):
    code, _, _ = run(["train", "--epochs", "0", *SMALL], capsys)
    assert code == 0
    assert (in_tmp / "out" / "train.jsonl").read_text() == ""
    assert json.loads((in_tmp / "out" / "summary.json").read_text())["epochs"] == 0


def test_usage_errors_exit_2(in_tmp, capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--bogus-flag"])
    assert info.value.code == 2 and "--bogus-flag" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["gradcheck", "--step", "1e-2"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code == 2


def test_config_errors_exit_3(in_tmp, capsys):
    (in_tmp / "bad.cfg").write_text("train.nonsense = 1\n", encoding="utf-8")
    code, _, err = run(["train", "--config", "bad.cfg"], capsys)
    assert code == 3 and "train.nonsense" in err
    code, _, err = run(["train", "--tau", "-1"], capsys)
    assert code == 3 and "tau" in err


def test_data_errors_exit_4(in_tmp, capsys):
    (in_tmp / "out").mkdir()
    (in_tmp / "out" / "dataset.mvlm").write_bytes(b"NOPE" + bytes(20))
    code, _, err = run(["cluster"], capsys)
    assert code == 4 and "offset" in err
    code, _, err = run(["eval", "--params", "missing.json", "--data", "elsewhere"], capsys)
    assert code == 4


def test_workflow(in_tmp, capsys):
    assert run(["gen-data", *SMALL], capsys)[0] == 0
    code, out, _ = run(["train", "--epochs", "2", *SMALL, "--set", "eval.holdout_per_class=1"], capsys)
    assert code == 0 and "heldout_accuracy" in out
    lines = (in_tmp / "out" / "train.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [0, 1]
    code, out, _ = run(["eval", *SMALL, "--set", "eval.holdout_per_class=1"], capsys)
    assert code == 0 and out.startswith("subjects: 6")
    code, out, _ = run(["infer", "--id", "3", *SMALL], capsys)
    assert code == 0 and out.startswith("class: ")
    code, _, _ = run(["infer", "--id", "999", *SMALL], capsys)
    assert code == 4
    assert run(["cluster", *SMALL], capsys)[0] == 0
    rows = (in_tmp / "out" / "assignments.csv").read_text().splitlines()
    assert rows[0] == "subject_id,cluster" and len(rows) == 25


def test_effective_config_precedence(in_tmp):
    (in_tmp / "c.cfg").write_text("train.workers = 2\ntrain.epochs = 9\n", encoding="utf-8")
    parser = build_parser()
    cfg = effective_config(parser.parse_args(["train", "--config", "c.cfg"]), env={})
    assert (cfg.train.workers, cfg.train.epochs) == (2, 9)
    cfg = effective_config(parser.parse_args(["train", "--config", "c.cfg"]), env={"MVCL_WORKERS": "3"})
    assert cfg.train.workers == 3
    args = parser.parse_args(["train", "--config", "c.cfg", "--workers", "1", "--set", "train.epochs=4"])
    cfg = effective_config(args, env={"MVCL_WORKERS": "3"})
    assert (cfg.train.workers, cfg.train.epochs) == (1, 4)


def test_written_config_reloads(in_tmp, capsys):
    assert run(["gen-data", "--seed", "12", *SMALL], capsys)[0] == 0
    cfg = load_config(in_tmp / "out" / "config.txt")
    assert cfg.seed == 12 and cfg.synthetic.subjects_per_class == 4


def test_console_entry_points(in_tmp):
    env = {k: v for k, v in os.environ.items() if k != "MVCL_WORKERS"}
    r = subprocess.run([sys.executable, "-m", "mvcl", "--help"], capture_output=True, text=True, env=env)
    assert r.returncode == 0 and "gradcheck" in r.stdout
    r = subprocess.run([sys.executable, "-m", "mvcl", "train", "--nope"], capture_output=True, text=True, env=env)
    assert r.returncode == 2 and "--nope" in r.stderr
