import json
import subprocess
import sys

import pytest

from mvpolicy.cli import main
from mvpolicy.config import documented_keys
from mvpolicy.episodes import DatasetManifest

FAST = ["--set", "d=16", "--set", "iterations=2", "--set", "batch_size=2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--task", "push_buttons", "--variations", "2", "--unseen-variations", "1",
                 "--demos", "2", "--out", str(out)]) == 0
    return out


def test_gen_data_writes_manifest(data):
    m = DatasetManifest.load(data)
    assert len(m) == 6
    assert [s.variation_id for s in m.task_specs("seen")] == [0, 1]
    assert [s.variation_id for s in m.task_specs("unseen")] == [2]


def test_gen_data_task_options(tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--task", "push_buttons", "--n-objects", "2", "--return-home",
                 "--demos", "1", "--out", str(out)]) == 0
    spec = DatasetManifest.load(out).task_specs("seen")[0]
    assert spec.n_objects == 2 and spec.return_home


def test_train_eval_report(data, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(run), *FAST]) == 0
    assert (run / "final.ckpt").exists() and (run / "metrics.jsonl").exists()
    rep = tmp_path / "eval.json"
    assert main(["eval", "--ckpt", str(run / "final.ckpt"), "--data", str(data), "--episodes", "2",
                 "--out", str(rep)]) == 0
    body = json.loads(rep.read_text())
    assert {o["split"] for o in body["results"]} == {"seen", "unseen"}
    assert main(["report", "--runs", str(run), "--evals", str(rep), "--out", str(tmp_path / "rp")]) == 0
    for f in ("loss.png", "success.png", "summary.txt"):
        assert (tmp_path / "rp" / f).exists()
    capsys.readouterr()


def test_resume_continues(data, tmp_path):
    a = tmp_path / "a"
    assert main(["train", "--data", str(data), "--out", str(a), *FAST]) == 0
    b = tmp_path / "b"
    assert main(["train", "--data", str(data), "--out", str(b), "--resume", str(a / "final.ckpt"),
                 "--set", "d=16", "--set", "iterations=4", "--set", "batch_size=2"]) == 0
    from mvpolicy.training import Checkpoint

    assert Checkpoint.load(b / "final.ckpt").iteration == 4


def test_config_file(data, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"data: {data}\nd: 16\niterations: 1\nbatch_size: 1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0


def test_ablate_empty_dataset(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["ablate", "--data", str(tmp_path / "empty"), "--variants", "R1"]) == 1
    assert "empty dataset" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["train", "--set", "no_such_key=1"],
    ["train", "--set", "iterations"],
    ["train", "--bogus-flag"],
    ["train", "--set", "d=10"],
    ["gen-data", "--task", "fly", "--out", "x"],
    ["gen-data", "--task", "tower", "--variations", "1000", "--out", "x"],
    ["eval", "--ckpt", "/nonexistent.ckpt", "--task", "tower"],
    [],
])
def test_bad_input_exits_1(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "Traceback" not in err


def test_unknown_config_key_is_named(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("lerning_rate: 0.1\n")
    assert main(["train", "--config", str(cfg)]) == 1
    assert "lerning_rate" in capsys.readouterr().err


def test_documented_keys_cover_config():
    keys = documented_keys()
    for k in ("learning_rate", "batch_size", "iterations", "d", "cameras", "data", "budget"):
        assert k in keys


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "mvpolicy", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
