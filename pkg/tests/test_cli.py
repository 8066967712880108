import csv
import subprocess
import sys

import numpy as np
import pytest

from socnn.cli import ConfigError, parse_config_text, run, train_config_from
from socnn.data import checkpoint_load, load_dataset_dir
from socnn.network import init_socnn, predict_proba
from socnn.training import TrainConfig, evaluate, fit

TINY_CONFIG = """\
# tiny plan for fast command-line runs
k = 8
head = 8
stages = 8x8, 8x16, 16x32
tail = 64
cls_hidden = 32, 16
seg_hidden = 32, 16
epochs = 2
batch_size = 8
seed = 3
"""


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.cfg"
    config.write_text(TINY_CONFIG)
    data = root / "data"
    assert run(["gen-data", "--out", str(data), "--per-class", "5", "--points", "32", "--config", str(config)]) == 0
    out = root / "run"
    assert run(["train", "--config", str(config), "--data", str(data), "--out", str(out), "--precision", "64"]) == 0
    return root, config, data, out


def test_gen_data_writes_a_loadable_split(workspace):
    _, _, data, _ = workspace
    train = load_dataset_dir(data, "train")
    assert train.num_points == 32 and train.task == "classification"
    sizes = sum(len(load_dataset_dir(data, s)) for s in ("train", "val", "test"))
    assert sizes == 30


def test_train_writes_checkpoint_and_epoch_log(workspace):
    _, _, _, out = workspace
    rows = _read_csv(out / "train_log.csv")
    assert rows[0] == ["epoch", "loss", "lr", "accuracy"]
    assert [r[0] for r in rows[1:]] == ["0", "1"]
    assert all(np.isfinite(float(v)) for r in rows[1:] for v in r)
    store, config, extra = checkpoint_load(out / "model.ckpt", with_extra=True)
    assert store.dtype == np.float64 and config.k == 8 and extra["task"] == "classification"
    assert not (out / "error.txt").exists()


def test_eval_matches_in_process_training_and_evaluation(workspace, tmp_path):
    _, config_path, data, out = workspace
    assert run(["eval", "--config", str(config_path), "--data", str(data), "--checkpoint",
                str(out / "model.ckpt"), "--out", str(tmp_path)]) == 0
    rows = _read_csv(tmp_path / "metrics.csv")
    assert rows[0] == ["category", "name", "shapes", "accuracy"]

    # the same run repeated in this process
    raw = parse_config_text(config_path.read_text())
    _, config = checkpoint_load(out / "model.ckpt")
    train = load_dataset_dir(data, "train")
    store = init_socnn(config, seed=3, dtype=np.float64)
    fit(store, config, train, train_config_from(raw))
    result = evaluate(store, config, load_dataset_dir(data, "test"))
    assert rows[-1][0] == "all" and float(rows[-1][3]) == result["accuracy"]
    for row in rows[1:-1]:
        assert float(row[3]) == result["per_class"][int(row[0])]


def test_predict_one_vote_without_augmentation_equals_plain_forward(workspace, tmp_path):
    _, _, data, out = workspace
    ckpt = str(out / "model.ckpt")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["predict", "--checkpoint", ckpt, "--data", str(data), "--out", str(a)]) == 0
    assert run(["predict", "--checkpoint", ckpt, "--data", str(data), "--out", str(b),
                "--votes", "1", "--no-augment"]) == 0
    plain, voted = _read_csv(a / "predictions.csv"), _read_csv(b / "predictions.csv")
    assert plain == voted
    store, config = checkpoint_load(ckpt)
    test = load_dataset_dir(data, "test")
    probs = predict_proba(store, config, test.coords)
    assert [int(r[1]) for r in plain[1:]] == probs.argmax(axis=1).tolist()
    assert [float(r[3]) for r in plain[1:]] == probs.max(axis=1).tolist()


def test_predict_with_votes_is_reproducible(workspace, tmp_path):
    _, _, data, out = workspace
    args = ["predict", "--checkpoint", str(out / "model.ckpt"), "--data", str(data / "test" / "00000.txt"),
            "--votes", "3"]
    assert run(args + ["--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--out", str(tmp_path / "b")]) == 0
    assert _read_csv(tmp_path / "a" / "predictions.csv") == _read_csv(tmp_path / "b" / "predictions.csv")


def test_ablate_emits_five_variants_by_three_seeds(workspace, tmp_path):
    _, config_path, data, _ = workspace
    cfg = tmp_path / "one_epoch.cfg"
    cfg.write_text(config_path.read_text().replace("epochs = 2", "epochs = 1"))
    assert run(["ablate", "--config", str(cfg), "--data", str(data), "--seeds", "0,1,2",
                "--out", str(tmp_path)]) == 0
    rows = _read_csv(tmp_path / "ablation.csv")
    assert rows[0] == ["variant", "mp", "intra", "inter", "seed_0", "seed_1", "seed_2", "median_accuracy"]
    assert [r[0] for r in rows[1:]] == list("ABCDE")
    for r in rows[1:]:
        scores = [float(v) for v in r[4:]]
        assert all(0.0 <= s <= 1.0 for s in scores)
        assert scores[-1] == np.median(scores[:-1])


def test_segmentation_round_trip_through_the_cli(tmp_path):
    cfg = tmp_path / "seg.cfg"
    cfg.write_text(TINY_CONFIG.replace("epochs = 2", "epochs = 1"))
    data, out = tmp_path / "data", tmp_path / "out"
    assert run(["gen-data", "--task", "segmentation", "--per-class", "4", "--points", "32",
                "--out", str(data)]) == 0
    assert run(["train", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == 0
    assert run(["eval", "--data", str(data), "--checkpoint", str(out / "model.ckpt"), "--out", str(out)]) == 0
    rows = _read_csv(out / "metrics.csv")
    assert rows[0][3] == "miou" and rows[-1][1] == "mean"
    assert 0.0 <= float(rows[-1][3]) <= 1.0


def test_unknown_flag_exits_with_usage_and_status_two(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["train", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_module_entry_point_reports_usage_errors():
    proc = subprocess.run([sys.executable, "-m", "socnn", "eval", "--frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


def test_config_violations_are_named_errors():
    with pytest.raises(ConfigError, match="unknown key 'depth'"):
        parse_config_text("depth = 3")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("k = 3\nk = 4")
    with pytest.raises(ConfigError, match=":1:"):
        parse_config_text("k 3")
    with pytest.raises(ConfigError, match="batch_size"):
        train_config_from({"batch_size": "1"})
    with pytest.raises(ConfigError, match="lr"):
        train_config_from({"lr": "fast"})
    with pytest.raises(ConfigError, match="aug_scale_min"):
        train_config_from({"aug_scale_min": "big"})
    assert train_config_from({"epochs": "4", "augment": "no"}) == TrainConfig(epochs=4, augment=False)


def test_config_error_writes_error_artifact_and_fails(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("stages = 8x8, 9x16, 16x32\n")
    out = tmp_path / "out"
    code = run(["gen-data", "--config", str(bad), "--out", str(out)])
    assert code == 0  # gen-data ignores model keys
    code = run(["train", "--config", str(bad), "--data", str(out), "--out", str(out)])
    assert code == 1
    assert "ConfigError" in (out / "error.txt").read_text()
    assert "not chained" in capsys.readouterr().err
    # a later successful run clears the stale artifact
    assert run(["gen-data", "--out", str(out), "--per-class", "2", "--points", "16"]) == 0
    assert not (out / "error.txt").exists()


def test_missing_inputs_fail_cleanly(tmp_path):
    assert run(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)]) == 1
    assert run(["train", "--out", str(tmp_path)]) == 1
    assert run(["ablate", "--data", str(tmp_path), "--seeds", "x,y"]) == 1


@pytest.mark.parametrize("value", ["0", "-2", "many"])
def test_thread_cap_must_be_a_positive_integer(monkeypatch, tmp_path, value):
    monkeypatch.setenv("SHAPECONV_THREADS", value)
    assert run(["gen-data", "--out", str(tmp_path), "--per-class", "1", "--points", "8"]) == 1
    assert "SHAPECONV_THREADS" in (tmp_path / "error.txt").read_text()


def test_thread_cap_accepts_a_positive_integer(monkeypatch, tmp_path):
    monkeypatch.setenv("SHAPECONV_THREADS", "1")
    assert run(["gen-data", "--out", str(tmp_path), "--per-class", "1", "--points", "8"]) == 0
