import csv
import hashlib
import json

import numpy as np
import pytest

from fbpfusion import ops
from fbpfusion.cli import main
from fbpfusion.config import dump_config, load_config, parse_config
from fbpfusion.errors import ConfigError
from fbpfusion.model import load_model
from fbpfusion.tensor import Tensor

SMALL = """
[run]
seed = 0

[model]
encoder = tiny

[train]
epochs = {epochs}
lr = 0.003

[data]
train_samples = 14
val_samples = 7
test_samples = 14
noise = 0.3
"""


def tree_hashes(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def write_config(path, epochs=2, extra=""):
    path.write_text(SMALL.format(epochs=epochs) + extra)
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "small.ini", epochs=30)
    assert main(["synth", "--config", cfg, "--out", str(root / "data")]) == 0
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root, cfg


# ---------------------------------------------------------------- config


def test_config_defaults_and_round_trip():
    cfg = load_config(None)
    assert cfg.model.fbp_o == 128 and cfg.train.lr == 1e-4 and cfg.data.train_samples == 70
    again = parse_config(dump_config(cfg))
    assert again == cfg


@pytest.mark.parametrize("text", [
    "[model]\nfbp_oo = 3\n",
    "[mystery]\nx = 1\n",
    "[run]\nseed = 1\nextra = 2\n",
    "[model]\nfbp_o = many\n",
    "[model]\nlambda_video = 2\n",
    "[data]\ntrain_samples = 0\n",
    "[data]\nvideo_signal = maybe\n",
    "[spectrogram]\nsample_rate = 8000\n",
])
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_seed_feeds_model_and_data():
    cfg = parse_config("[run]\nseed = 7\n")
    assert cfg.model.seed == 7 and cfg.data.seed == 7
    assert cfg.with_overrides(seed=3).model.seed == 3


# ---------------------------------------------------------------- synth


def test_synth_default_config_writes_three_manifests(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path)]) == 0
    for split in ("train", "val", "test"):
        rows = (tmp_path / f"{split}.csv").read_text().splitlines()
        assert len(rows) == 71
    assert "train: 70 samples" in capsys.readouterr().out


def test_synth_rerun_is_identical(tmp_path):
    cfg = write_config(tmp_path / "c.ini")
    main(["synth", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["synth", "--config", cfg, "--out", str(tmp_path / "b")])
    assert tree_hashes(tmp_path / "a") == tree_hashes(tmp_path / "b")
    main(["synth", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "c")])
    assert tree_hashes(tmp_path / "a") != tree_hashes(tmp_path / "c")


def test_synth_empty_dataset_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini", extra="")
    text = (tmp_path / "c.ini").read_text().replace("train_samples = 14", "train_samples = 0")
    (tmp_path / "c.ini").write_text(text)
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "d")]) == 1
    assert "empty" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--epochs", "x"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 1


def test_missing_config_file_exit_1(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path)]) == 1


# ---------------------------------------------------------------- train / eval


def test_train_outputs(workspace):
    root, _ = workspace
    run = root / "run"
    model, meta = load_model(run / "model.fbpm")
    rows = list(csv.reader(open(run / "loss.csv")))
    assert rows[0] == ["epoch", "train_loss"] and len(rows) == 31
    assert [float(r[1]) for r in rows[1:]] == meta["losses"]
    assert meta["model_config"]["encoder"] == "tiny"


def test_reloaded_checkpoint_reproduces_final_loss(workspace, tmp_path):
    root, cfg = workspace
    assert main(["eval", "--config", cfg, "--checkpoint", str(root / "run/model.fbpm"),
                 "--manifest", str(root / "data/train.csv"), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    meta = json.loads((root / "run/model.fbpm.json").read_text())
    assert abs(report["loss"] - meta["final_train_loss"]) < 1e-6


def test_overfit_run_is_perfect_on_train_split(workspace, tmp_path):
    root, cfg = workspace
    main(["eval", "--config", cfg, "--checkpoint", str(root / "run/model.fbpm"),
          "--manifest", str(root / "data/train.csv"), "--out", str(tmp_path)])
    assert json.loads((tmp_path / "report.json").read_text())["accuracy"] == 1.0


def test_confusion_csv_shape(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert main(["eval", "--config", cfg, "--checkpoint", str(root / "run/model.fbpm"),
                 "--data", str(root / "data"), "--out", str(tmp_path)]) == 0
    assert "accuracy:" in capsys.readouterr().out
    rows = list(csv.reader(open(tmp_path / "report_confusion.csv")))
    assert len(rows) == 8 and all(len(r) == 7 for r in rows)
    counts = np.array(rows[1:], dtype=int)
    assert counts.sum() == 14


def test_fusion_flag_and_seed_override(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "concat"
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(out),
                 "--fusion", "concat", "--epochs", "1", "--seed", "5", "--lambda-video", "0"]) == 0
    model, meta = load_model(out / "model.fbpm")
    assert meta["model_config"]["fusion"] == "concat" and meta["model_config"]["seed"] == 5
    assert meta["model_config"]["lambda_video"] == 0.0
    assert "fbp.U" not in model.params and len(meta["losses"]) == 1


def test_train_does_not_touch_inputs(workspace, tmp_path):
    root, cfg = workspace
    before = tree_hashes(root / "data")
    main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path), "--epochs", "1"])
    assert tree_hashes(root / "data") == before
    assert {p.name for p in tmp_path.iterdir()} == {"model.fbpm", "model.fbpm.json", "loss.csv"}


def test_train_missing_data_exit_2(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 2


def test_eval_mismatched_checkpoint_exit_2(workspace, tmp_path):
    root, cfg = workspace
    bad = tmp_path / "bad.fbpm"
    bad.write_bytes((root / "run/model.fbpm").read_bytes())
    meta = json.loads((root / "run/model.fbpm.json").read_text())
    meta["model_config"]["fbp_o"] = 64
    (tmp_path / "bad.fbpm.json").write_text(json.dumps(meta))
    assert main(["eval", "--config", cfg, "--checkpoint", str(bad), "--data", str(root / "data"),
                 "--out", str(tmp_path)]) == 2


def test_ensemble_flag(workspace, tmp_path):
    root, cfg = workspace
    second = tmp_path / "second"
    main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(second), "--seed", "1", "--epochs", "5"])
    ckpts = f"{root / 'run/model.fbpm'},{second / 'model.fbpm'}"
    assert main(["eval", "--config", cfg, "--ensemble", ckpts, "--data", str(root / "data"),
                 "--out", str(tmp_path / "ens")]) == 0
    report = json.loads((tmp_path / "ens/report.json").read_text())
    probs = []
    for ck in ckpts.split(","):
        out = tmp_path / ("m" + str(len(probs)))
        main(["eval", "--config", cfg, "--checkpoint", ck, "--data", str(root / "data"), "--out", str(out)])
        probs.append([s["probabilities"] for s in json.loads((out / "report.json").read_text())["per_sample"]])
    mean = np.mean(probs, axis=0)
    np.testing.assert_allclose([s["probabilities"] for s in report["per_sample"]], mean, atol=1e-12)
    assert main(["eval", "--config", cfg, "--ensemble", str(root / "run/model.fbpm"), "--data", str(root / "data"),
                 "--out", str(tmp_path / "one")]) == 2


# ---------------------------------------------------------------- attention dump


def read_dump(path):
    rows = list(csv.DictReader(open(path)))
    streams = {}
    for r in rows:
        streams.setdefault(r["stream"], []).append(float(r["weight"]))
    return rows, streams


def test_attention_dump_sums_to_one(workspace, tmp_path):
    root, cfg = workspace
    assert main(["attention-dump", "--config", cfg, "--checkpoint", str(root / "run/model.fbpm"),
                 "--data", str(root / "data"), "--sample-id", "test_0002", "--out", str(tmp_path)]) == 0
    rows, streams = read_dump(tmp_path / "attention_test_0002.csv")
    assert list(rows[0]) == ["sample_id", "stream", "index", "weight"]
    assert set(streams) == {"audio", "video"}
    for w in streams.values():
        assert abs(sum(w) - 1) < 1e-6


def test_attention_dump_lambda_video_zero(workspace, tmp_path):
    root, cfg = workspace
    main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path / "m"),
          "--epochs", "1", "--lambda-video", "0"])
    main(["attention-dump", "--config", cfg, "--checkpoint", str(tmp_path / "m/model.fbpm"),
          "--data", str(root / "data"), "--sample-id", "val_0001", "--out", str(tmp_path)])
    _, streams = read_dump(tmp_path / "attention_val_0001.csv")
    video = streams["video"]
    # the model runs in float32, so weights are exactly float32(1/L)
    assert len(set(video)) == 1
    assert video[0] == float(np.float32(1 / len(video)))


def test_attention_dump_unknown_sample(workspace, tmp_path):
    root, cfg = workspace
    assert main(["attention-dump", "--config", cfg, "--checkpoint", str(root / "run/model.fbpm"),
                 "--data", str(root / "data"), "--sample-id", "nope", "--out", str(tmp_path)]) == 2


# ---------------------------------------------------------------- selfcheck


def test_selfcheck_passes(tmp_path, capsys):
    assert main(["selfcheck", "--out", str(tmp_path)]) == 0
    results = json.loads((tmp_path / "selfcheck.json").read_text())
    assert all(r["passed"] for r in results)
    assert "selfcheck passed" in capsys.readouterr().out


def test_selfcheck_catches_wrong_gradient(monkeypatch, capsys):
    def bad_tanh(x):
        y = np.tanh(x.data)
        return Tensor._from_op(y, (x,), lambda g: (g * (1.0 - y * y) * 1.001,), "tanh")

    monkeypatch.setattr(ops, "tanh", bad_tanh)
    assert main(["selfcheck"]) == 3
    out = capsys.readouterr().out
    assert "FAIL grad_tanh" in out and "FAIL grad_model" in out
