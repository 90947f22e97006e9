import hashlib
import json

import numpy as np
import pytest

from sclera_ssl.cli import main
from sclera_ssl.config import ConfigError, RunConfig, load_config
from sclera_ssl.data import load_dataset, read_mask


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.png")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


TINY = ["--set", "train.base_channels=4", "--set", "train.input_size=[64,64]"]


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    assert main(["make-toy", "--out", str(root), "--count-labeled", "4", "--count-unlabeled", "4",
                 "--count-val", "2", "--count-test", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(toy, tmp_path_factory):
    run = tmp_path_factory.mktemp("runs") / "r"
    code = main(["train", "--data", str(toy), "--out", str(run), "--epochs", "2", "--x-l", "3",
                 "--label", "tiny"] + TINY)
    assert code == 0
    return run


def test_make_toy_counts_and_hash(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["make-toy", "--out", str(a)]) == 0
    assert main(["make-toy", "--out", str(b), "--seed", "7"]) == 0
    assert len(list(a.rglob("images/*.png"))) == 88
    assert len(list(a.rglob("masks/*.png"))) == 24
    assert _digest(a) == _digest(b)


def test_make_toy_rejects_small_size(tmp_path, capsys):
    assert main(["make-toy", "--out", str(tmp_path / "x"), "--size", "8", "8"]) == 1
    assert "32" in capsys.readouterr().err


def test_train_outputs(trained):
    hist = json.loads((trained / "history.json").read_text())
    assert len(hist["records"]) == 2 and hist["x_l"] == 3
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["data.x_l"] == 3 and cfg["train.epochs"] == 2
    for name in ("last.pt", "best.pt", "versions.json", "train_log.jsonl", "test_report.json"):
        assert (trained / name).exists(), name


def test_train_refuses_to_overwrite(toy, trained):
    assert main(["train", "--data", str(toy), "--out", str(trained), "--epochs", "2"] + TINY) == 1


def test_train_resume_continues(toy, trained, tmp_path):
    run = tmp_path / "resumed"
    assert main(["train", "--data", str(toy), "--out", str(run), "--epochs", "1", "--x-l", "3",
                 "--label", "tiny"] + TINY) == 0
    assert main(["train", "--data", str(toy), "--out", str(run), "--epochs", "2", "--x-l", "3",
                 "--label", "tiny", "--resume"] + TINY) == 0
    full = json.loads((trained / "history.json").read_text())["records"]
    resumed = json.loads((run / "history.json").read_text())["records"]
    assert [r["epoch"] for r in resumed] == [0, 1]
    assert resumed == full


def test_train_bad_inputs(toy, tmp_path):
    assert main(["train", "--out", str(tmp_path / "a")] + TINY) == 1  # no data root
    assert main(["train", "--data", str(toy), "--out", str(tmp_path / "b"), "--x-l", "99"] + TINY) == 1
    assert main(["train", "--data", str(toy), "--out", str(tmp_path / "c"),
                 "--set", "train.nope=1"]) == 1
    assert main(["train", "--data", str(toy), "--out", str(tmp_path / "d"),
                 "--set", "train.input_size=[50,50]"]) == 1


def test_env_data_root(toy, tmp_path, monkeypatch):
    monkeypatch.setenv("SCLERA_SSL_DATA", str(toy))
    cfg = load_config(None, {"out": str(tmp_path)})
    assert cfg.validate() == [] and cfg.resolved_root() == str(toy)


def test_config_file_round_trip(tmp_path):
    cfg = RunConfig(data_root="x", out="y")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_flat()))
    assert load_config(str(path)) == cfg
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_eval_report_overlays_and_repeatability(toy, trained, tmp_path):
    out1, out2 = tmp_path / "e1", tmp_path / "e2"
    for out in (out1, out2):
        assert main(["eval", "--checkpoint", str(trained / "best.pt"), "--data", str(toy),
                     "--out", str(out), "--x-l", "3"]) == 0
    rep = json.loads((out1 / "report.json").read_text())
    for key in ("mean_iou", "mean_recall", "mean_precision", "mean_f1"):
        assert 0.0 <= rep[key] <= 1.0
    assert rep == json.loads((out2 / "report.json").read_text())
    assert "mIoU %" in (out1 / "report.txt").read_text()
    assert len(list((out1 / "overlays").glob("*_overlay.png"))) == 3
    # the mean over dumped masks recomputed independently
    gt = {s.id.split("/")[-1]: s.mask for s in load_dataset(toy).test}
    ious = []
    for m in sorted((out1 / "masks").glob("*.png")):
        p, g = read_mask(m).astype(bool), gt[m.stem].astype(bool)
        union = (p | g).sum()
        ious.append((p & g).sum() / union if union else 1.0)
    assert np.mean(ious) == pytest.approx(rep["mean_iou"], abs=1e-12)


def test_predict_matches_eval(toy, trained, tmp_path):
    ev = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(trained / "best.pt"), "--data", str(toy),
                 "--out", str(ev)]) == 0
    pred = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(trained / "best.pt"),
                 "--images", str(toy / "test" / "images"), "--out", str(pred)]) == 0
    masks = sorted(pred.glob("*_mask.png"))
    assert len(masks) == 3 and len(list(pred.glob("*_prob.npy"))) == 3
    from PIL import Image
    for m in masks:
        raw = np.asarray(Image.open(m))
        assert set(np.unique(raw)) <= {0, 255}
        stem = m.name[: -len("_mask.png")]
        assert np.array_equal(read_mask(m), read_mask(ev / "masks" / f"{stem}.png"))


def test_eval_and_predict_errors(toy, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.pt"), "--data", str(toy),
                 "--out", str(tmp_path / "o")]) == 1
    assert main(["bogus"]) == 1


def test_report(trained, tmp_path):
    out = tmp_path / "rep"
    assert main(["report", str(trained), "--out", str(out)]) == 0
    assert (out / "curve_val_miou.png").exists() and (out / "curve_val_f1.png").exists()
    table = (out / "summary.txt").read_text()
    hist = json.loads((trained / "history.json").read_text())
    assert f"{100 * hist['records'][-1]['val_miou']:.2f}" in table
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["report", str(bad), "--out", str(out)]) == 1
