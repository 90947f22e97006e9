import numpy as np
import pytest
import torch

from sclera_ssl.data import ToyDatasetSpec, generate_toy_dataset
from sclera_ssl.losses import schedule
from sclera_ssl.network import NetworkOutputs, build_model
from sclera_ssl.spatial import IDENTITY, SpatialTransform
from sclera_ssl.trainer import (
    TrainConfig, TrainHistory, _TargetCache, epoch_plan, guess_labels_sslss, guess_labels_ssld,
    load_checkpoint, make_optimizer, model_from_checkpoint, train, train_step,
)


class Indicator(torch.nn.Module):
    """Stub: foreground probability is the first channel, optionally thresholded."""

    def __init__(self, hard=False):
        super().__init__()
        self.hard = hard

    def forward(self, x):
        fg = x[:, 0]
        if self.hard:
            fg = (fg > 0.5).to(x.dtype)
        return NetworkOutputs.from_probs(torch.stack([1 - fg, fg], 1))


def _img(seed, H=32, W=32):
    return np.random.default_rng(seed).random((H, W, 3))


def test_ssld_average_of_two_maps():
    p, q = _img(0), _img(1)
    g, _ = guess_labels_ssld(Indicator(), None, 2, np.random.default_rng(0), copies=[p, q])
    expect = (torch.tensor(p[..., 0], dtype=torch.float32) + torch.tensor(q[..., 0], dtype=torch.float32)) / 2
    assert torch.allclose(g.probs[1], expect, atol=1e-7)
    assert (g.probs.sum(0) - 1).abs().max() < 1e-6


def test_ssld_single_neutral_copy():
    x = _img(2)
    g, _ = guess_labels_ssld(Indicator(), x, 1, np.random.default_rng(0), copies=[x])
    direct = Indicator()(torch.from_numpy(x.astype(np.float32)).permute(2, 0, 1)[None]).fused_probs[0]
    assert torch.equal(g.probs, direct)
    with pytest.raises(ValueError):
        guess_labels_ssld(Indicator(), x, 0, np.random.default_rng(0))


def test_sslss_with_identity_equals_ssld():
    copies = [_img(3), _img(4)]
    a, _ = guess_labels_ssld(Indicator(), None, 2, np.random.default_rng(0), copies=copies)
    b, _, _ = guess_labels_sslss(Indicator(), None, 2, np.random.default_rng(0), copies=copies,
                                 transforms=[IDENTITY, IDENTITY])
    assert torch.equal(a.probs, b.probs)
    assert b.validity.all()


def test_sslss_translation_recovers_indicator():
    x = (_img(5) > 0.5).astype(np.float64)
    t = SpatialTransform(0.0, (3, -2))
    g, moved, _ = guess_labels_sslss(Indicator(hard=True), None, 1, np.random.default_rng(0),
                                     copies=[x], transforms=[t])
    v = g.validity.bool()
    assert v.sum() == (32 - 3) * (32 - 2)
    assert torch.equal(g.probs[1][v], torch.tensor(x[..., 0], dtype=torch.float32)[v])


def test_sslss_mixed_validity_averages_seen_copies():
    copies = [_img(6), _img(6)]
    ts = [IDENTITY, SpatialTransform(0.0, (4, 0))]
    g, _, _ = guess_labels_sslss(Indicator(), None, 2, np.random.default_rng(0), copies=copies,
                                 transforms=ts)
    # only the identity copy sees the right-most columns after warping back
    assert g.validity.all()
    assert torch.allclose(g.probs[1], torch.tensor(copies[0][..., 0], dtype=torch.float32), atol=1e-6)


def test_epoch_plan_covers_unlabeled_once():
    cfg = TrainConfig()
    lab, unl = epoch_plan(8, 64, cfg, np.random.default_rng(0))
    assert lab.shape == (32, 2) and unl.shape == (32, 2)
    assert sorted(unl.ravel().tolist()) == list(range(64))
    assert np.bincount(lab.ravel(), minlength=8).tolist() == [8] * 8
    lab, unl = epoch_plan(5, 0, cfg, np.random.default_rng(0))
    assert lab.shape == (3, 2) and unl is None


@pytest.fixture(scope="module")
def tiny():
    data = generate_toy_dataset(ToyDatasetSpec(4, 4, 2, 0, (64, 64), seed=3))
    cfg = TrainConfig(epochs=2, input_size=(64, 64), base_channels=4, seed=5)
    return data, cfg


def _state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_epoch_zero_step_is_supervised(tiny):
    data, cfg = tiny
    results = []
    for unl, c in ((data.train_unlabeled[:2], cfg), ([], TrainConfig(**{**cfg.__dict__, "supervised_only": True}))):
        torch.manual_seed(0)
        model = build_model(c.network_config(3))
        opt = make_optimizer(model, c)
        train_step(model, opt, data.train_labeled[:2], unl, schedule(0, c.loss_config()),
                   np.random.default_rng(1), np.random.default_rng(2), c)
        results.append(_state(model))
    a, b = results
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_later_step_uses_unlabeled(tiny):
    data, cfg = tiny
    torch.manual_seed(0)
    model = build_model(cfg.network_config(3))
    opt = make_optimizer(model, cfg)
    parts = train_step(model, opt, data.train_labeled[:2], data.train_unlabeled[:2], schedule(40),
                       np.random.default_rng(1), np.random.default_rng(2), cfg)
    assert parts["L_u"] > 0 and parts["L_ss"] > 0
    assert parts["total"] == pytest.approx(parts["L_s"] + 0.8 * parts["L_u"] + 0.08 * parts["L_ss"], rel=1e-6)


def test_cache_reuses_targets(tiny):
    data, _ = tiny
    cache = _TargetCache(3.0)
    a = cache.get(data.train_labeled[0])
    assert cache.get(data.train_labeled[0]) is a


def test_train_determinism_resume_and_checkpoints(tiny, tmp_path):
    data, cfg = tiny
    _, h1 = train(cfg, data)
    _, h2 = train(cfg, data)
    assert h1.records == h2.records
    assert [r["epoch"] for r in h1.records] == [0, 1]
    run = tmp_path / "run"
    run.mkdir()
    ckpt1, _ = train(TrainConfig(**{**cfg.__dict__, "epochs": 1}), data, run_dir=run)
    assert (run / "last.pt").exists() and (run / "best.pt").exists()
    assert (run / "last.json").exists() and (run / "history.json").exists()
    ckpt2, h3 = train(cfg, data, resume=load_checkpoint(run / "last.pt"))
    assert h3.records == h1.records
    model = model_from_checkpoint(ckpt2, "last")
    assert not model.training
    back = TrainHistory.from_json(run / "history.json")
    assert back.records == h1.records[:1]


def test_history_validation(tmp_path):
    h = TrainHistory()
    h.append({"epoch": 0, "val_miou": 0.1})
    with pytest.raises(ValueError):
        h.append({"epoch": 2, "val_miou": 0.1})
    bad = tmp_path / "bad.json"
    bad.write_text('{"records": [{"epoch": 0}]}')
    with pytest.raises(ValueError):
        TrainHistory.from_json(bad)


def test_config_validation_and_round_trip():
    assert TrainConfig(k=0, epochs=0, input_size=(50, 50)).validate()
    cfg = TrainConfig(epochs=3, input_size=(64, 64))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.validate() == []
    with pytest.raises(ValueError):
        train(TrainConfig(k=0), generate_toy_dataset(ToyDatasetSpec(1, 0, 0, 0, (64, 64))))


class Recorder(torch.nn.Module):
    """Stub with one weight that logs grad mode and train/eval mode per call."""

    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor(1.0))
        self.calls = []

    def forward(self, x):
        self.calls.append((torch.is_grad_enabled(), self.training, x.shape[0]))
        fg = torch.sigmoid(self.w * (x[:, 0] - 0.5))
        return NetworkOutputs.from_probs(torch.stack([1 - fg, fg], 1))


@pytest.mark.parametrize("joint", [True, False])
def test_guessing_passes_get_no_gradient(tiny, joint):
    data, cfg = tiny
    cfg = TrainConfig(**{**cfg.__dict__, "joint_forward": joint, "deep_supervision": False})
    model = Recorder()
    opt = make_optimizer(model, cfg)
    train_step(model, opt, data.train_labeled[:2], data.train_unlabeled[:2], schedule(40),
               np.random.default_rng(1), np.random.default_rng(2), cfg)
    guess, *loss_passes = model.calls
    # 2 images x k=2 copies, plain and transformed
    assert guess == (False, False, 8)
    assert all(grad and train for grad, train, _ in loss_passes)
    assert sum(n for *_, n in loss_passes) == 10
    assert model.w.grad is None or torch.isfinite(model.w.grad)


def test_overfit_fixed_batch(tiny):
    data, cfg = tiny
    torch.manual_seed(0)
    model = build_model(cfg.network_config(3))
    opt = make_optimizer(model, cfg)
    batch = data.train_labeled[:2]
    losses = [train_step(model, opt, batch, [], schedule(0), np.random.default_rng(0), None, cfg)["total"]
              for _ in range(50)]
    assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])
