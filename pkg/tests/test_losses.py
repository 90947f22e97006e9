import math

import numpy as np
import pytest
import torch

from sclera_ssl.losses import (
    LossConfig, LossWeights, boundary_weight_map, consistency_loss_ss, consistency_loss_u,
    dice_loss, mask_boundary, schedule, signed_distance_map, supervised_loss, surface_loss,
    total_loss, weighted_cross_entropy,
)
from oracles import (
    boundary_loop, boundary_weights_allpairs, ce_bal_np, central_diff, dice_np, masked_mse_np,
    mse_np, surface_np,
)


def random_probs(rng, shape=(2, 6, 6)):
    x = rng.uniform(0.15, 0.85, size=shape[1:])
    return np.stack([1 - x, x])


def random_mask(rng, shape=(6, 6), frac=0.4):
    m = (rng.random(shape) < frac).astype(np.int64)
    m[0, 0], m[-1, -1] = 1, 0
    return m


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


def autograd(fn, p):
    t = torch.tensor(p, dtype=torch.float64, requires_grad=True)
    fn(t).backward()
    return t.grad.numpy()


# -- gradients against finite differences of independent formulas ---------------

@pytest.mark.parametrize("seed", range(3))
def test_grad_ce_bal(seed):
    rng = np.random.default_rng(seed)
    p, gt = random_probs(rng), random_mask(rng)
    bal = boundary_weight_map(gt, 1.5)
    g = autograd(lambda t: weighted_cross_entropy(t, torch.tensor(gt), torch.tensor(bal), 1.0, 20.0), p)
    fd = central_diff(lambda q: ce_bal_np(q, gt, bal, 1.0, 20.0), p)
    assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_grad_dice(seed):
    rng = np.random.default_rng(seed)
    p, gt = random_probs(rng), random_mask(rng)
    g = autograd(lambda t: dice_loss(t, torch.tensor(gt)), p)
    fd = central_diff(lambda q: dice_np(q, gt), p)
    assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_grad_surface(seed):
    rng = np.random.default_rng(seed)
    p, gt = random_probs(rng), random_mask(rng)
    phi = signed_distance_map(gt)
    g = autograd(lambda t: surface_loss(t, torch.tensor(phi)), p)
    fd = central_diff(lambda q: surface_np(q, phi), p)
    assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_grad_consistency_u(seed):
    rng = np.random.default_rng(seed)
    p, q = random_probs(rng), random_probs(rng)
    g = autograd(lambda t: consistency_loss_u(t, torch.tensor(q)), p)
    fd = central_diff(lambda x: mse_np(x, q), p)
    assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_grad_consistency_ss(seed):
    rng = np.random.default_rng(seed)
    p, q = random_probs(rng), random_probs(rng)
    valid = (rng.random((6, 6)) < 0.6).astype(np.float64)
    g = autograd(lambda t: consistency_loss_ss(t, torch.tensor(q), torch.tensor(valid)), p)
    fd = central_diff(lambda x: masked_mse_np(x, q, valid), p)
    assert rel_err(g, fd) < 1e-4


# -- distance maps -----------------------------------------------------------------

def test_boundary_weights_match_allpairs_oracle():
    rng = np.random.default_rng(0)
    for sigma in (1.0, 3.0):
        for _ in range(3):
            m = (rng.random((16, 16)) < 0.5).astype(np.uint8)
            assert np.max(np.abs(boundary_weight_map(m, sigma) - boundary_weights_allpairs(m, sigma))) < 1e-6


def test_boundary_weight_simple_cases():
    assert not boundary_weight_map(np.zeros((8, 8)), 3.0).any()
    assert not boundary_weight_map(np.ones((8, 8)), 3.0).any()
    m = np.zeros((7, 7), dtype=np.uint8)
    m[3, 3] = 1
    w = boundary_weight_map(m, 1.0)
    assert w[3, 3] == 1.0
    for y, x in ((2, 3), (4, 3), (3, 2), (3, 4)):
        assert w[y, x] == pytest.approx(math.exp(-0.5), abs=1e-15)


def test_mask_boundary_matches_loop():
    rng = np.random.default_rng(3)
    for _ in range(5):
        m = (rng.random((12, 15)) < 0.5).astype(np.uint8)
        got = {tuple(p) for p in np.argwhere(mask_boundary(m))}
        assert got == set(boundary_loop(m))


def test_signed_distance_signs_and_magnitudes():
    rng = np.random.default_rng(4)
    m = (rng.random((14, 14)) < 0.5).astype(np.uint8)
    phi = signed_distance_map(m)
    H, W = m.shape
    fg = np.argwhere(m == 1)
    bg = np.argwhere(m == 0)
    for y in range(H):
        for x in range(W):
            if m[y, x]:
                d = np.min(np.hypot(*(bg - (y, x)).T))
                assert phi[y, x] == pytest.approx(-(d - 1.0))
                assert phi[y, x] <= 0
            else:
                d = np.min(np.hypot(*(fg - (y, x)).T))
                assert phi[y, x] == pytest.approx(d)
                assert phi[y, x] > 0
    assert not signed_distance_map(np.zeros((5, 5))).any()


# -- loss values -------------------------------------------------------------------

def test_perfect_prediction():
    gt = random_mask(np.random.default_rng(0), (8, 8))
    probs = torch.tensor(np.stack([1 - gt, gt]).astype(np.float64))
    bal = torch.tensor(boundary_weight_map(gt))
    assert float(weighted_cross_entropy(probs, torch.tensor(gt), bal, 1, 20)) == pytest.approx(0, abs=1e-6)
    assert float(dice_loss(probs, torch.tensor(gt))) <= 1e-6


def test_supervised_reduces_to_ce_plus_dice():
    rng = np.random.default_rng(7)
    p, gt = random_probs(rng, (2, 4, 4)), random_mask(rng, (4, 4))
    bal = boundary_weight_map(gt)
    phi = signed_distance_map(gt)
    w = LossWeights(1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    total, parts = supervised_loss(torch.tensor(p), torch.tensor(gt), w, torch.tensor(bal),
                                   torch.tensor(phi))
    # written out longhand for the 16 pixels
    ce = -sum(math.log(p[gt[i, j], i, j]) for i in range(4) for j in range(4)) / 16
    inter = sum(p[1, i, j] * gt[i, j] for i in range(4) for j in range(4))
    dice = 1 - 2 * inter / (p[1].sum() + gt.sum() + 1e-6)
    assert float(total) == pytest.approx(ce + dice, abs=1e-12)
    assert set(parts) == {"ce_bal", "dice", "surface", "sup"}


def test_supervised_full_matches_oracle():
    rng = np.random.default_rng(8)
    p, gt = random_probs(rng, (2, 8, 8)), random_mask(rng, (8, 8))
    bal, phi = boundary_weight_map(gt), signed_distance_map(gt)
    w = schedule(30)
    total, _ = supervised_loss(torch.tensor(p), torch.tensor(gt), w, torch.tensor(bal), torch.tensor(phi))
    ref = (ce_bal_np(p, gt, bal, 1.0, 20.0) + w.lambda3 * dice_np(p, gt)
           + w.lambda4 * surface_np(p, phi))
    assert float(total) == pytest.approx(ref, abs=1e-12)


def test_unnormalized_probs_rejected():
    p = torch.full((2, 4, 4), 0.7, dtype=torch.float64)
    gt = torch.zeros(4, 4, dtype=torch.long)
    with pytest.raises(ValueError):
        supervised_loss(p, gt, schedule(0), torch.zeros(4, 4), torch.zeros(4, 4))


def test_consistency_values():
    rng = np.random.default_rng(2)
    a, b = random_probs(rng), random_probs(rng)
    ta, tb = torch.tensor(a), torch.tensor(b)
    assert float(consistency_loss_u(ta, ta)) == 0.0
    assert float(consistency_loss_u(ta, tb)) == pytest.approx(mse_np(a, b), abs=1e-15)
    one = torch.tensor([[[1.0]], [[0.0]]], dtype=torch.float64)
    other = torch.tensor([[[0.0]], [[1.0]]], dtype=torch.float64)
    assert float(consistency_loss_u(one, other)) == 1.0
    with pytest.raises(ValueError):
        consistency_loss_u(ta, tb[:, :3])


def test_masked_consistency():
    rng = np.random.default_rng(3)
    a, b = random_probs(rng), random_probs(rng)
    ta, tb = torch.tensor(a), torch.tensor(b)
    assert float(consistency_loss_ss(ta, tb, torch.ones(6, 6))) == pytest.approx(
        float(consistency_loss_u(ta, tb)), abs=1e-15)
    assert float(consistency_loss_ss(ta, tb, torch.zeros(6, 6))) == 0.0
    half = np.zeros((6, 6))
    half[:, :3] = 1
    ref = ((a[:, :, :3] - b[:, :, :3]) ** 2).mean()
    assert float(consistency_loss_ss(ta, tb, torch.tensor(half))) == pytest.approx(ref, abs=1e-15)


def test_schedule_values():
    w0, w50, w120 = schedule(0), schedule(50), schedule(120)
    assert (w0.alpha, w0.lambda3, w0.lambda4, w0.lambda_u, w0.lambda_ss) == (0, 1, 0, 0, 0)
    assert (w50.alpha, w50.lambda_u, w50.lambda_ss) == (0.5, 1.0, 0.1)
    assert (w120.alpha, w120.lambda3, w120.lambda4, w120.lambda_u, w120.lambda_ss) == (0, 1, 0, 2.4, 0.24)
    assert (w0.lambda1, w0.lambda2) == (1.0, 20.0)
    with pytest.raises(ValueError):
        schedule(-1)


def test_stage_two_start():
    assert schedule(10, LossConfig(stage2_start_epoch=20)).lambda_ss == 0.0
    assert schedule(20, LossConfig(stage2_start_epoch=20)).lambda_ss == pytest.approx(0.04)


def test_total_loss():
    w = LossWeights(1, 20, 1, 0, 0.5, 0.1, 0)
    assert total_loss(1.0, 2.0, 3.0, w) == pytest.approx(2.3, abs=1e-15)
    l_s = torch.tensor(0.7)
    assert total_loss(l_s, torch.tensor(5.0), torch.tensor(6.0), schedule(0)) == l_s
    with pytest.raises(FloatingPointError, match="L_u"):
        total_loss(1.0, float("nan"), 0.0, w)
