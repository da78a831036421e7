import dataclasses
import itertools
import math
import re

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from vninet.core_math import apply_rotation, sample_rotation
from vninet.data import DatasetIndex, SyntheticConfig, gen_synthetic, load_index
from vninet.model import gem_pool, init_params
from vninet.training import (MARGIN, TrainConfig, Triplet, backward, batch_hard_mine,
                             finite_difference_grads, gradient_relative_errors, lr_schedule,
                             make_batches, make_optimizer, mined_loss, optimizer_step,
                             sq_distances, step_count, train_loop, triplet_loss)

from conftest import TOY

D = torch.float64
PAIRS = np.array([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=bool)


@pytest.fixture(scope="module")
def tiny_index(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    paths = gen_synthetic(out, SyntheticConfig(scenes=3, frames_per_scene=4, test_scenes=0,
                                               seed=4))
    return load_index(paths["train"])


def clouds(seed, b=4, n=24):
    return torch.as_tensor(np.random.default_rng(seed).uniform(-1, 1, (b, n, 3)))


# --- loss ------------------------------------------------------------------

@pytest.mark.parametrize("d_ap,d_an,expected", [(0.2, 1.0, 0.0), (0.7, 0.7, 0.5),
                                                (0.9, 0.5, 0.9)])
def test_triplet_loss_examples(d_ap, d_an, expected):
    assert math.isclose(triplet_loss(d_ap, d_an), expected, abs_tol=1e-15)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 2))
def test_triplet_loss_properties(d_ap, d_an, delta, margin):
    loss = triplet_loss(d_ap, d_an, margin)
    assert loss >= 0.0
    assert triplet_loss(d_ap + delta, d_an, margin) >= loss
    assert triplet_loss(d_ap, d_an + delta, margin) <= loss
    assert (loss == 0.0) == (d_ap - d_an + margin <= 0.0)


def test_triplet_loss_tensor_form():
    out = triplet_loss(torch.tensor([0.2, 0.9]), torch.tensor([1.0, 0.5]))
    assert torch.allclose(out, torch.tensor([0.0, 0.9]))


# --- mining ----------------------------------------------------------------

def test_mining_needs_negatives():
    desc = torch.tensor([[0.0], [1.0]], dtype=D)
    assert batch_hard_mine(desc, np.array([[0, 1], [1, 0]], dtype=bool)) == []


@given(st.integers(0, 2**31 - 1))
def test_mining_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    desc = torch.as_tensor(rng.standard_normal((4, 3)) * 0.4)
    d = sq_distances(desc)
    mined = batch_hard_mine(desc, PAIRS)
    expected = []
    for a in range(4):
        p = max((j for j in range(4) if PAIRS[a, j]), key=lambda j: (float(d[a, j]), -j))
        n = min((j for j in range(4) if j != a and not PAIRS[a, j]),
                key=lambda j: (float(d[a, j]), j))
        if float(d[a, p]) - float(d[a, n]) + MARGIN > 0:
            expected.append(Triplet(a, p, n))
    assert mined == expected


def test_mining_identical_descriptors_keeps_all():
    desc = torch.zeros(4, 2, dtype=D)
    assert batch_hard_mine(desc, PAIRS) == [Triplet(0, 1, 2), Triplet(1, 0, 2),
                                            Triplet(2, 3, 0), Triplet(3, 2, 0)]
    assert math.isclose(float(mined_loss(desc, batch_hard_mine(desc, PAIRS))), MARGIN)


def test_mining_negative_mask_and_shape_check():
    desc = torch.zeros(4, 2, dtype=D)
    neg = np.zeros((4, 4), dtype=bool)
    neg[:, 3] = neg[3, :] = True
    mined = batch_hard_mine(desc, PAIRS, neg)
    # 3 is the only negative for 0 and 1, positive for 2; 3 itself may use 0 or 1
    assert mined == [Triplet(0, 1, 3), Triplet(1, 0, 3), Triplet(3, 2, 0)]
    with pytest.raises(ValueError):
        batch_hard_mine(desc, PAIRS[:3, :3])


def test_mining_is_rotation_invariant(toy_model):
    pts = clouds(3, n=32)
    turned = torch.as_tensor(np.stack([apply_rotation(c.numpy(), sample_rotation(i))
                                       for i, c in enumerate(pts)]))
    toy_model.eval()
    with torch.no_grad():
        a, b = toy_model(pts), toy_model(turned)
    assert batch_hard_mine(a, PAIRS) == batch_hard_mine(b, PAIRS)


# --- gradients -------------------------------------------------------------

def test_zero_loss_batch_has_zero_gradients(toy_model):
    loss, grads, triplets = backward(toy_model, clouds(0), np.zeros((4, 4), dtype=bool))
    assert loss == 0.0 and triplets == []
    assert all(not g.any() for g in grads.values())


def test_gradients_match_central_differences():
    # the loss is stiff enough that h = 1e-5 is too coarse; see the ledger
    model = init_params(dataclasses.replace(TOY, mlp_dims=(8,)), seed=2)
    pts = clouds(1)
    loss, grads, triplets = backward(model, pts, PAIRS)
    assert loss > 0 and triplets
    worst = {}
    for h in (1e-5, 1e-7):
        numeric = finite_difference_grads(model, pts, triplets, h=h)
        errs = gradient_relative_errors(grads, numeric)
        worst[h] = max(float(e.max()) for e in errs.values())
    assert worst[1e-7] < 1e-4
    assert worst[1e-7] < worst[1e-5]


def test_gem_exponent_gradient_closed_form():
    x = torch.tensor([[0.5], [4.0]], dtype=D)
    p = torch.tensor(1.0, dtype=D, requires_grad=True)
    (g,) = torch.autograd.grad(gem_pool(x, p).sum(), p)
    m = x.mean()
    expected = m * (-torch.log(m) + (x * torch.log(x)).mean() / m)
    assert math.isclose(float(g), float(expected), rel_tol=1e-12)


# --- Adam ------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params(toy_model):
    opt = make_optimizer(toy_model)
    before = [p.detach().clone() for p in toy_model.parameters()]
    zeros = {n: torch.zeros_like(p) for n, p in toy_model.named_parameters()}
    optimizer_step(toy_model, zeros, opt)
    optimizer_step(toy_model, zeros, opt)
    assert all(torch.equal(a, b) for a, b in zip(before, toy_model.parameters()))
    assert step_count(opt) == 2


def test_adam_first_step_moves_by_lr(toy_model):
    opt = make_optimizer(toy_model, lr=0.1)
    name, param = next(iter(toy_model.named_parameters()))
    before = param.detach().clone()
    optimizer_step(toy_model, {name: torch.ones_like(param)}, opt)
    # bias-corrected m = v = 1, so the step is lr / (1 + eps)
    assert torch.allclose(param.detach() - before, torch.full_like(before, -0.1), atol=1e-8)


def test_adam_lr_override_and_shape_check(toy_model):
    opt = make_optimizer(toy_model)
    name, param = next(iter(toy_model.named_parameters()))
    optimizer_step(toy_model, {name: torch.zeros_like(param)}, opt, lr=0.5)
    assert opt.param_groups[0]["lr"] == 0.5
    with pytest.raises(ValueError):
        optimizer_step(toy_model, {name: torch.zeros(1, dtype=D)}, opt)


# --- schedule and batching -------------------------------------------------

@pytest.mark.parametrize("epoch,expected", [(0, 0.01), (19, 0.01), (20, 0.001),
                                            (29, 0.001), (30, 1e-4), (39, 1e-4)])
def test_lr_schedule(epoch, expected):
    assert math.isclose(lr_schedule(epoch), expected, rel_tol=1e-12)


def test_lr_schedule_monotone():
    rates = [lr_schedule(e, 0.3, (2, 5, 5, 9)) for e in range(12)]
    assert all(b <= a for a, b in itertools.pairwise(rates))
    with pytest.raises(ValueError):
        lr_schedule(-1)


def test_make_batches_pairs_positives(tiny_index):
    pos, neg = tiny_index.masks()
    batches = make_batches(tiny_index, 4, np.random.default_rng(0))
    assert batches
    seen = [i for b in batches for i in b]
    assert len(seen) == len(set(seen))
    for b in batches:
        assert len(b) == 4
        sub_pos = pos[np.ix_(b, b)]
        assert sub_pos.any(1).all()
        assert neg[np.ix_(b, b)].any(1).all()


# --- loop ------------------------------------------------------------------

LOOP = TrainConfig(epochs=4, batch_size=4, points=48, milestones=(3,))


def test_train_loop_smoke_and_log(tiny_index, tmp_path):
    log_path, ckpt = tmp_path / "train.log", tmp_path / "m.vnip"
    result = train_loop(tiny_index, TOY, LOOP, seed=1, log_path=log_path, checkpoint_path=ckpt)
    assert [s.epoch for s in result.history] == [0, 1, 2, 3]
    assert [s.lr for s in result.history] == [0.01, 0.01, 0.01, 0.001]
    lines = log_path.read_text().splitlines()
    assert len(lines) == sum(s.steps for s in result.history)
    pattern = re.compile(r"^\d+, \d+, [0-9.e-]+, [0-9.e+-]+, [01]\.\d{4}$")
    assert all(pattern.match(line) for line in lines), lines[:3]
    assert ckpt.exists() and not result.model.training


def test_train_loop_is_deterministic(tiny_index):
    a = train_loop(tiny_index, TOY, dataclasses.replace(LOOP, epochs=2), seed=3)
    b = train_loop(tiny_index, TOY, dataclasses.replace(LOOP, epochs=2), seed=3)
    assert [s.mean_loss for s in a.history] == [s.mean_loss for s in b.history]
    for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values()):
        assert torch.equal(x, y)


def test_train_loop_reduces_loss(tiny_index):
    cfg = TrainConfig(epochs=12, batch_size=4, points=48, milestones=(100,))
    hist = train_loop(tiny_index, TOY, cfg, seed=0).history
    assert hist[-1].mean_loss < hist[0].mean_loss


def test_train_loop_rejects_empty_and_positive_free_data(tiny_index):
    with pytest.raises(ValueError, match="empty"):
        train_loop(DatasetIndex([]), TOY, LOOP)
    lonely = DatasetIndex([tiny_index.records[0], tiny_index.records[4]])
    with pytest.raises(ValueError, match="positive"):
        train_loop(lonely, TOY, LOOP)
