"""Triplet loss, batch-hard mining, Adam updates, step-decay schedule and the
training loop.

Gradients come from torch autograd over the model's forward pass; a
central-difference checker is provided as an independent oracle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core_math import DecisionTape, decide, use_tape
from .data import DatasetIndex, load_frame
from .model import ModelConfig, VNINet, init_params, save_checkpoint

log = logging.getLogger(__name__)

MARGIN = 0.5
MILESTONES = (20, 30)
DECAY = 0.1


def triplet_loss(d_ap, d_an, margin: float = MARGIN):
    """Hinge max(d_ap - d_an + margin, 0) on squared descriptor distances."""
    if isinstance(d_ap, torch.Tensor) or isinstance(d_an, torch.Tensor):
        return torch.clamp(d_ap - d_an + margin, min=0.0)
    return max(d_ap - d_an + margin, 0.0)


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


def sq_distances(desc: torch.Tensor) -> torch.Tensor:
    """All-pairs squared Euclidean distances of (B, D) descriptors."""
    diff = desc.unsqueeze(1) - desc.unsqueeze(0)
    return (diff * diff).sum(-1)


def batch_hard_mine(descriptors, positive_mask, negative_mask=None,
                    margin: float = MARGIN) -> list[Triplet]:
    """Farthest positive and nearest negative for every anchor in the batch.

    Without ``negative_mask`` every non-positive other than the anchor is a
    candidate negative. Anchors lacking a positive or a negative are skipped
    (counted in a warning) and triplets with zero loss are dropped. Ties
    resolve to the lowest batch index.
    """
    desc = torch.as_tensor(descriptors).detach()
    pos = torch.as_tensor(np.asarray(positive_mask, dtype=bool))
    b = desc.shape[0]
    if pos.shape != (b, b):
        raise ValueError(f"positive mask must be {b}x{b}, got {tuple(pos.shape)}")
    eye = torch.eye(b, dtype=torch.bool)
    pos = pos & ~eye
    if negative_mask is None:
        neg = ~pos & ~eye
    else:
        neg = torch.as_tensor(np.asarray(negative_mask, dtype=bool)) & ~pos & ~eye
    d = sq_distances(desc)
    out, skipped = [], 0
    for a in range(b):
        p_idx = torch.nonzero(pos[a]).flatten()
        n_idx = torch.nonzero(neg[a]).flatten()
        if len(p_idx) == 0 or len(n_idx) == 0:
            skipped += 1
            continue
        p = int(p_idx[int(torch.argmax(d[a, p_idx]))])
        n = int(n_idx[int(torch.argmin(d[a, n_idx]))])
        if triplet_loss(float(d[a, p]), float(d[a, n]), margin) > 0.0:
            out.append(Triplet(a, p, n))
    if skipped:
        log.warning("batch_hard_mine: %d of %d anchors lack an in-batch positive or negative",
                    skipped, b)
    return out


def mined_loss(descriptors: torch.Tensor, triplets: list[Triplet],
               margin: float = MARGIN) -> torch.Tensor:
    """Mean hinge over the mined triplets; exactly 0 when none are active."""
    if not triplets:
        return descriptors.sum() * 0.0
    a = torch.tensor([t.anchor for t in triplets])
    p = torch.tensor([t.positive for t in triplets])
    n = torch.tensor([t.negative for t in triplets])
    d_ap = ((descriptors[a] - descriptors[p]) ** 2).sum(-1)
    d_an = ((descriptors[a] - descriptors[n]) ** 2).sum(-1)
    hinge = d_ap - d_an + margin
    active = decide(lambda: hinge > 0)
    return torch.where(active, hinge, hinge.new_zeros(())).mean()


def batch_loss(model: VNINet, clouds: torch.Tensor, positive_mask, negative_mask=None,
               margin: float = MARGIN, triplets: list[Triplet] | None = None):
    """Training-mode forward, mining (unless ``triplets`` is given) and loss."""
    model.train()
    desc = model(clouds)
    if triplets is None:
        triplets = batch_hard_mine(desc, positive_mask, negative_mask, margin)
    return mined_loss(desc, triplets, margin), triplets


def backward(model: VNINet, clouds: torch.Tensor, positive_mask, negative_mask=None,
             margin: float = MARGIN):
    """Loss and its gradient for every named trainable parameter.

    Returns (loss, grads, triplets). Subgradients: 0 at the hinge kink, the
    identity branch at the VN-ReLU boundary and the selected index only for
    every max.
    """
    model.zero_grad(set_to_none=True)
    loss, triplets = batch_loss(model, clouds, positive_mask, negative_mask, margin)
    params = [p for p in model.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for (name, p), g in zip(((n, p) for n, p in model.named_parameters() if p.requires_grad),
                            grads):
        out[name] = torch.zeros_like(p) if g is None else g.detach()
    return float(loss.detach()), out, triplets


def finite_difference_grads(model: VNINet, clouds: torch.Tensor, triplets: list[Triplet],
                            h: float = 1e-5, margin: float = MARGIN,
                            frozen: bool = True) -> dict[str, torch.Tensor]:
    """Central differences of the mined loss for every trainable scalar.

    The triplets stay fixed. With ``frozen`` every branch and argmax choice
    is pinned to its value at the unperturbed parameters, so each difference
    is taken on the smooth piece the analytic gradient describes, even when
    a kink lies within ``h``.
    """
    tape = DecisionTape()
    if frozen:
        with torch.no_grad(), use_tape(tape, replay=False):
            batch_loss(model, clouds, None, triplets=triplets, margin=margin)

    def loss_at() -> float:
        if not frozen:
            return float(batch_loss(model, clouds, None, triplets=triplets, margin=margin)[0])
        with use_tape(tape, replay=True):
            out = float(batch_loss(model, clouds, None, triplets=triplets, margin=margin)[0])
        if tape.cursor != len(tape.items):
            raise RuntimeError("decision tape not fully consumed")
        return out

    out = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if not p.requires_grad:
                continue
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_at()
                flat[i] = orig - h
                down = loss_at()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            out[name] = g
    return out


def gradient_relative_errors(analytic: dict, numeric: dict, floor: float = 1e-8) -> dict:
    """|analytic - numeric| / (|analytic| + floor), elementwise per parameter."""
    return {k: (analytic[k] - numeric[k]).abs() / (analytic[k].abs() + floor) for k in analytic}


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def make_optimizer(model: VNINet, lr: float = 0.01, betas=(0.9, 0.999),
                   eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=betas, eps=eps)


def optimizer_step(model: VNINet, grads: dict[str, torch.Tensor],
                   optimizer: torch.optim.Adam, lr: float | None = None) -> None:
    """Install ``grads`` on the parameters and take one Adam step."""
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    for name, p in model.named_parameters():
        if name in grads:
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, "
                                 f"parameter is {tuple(p.shape)}")
            p.grad = g.to(p.dtype).clone()
    optimizer.step()


def step_count(optimizer: torch.optim.Adam) -> int:
    steps = [int(s["step"]) for s in optimizer.state.values() if "step" in s]
    return max(steps, default=0)


def lr_schedule(epoch: int, base_lr: float = 0.01, milestones=MILESTONES,
                gamma: float = DECAY) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * gamma ** sum(1 for m in milestones if m <= epoch)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 0.01
    margin: float = MARGIN
    milestones: tuple[int, ...] = MILESTONES
    points: int = 0  # 0 keeps every point; otherwise a random subset per frame and step


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float
    active_fraction: float
    steps: int


@dataclass
class TrainResult:
    model: VNINet
    history: list[EpochStats] = field(default_factory=list)


def make_batches(index: DatasetIndex, batch_size: int,
                 rng: np.random.Generator) -> list[list[int]]:
    """Group record positions into batches of positive pairs.

    Anchors are visited in random order and each is paired with an unused
    random positive, so every member has an in-batch positive. Pairs are
    then packed greedily so no two pairs in a batch share a place, which
    leaves every member with in-batch negatives.
    """
    pos, _ = index.masks()
    used = np.zeros(len(index), dtype=bool)
    pairs = []
    for a in rng.permutation(len(index)):
        if used[a]:
            continue
        cand = np.flatnonzero(pos[a] & ~used)
        if len(cand) == 0:
            continue
        p = int(rng.choice(cand))
        used[a] = used[p] = True
        pairs.append((int(a), p))
    per = max(1, batch_size // 2)
    batches = []
    while pairs:
        batch = list(pairs.pop(0))
        i = 0
        while len(batch) < 2 * per and i < len(pairs):
            if pos[np.ix_(pairs[i], batch)].any():
                i += 1
            else:
                batch.extend(pairs.pop(i))
        batches.append(batch)
    # a lone pair has no negatives
    return [b for b in batches if len(b) >= 4]


def _subsample(cloud: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    if m <= 0 or m >= len(cloud):
        return cloud
    return cloud[np.sort(rng.choice(len(cloud), size=m, replace=False))]


def train_loop(index: DatasetIndex, model_config: ModelConfig, train_config: TrainConfig,
               seed: int = 0, dtype=torch.float64, log_path=None,
               checkpoint_path=None) -> TrainResult:
    """Batch-hard triplet training without rotation augmentation."""
    if len(index) == 0:
        raise ValueError("cannot train on an empty dataset")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = init_params(model_config, seed, dtype)
    optimizer = make_optimizer(model, train_config.lr)
    frames = [load_frame(r.path) for r in index.records]
    pos, neg = index.masks()
    log_file = open(log_path, "a") if log_path else None
    result = TrainResult(model)
    try:
        for epoch in range(train_config.epochs):
            lr = lr_schedule(epoch, train_config.lr, train_config.milestones)
            losses, active, total = [], 0, 0
            batches = make_batches(index, train_config.batch_size, rng)
            if not batches:
                raise ValueError("no frame has a positive; cannot form training batches")
            for step, members in enumerate(batches):
                clouds = torch.as_tensor(np.stack(
                    [_subsample(frames[i], train_config.points, rng) for i in members]),
                    dtype=dtype)
                loss, grads, triplets = backward(model, clouds, pos[np.ix_(members, members)],
                                                 neg[np.ix_(members, members)],
                                                 train_config.margin)
                optimizer_step(model, grads, optimizer, lr)
                losses.append(loss)
                active += len(triplets)
                total += len(members)
                if log_file:
                    log_file.write(f"{epoch}, {step}, {lr:.6g}, {loss:.9g}, "
                                   f"{len(triplets) / len(members):.4f}\n")
            stats = EpochStats(epoch, lr, float(np.mean(losses)), active / total, len(batches))
            result.history.append(stats)
            log.info("epoch %d lr %.3g loss %.6f active %.3f", epoch, lr,
                     stats.mean_loss, stats.active_fraction)
            if not math.isfinite(stats.mean_loss):
                raise FloatingPointError(f"loss diverged at epoch {epoch}")
            if checkpoint_path:
                save_checkpoint(model, checkpoint_path)
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return result


def load_train_config(mapping: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for key, raw in mapping.items():
        if key == "milestones":
            kwargs[key] = tuple(int(x) for x in str(raw).split(",") if x.strip())
        elif key in ("epochs", "batch_size", "points"):
            kwargs[key] = int(raw)
        elif key in ("lr", "margin"):
            kwargs[key] = float(raw)
        else:
            raise ValueError(f"unknown training config key {key!r}")
    return TrainConfig(**kwargs)


def write_log_header(path) -> None:
    Path(path).write_text("epoch, step, lr, loss, active_triplets\n")
