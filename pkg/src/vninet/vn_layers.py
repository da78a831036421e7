"""Rotation-equivariant vector-neuron layers.

Vector features are stored coordinate-major with shape (..., 3, C): any
number of leading point or neighbour axes, the 3 coordinates, then C
channels, so channel ``c`` of a point is the 3-vector ``v[..., :, c]``.
Rotating the underlying cloud by ``R`` (``x -> x @ R``) maps a feature
block ``V`` to ``R.T @ V``; every op here commutes with that action.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_math import KnnGraph, cross3, decide, gather_points

EPS_DIR = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def rotate_features(v: torch.Tensor, r) -> torch.Tensor:
    """Apply the rotation ``x -> x @ r`` to every vector channel of ``v``."""
    r = torch.as_tensor(r, dtype=v.dtype)
    return torch.matmul(r.t(), v)


def vec_norm(v: torch.Tensor) -> torch.Tensor:
    """Channel norms over the coordinate axis: (..., 3, C) -> (..., C).

    An exact zero vector has norm 0 and gradient 0 rather than NaN.
    """
    sq = (v * v).sum(-2)
    nonzero = sq > 0
    return torch.where(nonzero, torch.where(nonzero, sq, 1.0).sqrt(), 0.0)


def vec_dot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-2)


# ---------------------------------------------------------------------------
# functional forms
# ---------------------------------------------------------------------------

def vn_linear(v: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Bias-free channel mixing: out[..., :, c] = sum_j w[c, j] v[..., :, j]."""
    if w.dim() != 2 or w.shape[1] != v.shape[-1]:
        raise ValueError(
            f"weight of shape {tuple(w.shape)} cannot map {v.shape[-1]} channels")
    return F.linear(v, w)


def vn_relu(v: torch.Tensor, w: torch.Tensor, u: torch.Tensor,
            eps_dir: float = EPS_DIR) -> torch.Tensor:
    """Vector ReLU.

    q = Wv is kept when <q, k> >= 0 (k = Uv); otherwise its component along
    k is removed. ``u`` with a single row shares one direction across all
    output channels. A direction shorter than ``eps_dir`` passes q through.
    """
    q = vn_linear(v, w)
    k = vn_linear(v, u)
    dot = vec_dot(q, k)
    k_sq = vec_dot(k, k)
    keep = decide(lambda: (dot >= 0) | (k_sq < eps_dir * eps_dir))
    coef = (dot / k_sq.clamp_min(eps_dir * eps_dir)).masked_fill(keep, 0.0)
    return q - coef.unsqueeze(-2) * k


def vn_batchnorm(v: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
                 running_mean: torch.Tensor | None, running_var: torch.Tensor | None,
                 training: bool, momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS) -> torch.Tensor:
    """Batch-normalise channel norms and rescale each vector to its new norm.

    Statistics are per channel over all leading axes of ``v``. In training
    mode the running buffers are updated in place.
    """
    if v.numel() == 0:
        raise ValueError("vn_batchnorm needs a non-empty batch")
    c = v.shape[-1]
    n = vec_norm(v)
    flat = n.reshape(-1, c)
    bn = F.batch_norm(flat, running_mean, running_var, gamma, beta,
                      training=training, momentum=momentum, eps=eps)
    scale = (bn / (flat + eps)).reshape(n.shape)
    return v * scale.unsqueeze(-2)


def vn_batchnorm_list(batch: list[torch.Tensor], state: "VNBatchNorm",
                      training: bool) -> list[torch.Tensor]:
    """List form: statistics are pooled over every cloud in ``batch``."""
    if not batch:
        raise ValueError("vn_batchnorm needs a non-empty batch")
    sizes = [b.shape[0] for b in batch]
    out = vn_batchnorm(torch.cat(batch), state.gamma, state.beta,
                       state.running_mean, state.running_var, training,
                       state.momentum, state.eps)
    return list(out.split(sizes))


def vn_maxpool(v: torch.Tensor, w_dir: torch.Tensor | None, dim: int = -3) -> torch.Tensor:
    """Per channel, keep the element along ``dim`` with the largest score.

    The score is <v, d> with d = w_dir . mean(v), unchanged by rotation, so
    the selection is too. ``w_dir=None`` scores by norm instead. Ties go to
    the lowest index.
    """
    dim = dim % v.dim()
    if dim >= v.dim() - 2:
        raise ValueError("cannot pool over the coordinate or channel axis")
    if w_dir is None:
        score = vec_norm(v)
    else:
        d = vn_linear(v.mean(dim, keepdim=True), w_dir)
        score = vec_dot(v, d)
    idx = decide(lambda: score.max(dim, keepdim=True).indices).unsqueeze(-2)
    idx = idx.expand(*idx.shape[:-2], 3, idx.shape[-1])
    return v.gather(dim, idx).squeeze(dim)


def edge_features(points: torch.Tensor, graph: KnnGraph, mode: str = "dim5") -> torch.Tensor:
    """Equivariant local features per (point, neighbour): (..., N, k, 3, F).

    dim3: x_i, x_i - x_j, x_i x x_j. dim5 adds x_c - x_j and x_i - x_c with
    x_c the neighbourhood centroid.
    """
    xj = gather_points(points, graph.neighbors)
    xi = graph.centres(points, -2).unsqueeze(-2).expand_as(xj)
    feats = [xi, xi - xj, cross3(xi, xj)]
    if mode == "dim5":
        xc = graph.centroids.unsqueeze(-2).expand_as(xj)
        feats += [xc - xj, xi - xc]
    elif mode != "dim3":
        raise ValueError(f"unknown edge feature mode {mode!r}")
    return torch.stack(feats, dim=-1)


def attention_scores(f3: torch.Tensor, wq: torch.Tensor, wk: torch.Tensor) -> torch.Tensor:
    c = f3.shape[-1]
    q = vn_linear(f3, wq).flatten(-2)
    k = vn_linear(f3, wk).flatten(-2)
    return q @ k.transpose(-1, -2) / math.sqrt(3 * c)


def re_attention(f3: torch.Tensor, wq: torch.Tensor, wk: torch.Tensor,
                 wv: torch.Tensor, wo: torch.Tensor) -> torch.Tensor:
    """Single-head attention across points; returns one orientation per point.

    Scores flatten coordinates and channels into a single 3C-long inner
    product. f3 is (..., N, 3, C); the result is (..., N, 3, 1).
    """
    attn = torch.softmax(attention_scores(f3, wq, wk), dim=-1)
    val = vn_linear(f3, wv)
    attended = (attn @ val.flatten(-2)).unflatten(-1, val.shape[-2:])
    return vn_linear(attended, wo)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class VNLinear(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels))

    def forward(self, x):
        return vn_linear(x, self.weight)


class VNReLU(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, share_direction: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels))
        self.direction = nn.Parameter(
            torch.empty(1 if share_direction else out_channels, in_channels))

    def forward(self, x):
        return vn_relu(x, self.weight, self.direction)


class VNBatchNorm(nn.Module):
    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        return vn_batchnorm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, self.training, self.momentum, self.eps)


class VNBlock(nn.Module):
    """vn_linear -> vn_batchnorm -> vn_relu."""

    def __init__(self, in_channels: int, out_channels: int, share_direction: bool = False):
        super().__init__()
        self.linear = VNLinear(in_channels, out_channels)
        self.bn = VNBatchNorm(out_channels)
        self.relu = VNReLU(out_channels, out_channels, share_direction)

    def forward(self, x):
        return self.relu(self.bn(self.linear(x)))


class VNMaxPool(nn.Module):
    def __init__(self, channels: int, mode: str = "direction"):
        super().__init__()
        if mode not in ("direction", "norm"):
            raise ValueError(f"unknown maxpool mode {mode!r}")
        self.mode = mode
        if mode == "direction":
            self.direction = nn.Parameter(torch.empty(channels, channels))
        else:
            self.register_parameter("direction", None)

    def forward(self, x, dim: int = -3):
        return vn_maxpool(x, self.direction, dim)


class REEdgeConv(nn.Module):
    """Local equivariant edge features, a VN-Block, then max over neighbours."""

    def __init__(self, out_channels: int, mode: str = "dim5",
                 share_direction: bool = False, pool_mode: str = "direction"):
        super().__init__()
        if mode not in ("dim3", "dim5"):
            raise ValueError(f"unknown edge feature mode {mode!r}")
        self.mode = mode
        self.block = VNBlock(3 if mode == "dim3" else 5, out_channels, share_direction)
        self.pool = VNMaxPool(out_channels, pool_mode)

    def forward(self, points: torch.Tensor, graph: KnnGraph) -> torch.Tensor:
        return re_edgeconv(points, graph, self.block, self.pool, self.mode)


class REAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.wq = nn.Parameter(torch.empty(channels, channels))
        self.wk = nn.Parameter(torch.empty(channels, channels))
        self.wv = nn.Parameter(torch.empty(channels, channels))
        self.wo = nn.Parameter(torch.empty(1, channels))

    def forward(self, f3):
        return re_attention(f3, self.wq, self.wk, self.wv, self.wo)


class REModule(nn.Module):
    """Dense block: F1 and F2 from the input, F3 from F1 + F2, F_o from F3.

    Without attention F_o is the channel mean of F3, which stays equivariant.
    """

    def __init__(self, in_channels: int, channels: int, use_attention: bool = True,
                 share_direction: bool = False):
        super().__init__()
        self.block_a = VNBlock(in_channels, channels, share_direction)
        self.block_b = VNBlock(in_channels, channels, share_direction)
        self.block_c = VNBlock(channels, channels, share_direction)
        self.attention = REAttention(channels) if use_attention else None

    def forward(self, x):
        return re_module(x, self)


def re_edgeconv(points: torch.Tensor, graph: KnnGraph, block: VNBlock,
                pool: VNMaxPool, mode: str = "dim5") -> torch.Tensor:
    """(..., N, 3) cloud -> (..., N, 3, C) per-point equivariant features."""
    return pool(block(edge_features(points, graph, mode)), dim=-3)


def re_module(x: torch.Tensor, module: REModule):
    f1 = module.block_a(x)
    f2 = module.block_b(x)
    f3 = module.block_c(f1 + f2)
    if module.attention is None:
        f_o = f3.mean(-1, keepdim=True)
    else:
        f_o = module.attention(f3)
    return f1, f2, f3, f_o
