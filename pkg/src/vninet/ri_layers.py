"""Rotation-invariant features read off equivariant ones.

Euclidean distances between matching channels of two feature spaces and
cosine distances of a feature space to a learned per-point orientation,
optionally max-aggregated over a spatial neighbourhood. Inputs use the
(..., 3, C) vector layout of :mod:`vninet.vn_layers`.
"""

from __future__ import annotations

import torch

from .core_math import KnnGraph, decide, gather_points
from .vn_layers import vec_dot, vec_norm

ZERO_NORM = 1e-12


def euclidean_distance(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    """Per-channel distance ||f1_c - f2_c||: (..., 3, C) -> (..., C)."""
    if f1.shape != f2.shape:
        raise ValueError(f"feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    return vec_norm(f1 - f2)


def _cosine(dot, n3, no):
    degenerate = (n3 < ZERO_NORM) | (no < ZERO_NORM)
    cos = dot / (n3 * no).clamp_min(ZERO_NORM * ZERO_NORM)
    return 1.0 - cos.masked_fill(degenerate, 0.0)


def cosine_distance(f3: torch.Tensor, f_o: torch.Tensor) -> torch.Tensor:
    """1 - cos(f3_c, f_o) per channel; a zero-norm operand gives exactly 1.

    f3 is (..., 3, C) and f_o (..., 3, 1); returns (..., C).
    """
    return _cosine(vec_dot(f3, f_o), vec_norm(f3), vec_norm(f_o))


def ri_pairs(f1, f2, f3, f_o, graph: KnnGraph, use_d_euc: bool = True,
             use_d_cos: bool = True, swap_roles: bool = False) -> torch.Tensor:
    """Invariant features of every (point i, neighbour j) pair: (..., N, k, D).

    By default F1 and F_o come from the centre i, F2 and F3 from the
    neighbour j; ``swap_roles`` exchanges the two sides.
    """
    idx = graph.neighbors
    parts = []
    def centre(x):
        return graph.centres(x, -3)

    if use_d_euc:
        here, there = (f2, f1) if swap_roles else (f1, f2)
        parts.append(vec_norm(centre(here).unsqueeze(-3) - gather_points(there, idx)))
    if use_d_cos:
        if swap_roles:
            f3_i = centre(f3)
            dot = vec_dot(f3_i.unsqueeze(-3), gather_points(f_o, idx))
            parts.append(_cosine(dot, vec_norm(f3_i).unsqueeze(-2),
                                 gather_points(vec_norm(f_o), idx)))
        else:
            o_i = centre(f_o)
            dot = vec_dot(gather_points(f3, idx), o_i.unsqueeze(-3))
            parts.append(_cosine(dot, gather_points(vec_norm(f3), idx),
                                 vec_norm(o_i).unsqueeze(-2)))
    if not parts:
        raise ValueError("at least one distance feature must be enabled")
    return torch.cat(parts, dim=-1)


def ri_neighborhood(f1, f2, f3, f_o, graph: KnnGraph, use_d_euc: bool = True,
                    use_d_cos: bool = True, swap_roles: bool = False) -> torch.Tensor:
    """Column-wise max of the pair features over each neighbourhood: (..., N, D).

    D is C per enabled distance, d_euc columns first.
    """
    pairs = ri_pairs(f1, f2, f3, f_o, graph, use_d_euc, use_d_cos, swap_roles)
    # the gradient goes to the first maximal neighbour only
    idx = decide(lambda: pairs.max(dim=-2, keepdim=True).indices)
    return pairs.gather(-2, idx).squeeze(-2)
