"""Geometric primitives shared by the equivariant and invariant layers.

Points are row vectors, so a rotation acts on a cloud as ``cloud @ R``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field

import numpy as np
import torch


def cross3(a, b):
    """Right-handed cross product over the last axis (numpy or torch)."""
    if isinstance(a, torch.Tensor):
        return torch.linalg.cross(a, b, dim=-1)
    return np.cross(a, b)


@dataclass(frozen=True)
class KnnGraph:
    """k nearest neighbours of every point, excluding the point itself.

    ``neighbors`` has shape (..., N, k), sorted by ascending distance with
    ties broken by ascending index. ``centroids`` has shape (..., N, 3).
    A restricted graph covers only the centre points in ``rows``; its
    neighbour indices still refer to the full cloud.
    """

    k: int
    neighbors: torch.Tensor
    centroids: torch.Tensor
    rows: slice = slice(None)

    def restrict(self, rows: slice) -> "KnnGraph":
        """Sub-graph for a contiguous slice of centre points."""
        return KnnGraph(self.k, self.neighbors[..., rows, :],
                        self.centroids[..., rows, :], rows)

    def centres(self, x: torch.Tensor, point_axis: int) -> torch.Tensor:
        """Rows of per-point tensor ``x`` that this graph's centres refer to."""
        index = [slice(None)] * x.dim()
        index[point_axis] = self.rows
        return x[tuple(index)]


def pairwise_sq_dists(points: torch.Tensor) -> torch.Tensor:
    sq = (points * points).sum(-1)
    d = sq.unsqueeze(-1) + sq.unsqueeze(-2) - 2.0 * points @ points.transpose(-1, -2)
    return d.clamp_min_(0.0)


def _knn_single(points: torch.Tensor, k: int) -> torch.Tensor:
    n = points.shape[0]
    d = pairwise_sq_dists(points)
    d.fill_diagonal_(math.inf)
    # k+1 candidates so a tie at the cut-off can be detected
    m = min(k + 1, n - 1)
    vals, idx = torch.topk(d, m, dim=-1, largest=False, sorted=True)
    if m > k:
        tied = vals[:, k - 1] == vals[:, k]
    else:
        tied = torch.zeros(n, dtype=torch.bool)
    idx = idx[:, :k]
    # lexicographic (distance, index) order: stable sort by index then by distance
    idx, _ = idx.sort(dim=-1)
    order = torch.sort(d.gather(1, idx), dim=-1, stable=True).indices
    idx = idx.gather(1, order)
    rows = torch.nonzero(tied).flatten()
    if len(rows):
        full = torch.sort(d[rows], dim=-1, stable=True).indices[:, :k]
        idx[rows] = full
    return idx


def knn(points: torch.Tensor, k: int) -> KnnGraph:
    """Exact brute-force kNN graph of a cloud of shape (..., N, 3)."""
    n = points.shape[-2]
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < N (got k={k}, N={n})")
    flat = points.reshape(-1, n, 3)
    with torch.no_grad():
        idx = torch.stack([_knn_single(p, k) for p in flat])
    idx = idx.reshape(*points.shape[:-2], n, k)
    centroids = gather_points(points, idx).mean(-2)
    return KnnGraph(k=k, neighbors=idx, centroids=centroids)


def self_graph(points: torch.Tensor) -> KnnGraph:
    """Degenerate graph where every point's only neighbour is itself."""
    n = points.shape[-2]
    idx = torch.arange(n).expand(*points.shape[:-2], n).unsqueeze(-1).contiguous()
    return KnnGraph(k=1, neighbors=idx, centroids=points.clone())


def gather_points(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Gather per-point rows of ``x`` (..., N, *F) at ``idx`` (..., N, k).

    Returns (..., N, k, *F).
    """
    lead = idx.shape[:-2]
    n, k = idx.shape[-2:]
    feat = x.shape[len(lead) + 1:]
    xf = x.reshape(-1, x.shape[len(lead)], *feat)
    flat_idx = idx.reshape(-1, n * k)
    batch = torch.arange(xf.shape[0]).unsqueeze(-1)
    return xf[batch, flat_idx].reshape(*lead, n, k, *feat)


def sample_rotation(seed: int, mode: str = "so3") -> np.ndarray:
    """Deterministic random rotation matrix (float64, acts on row vectors).

    ``z_axis`` draws a yaw angle uniformly in [0, 2*pi); ``so3`` draws a
    Haar-uniform rotation from a uniformly sampled unit quaternion.
    """
    rng = np.random.default_rng(seed)
    if mode == "z_axis":
        theta = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(theta), np.sin(theta)
        return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    if mode != "so3":
        raise ValueError(f"unknown rotation mode {mode!r}")
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    m = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return m


def apply_rotation(cloud, r):
    """Rotate every point (row) of ``cloud`` by ``r``; order preserved."""
    if isinstance(cloud, torch.Tensor):
        return cloud @ torch.as_tensor(r, dtype=cloud.dtype, device=cloud.device)
    return np.asarray(cloud) @ np.asarray(r, dtype=np.float64)


def normalize_cloud(cloud: np.ndarray) -> np.ndarray:
    """Centre on the centroid and scale uniformly into [-1, 1]."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or len(cloud) == 0:
        raise ValueError(f"expected a non-empty (N, 3) cloud, got shape {cloud.shape}")
    centred = cloud - cloud.mean(axis=0)
    scale = np.abs(centred).max()
    if scale == 0.0:
        return np.zeros_like(centred)
    out = centred / scale
    # rounding can leave the extreme coordinate a hair outside the box
    return np.clip(out, -1.0, 1.0)


# ---------------------------------------------------------------------------
# discrete choices
# ---------------------------------------------------------------------------

@dataclass
class DecisionTape:
    """Discrete choices (branch masks, argmax indices) of one forward pass.

    Replaying a tape pins every choice, so the network becomes a smooth
    function of its parameters near the recorded point. Finite-difference
    checks use this to stay on one piece of a piecewise-smooth loss.
    """

    items: list = field(default_factory=list)
    replay: bool = False
    cursor: int = 0


_TAPE: ContextVar[DecisionTape | None] = ContextVar("vninet_decision_tape", default=None)


def decide(compute):
    """Return ``compute()``, or the recorded choice when a tape is replaying."""
    tape = _TAPE.get()
    if tape is None:
        return compute()
    if tape.replay:
        if tape.cursor >= len(tape.items):
            raise RuntimeError("decision tape exhausted; the forward pass changed shape")
        out = tape.items[tape.cursor]
        tape.cursor += 1
        return out
    out = compute()
    tape.items.append(out)
    return out


@contextmanager
def use_tape(tape: DecisionTape, replay: bool):
    tape.replay, tape.cursor = replay, 0
    token = _TAPE.set(tape)
    try:
        yield tape
    finally:
        _TAPE.reset(token)
