"""Descriptor extraction, recall metrics, rotation stress runs, layer
conformance checks and feature dumps."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .core_math import apply_rotation, knn, sample_rotation
from .data import DatasetIndex, DescriptorDB, EVAL_RADIUS, load_frame
from .model import ModelConfig, VNINet, init_params
from .ri_layers import cosine_distance, euclidean_distance, ri_neighborhood
from .vn_layers import (REAttention, REEdgeConv, REModule, rotate_features,
                        vn_batchnorm, vn_linear, vn_maxpool, vn_relu)

log = logging.getLogger(__name__)


def fixed_subset(n: int, m: int) -> np.ndarray | None:
    """The same sorted subset of ``m`` of ``n`` point slots for every frame."""
    if m <= 0 or m >= n:
        return None
    return np.sort(np.random.default_rng(0).choice(n, size=m, replace=False))


def describe(model: VNINet, cloud: np.ndarray) -> np.ndarray:
    """Inference-mode descriptor of one (N, 3) cloud."""
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(torch.as_tensor(cloud, dtype=dtype).unsqueeze(0))[0]
    return out.to(torch.float64).numpy()


@dataclass
class ExtractFailure:
    id: int
    path: str
    error: str


def describe_index(index: DatasetIndex, model: VNINet, points: int = 0,
                   transform: Callable[[int, np.ndarray], np.ndarray] | None = None):
    """Full-precision descriptors of every readable record.

    ``transform(record_id, cloud)`` may rewrite each cloud before the forward
    pass (the stress harness rotates through it). Returns (entries,
    failures) with entries as (id, northing, easting, float64 descriptor).
    """
    subset = None
    entries, failures = [], []
    for rec in index.records:
        try:
            cloud = load_frame(rec.path)
        except (OSError, ValueError) as exc:
            failures.append(ExtractFailure(rec.id, str(rec.path), str(exc)))
            log.error("skipping frame %d: %s", rec.id, exc)
            continue
        if points:
            subset = fixed_subset(len(cloud), points) if subset is None else subset
            cloud = cloud[subset]
        if transform is not None:
            cloud = transform(rec.id, cloud)
        entries.append((rec.id, rec.northing, rec.easting, describe(model, cloud)))
    return entries, failures


def extract_all(index: DatasetIndex, model: VNINet, points: int = 0,
                transform: Callable[[int, np.ndarray], np.ndarray] | None = None):
    """Descriptor database of ``index``; unreadable frames are reported.

    Returns (db, failures); the run continues past failures.
    """
    entries, failures = describe_index(index, model, points, transform)
    return DescriptorDB.from_entries(entries), failures


# ---------------------------------------------------------------------------
# recall
# ---------------------------------------------------------------------------

@dataclass
class RecallReport:
    ar_at_1: float
    ar_at_1pct: float
    nearest: list[int]
    hits_at_1: int
    hits_at_1pct: int
    n_queries: int
    n_refs: int
    n_excluded: int
    cutoff: int

    def to_dict(self) -> dict:
        return asdict(self)


def one_percent_cutoff(n_refs: int) -> int:
    return max(1, math.ceil(0.01 * n_refs))


def _planar(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def recall(queries: DescriptorDB, refs: DescriptorDB,
           eval_radius: float = EVAL_RADIUS) -> RecallReport:
    """AR@1 and AR@1% of ``queries`` retrieved against ``refs``.

    References are ranked by descriptor distance (ties to the lower
    position). A query with no reference within ``eval_radius`` metres is
    left out of both numerator and denominator; its nearest entry is -1.
    """
    if len(refs) == 0:
        raise ValueError("reference database is empty")
    if len(queries) and queries.dim != refs.dim:
        raise ValueError(f"descriptor widths differ: {queries.dim} vs {refs.dim}")
    cutoff = one_percent_cutoff(len(refs))
    q = queries.descriptors.astype(np.float64)
    r = refs.descriptors.astype(np.float64)
    d = ((q[:, None, :] - r[None, :, :]) ** 2).sum(-1) if len(q) else np.zeros((0, len(r)))
    true = _planar(queries.coords, refs.coords) <= eval_radius
    ranks = np.argsort(d, axis=1, kind="stable")
    nearest, hits1, hitsp, evaluated = [], 0, 0, 0
    for i in range(len(q)):
        if not true[i].any():
            nearest.append(-1)
            continue
        evaluated += 1
        nearest.append(int(refs.ids[ranks[i, 0]]))
        hits1 += bool(true[i, ranks[i, 0]])
        hitsp += bool(true[i, ranks[i, :cutoff]].any())
    denom = max(evaluated, 1)
    return RecallReport(hits1 / denom, hitsp / denom, nearest, hits1, hitsp, evaluated,
                        len(refs), len(q) - evaluated, cutoff)


def recall_bruteforce(queries: DescriptorDB, refs: DescriptorDB,
                      eval_radius: float = EVAL_RADIUS) -> tuple[int, int, int]:
    """Reference oracle: (hits@1, hits@1%, evaluated) by explicit loops."""
    if len(refs) == 0:
        raise ValueError("reference database is empty")
    cutoff = one_percent_cutoff(len(refs))
    hits1 = hitsp = evaluated = 0
    for qi in range(len(queries)):
        qn, qe = queries.coords[qi]
        true = [math.hypot(refs.coords[j, 0] - qn, refs.coords[j, 1] - qe) <= eval_radius
                for j in range(len(refs))]
        if not any(true):
            continue
        evaluated += 1
        scored = []
        for j in range(len(refs)):
            s = 0.0
            for a, b in zip(queries.descriptors[qi].tolist(), refs.descriptors[j].tolist()):
                s += (a - b) * (a - b)
            scored.append((s, j))
        scored.sort()
        hits1 += true[scored[0][1]]
        hitsp += any(true[j] for _, j in scored[:cutoff])
    return hits1, hitsp, evaluated


# ---------------------------------------------------------------------------
# rotation stress
# ---------------------------------------------------------------------------

@dataclass
class StressReport:
    mode: str
    trials: int
    max_relative_deviation: float
    deviations: list[float] = field(default_factory=list)
    ar_at_1_deltas: list[float] = field(default_factory=list)
    ar_at_1pct_deltas: list[float] = field(default_factory=list)
    rankings_changed: list[bool] = field(default_factory=list)


def trial_seed(seed: int, trial: int, frame_id: int) -> int:
    return int(np.random.SeedSequence([seed, trial, frame_id]).generate_state(1)[0])


def relative_deviation(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / (np.linalg.norm(b) + 1e-30))


def rotation_stress(index: DatasetIndex, model: VNINet, mode: str = "so3", trials: int = 10,
                    seed: int = 0, refs: DescriptorDB | None = None, points: int = 0,
                    eval_radius: float = EVAL_RADIUS, report_path=None) -> StressReport:
    """Re-extract ``index`` with every frame independently rotated, per trial.

    Deviation is the largest ||d_rot - d|| / ||d|| over frames. With
    ``refs`` the rotated queries are also scored and compared against the
    unrotated recall. ``report_path`` receives one JSON object per trial.
    """
    base, failures = describe_index(index, model, points)
    if failures:
        raise ValueError(f"{len(failures)} frames could not be read")
    base_recall = (recall(DescriptorDB.from_entries(base), refs, eval_radius)
                   if refs is not None else None)
    report = StressReport(mode, trials, 0.0)
    lines = []
    for t in range(trials):
        rot, _ = describe_index(index, model, points, lambda fid, c: apply_rotation(
            c, sample_rotation(trial_seed(seed, t, fid), mode)))
        dev = max((relative_deviation(r[3], b[3]) for r, b in zip(rot, base)), default=0.0)
        report.deviations.append(dev)
        row = {"trial": t, "seed": seed, "residual": dev}
        if base_recall is not None:
            rr = recall(DescriptorDB.from_entries(rot), refs, eval_radius)
            report.ar_at_1_deltas.append(rr.ar_at_1 - base_recall.ar_at_1)
            report.ar_at_1pct_deltas.append(rr.ar_at_1pct - base_recall.ar_at_1pct)
            changed = rr.nearest != base_recall.nearest
            report.rankings_changed.append(changed)
            row.update(ar_at_1_delta=report.ar_at_1_deltas[-1],
                       ar_at_1pct_delta=report.ar_at_1pct_deltas[-1], ranking_changed=changed)
        lines.append(json.dumps(row))
    report.max_relative_deviation = max(report.deviations, default=0.0)
    if report_path:
        Path(report_path).write_text("".join(line + "\n" for line in lines))
    return report


class FlatCoordinates(torch.nn.Module):
    """Deliberately non-invariant control: the descriptor is the raw cloud
    flattened in point order. Runs through the same extraction harness."""

    def __init__(self, dtype=torch.float64):
        super().__init__()
        # carries the dtype the harness reads off the parameters
        self.anchor = torch.nn.Parameter(torch.zeros((), dtype=dtype), requires_grad=False)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return points.flatten(-2)


def descriptor_deviation(model: VNINet, cloud, rotations) -> list[float]:
    """Relative descriptor change of one cloud under each rotation."""
    base = describe(model, cloud)
    return [relative_deviation(describe(model, apply_rotation(np.asarray(cloud), r)), base)
            for r in rotations]


# ---------------------------------------------------------------------------
# conformance
# ---------------------------------------------------------------------------

DTYPES = {"f64": torch.float64, "f32": torch.float32}


@dataclass
class Target:
    """A predicate runner: ``run(rng, dtype)`` returns one trial's residual."""

    run: Callable[[np.random.Generator, torch.dtype], float]
    kind: str  # equivariance or invariance
    tol_f64: float
    tol_f32: float


@dataclass
class ConformanceReport:
    target: str
    kind: str
    precision: str
    trials: int
    max_residual: float
    tolerance: float
    passed: bool
    residuals: list[float] = field(default_factory=list)


def _rel(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(torch.linalg.vector_norm(a - b) / (torch.linalg.vector_norm(b) + 1e-30))


def _t(rng, shape, dtype, scale=1.0):
    return torch.as_tensor(rng.standard_normal(shape) * scale, dtype=dtype)


def _rot(rng, dtype):
    return torch.as_tensor(sample_rotation(int(rng.integers(2**31)), "so3"), dtype=dtype)


def _equi(fn, v, r):
    return _rel(fn(rotate_features(v, r)), rotate_features(fn(v), r))


def _check_vn_linear(rng, dtype):
    n, ci, co = rng.integers(1, 129), rng.integers(1, 17), rng.integers(1, 17)
    w = _t(rng, (co, ci), dtype)
    return _equi(lambda x: vn_linear(x, w), _t(rng, (n, 3, ci), dtype), _rot(rng, dtype))


# With one channel q and k are parallel, so a rejected q collapses to
# rounding noise and a relative residual means nothing; ReLU-bearing
# targets therefore draw at least two channels.

def _check_vn_relu(rng, dtype):
    n, c = rng.integers(1, 129), rng.integers(2, 17)
    w, u = _t(rng, (c, c), dtype), _t(rng, (c, c), dtype)
    return _equi(lambda x: vn_relu(x, w, u), _t(rng, (n, 3, c), dtype), _rot(rng, dtype))


def _check_vn_batchnorm(rng, dtype):
    b, n, c = 2, rng.integers(2, 129), rng.integers(1, 17)
    gamma, beta = _t(rng, c, dtype), _t(rng, c, dtype)

    def fn(x):
        return vn_batchnorm(x, gamma, beta, None, None, training=True)
    return _equi(fn, _t(rng, (b, n, 3, c), dtype), _rot(rng, dtype))


def _check_vn_maxpool(rng, dtype):
    n, k, c = rng.integers(1, 129), rng.integers(1, 21), rng.integers(1, 17)
    w = _t(rng, (c, c), dtype)
    return _equi(lambda x: vn_maxpool(x, w, dim=-3), _t(rng, (n, k, 3, c), dtype),
                 _rot(rng, dtype))


def _fresh(module: torch.nn.Module, rng, dtype):
    with torch.no_grad():
        for p in module.parameters():
            if p.dim() == 2:
                p.copy_(torch.as_tensor(rng.uniform(-1, 1, p.shape) / math.sqrt(p.shape[1])))
    return module.to(dtype).train()


def _check_re_edgeconv(rng, dtype):
    n, c, k = rng.integers(24, 129), rng.integers(2, 17), rng.integers(2, 17)
    conv = _fresh(REEdgeConv(int(c)), rng, dtype)
    pts = _t(rng, (1, n, 3), dtype)
    r = _rot(rng, dtype)
    with torch.no_grad():
        out = conv(pts, knn(pts, int(k)))
        rp = pts @ r
        out_r = conv(rp, knn(rp, int(k)))
    return _rel(out_r, rotate_features(out, r))


def _check_re_attention(rng, dtype):
    n, c = rng.integers(1, 129), rng.integers(1, 17)
    att = _fresh(REAttention(int(c)), rng, dtype)
    with torch.no_grad():
        return _equi(att, _t(rng, (n, 3, c), dtype), _rot(rng, dtype))


def _check_re_module(rng, dtype):
    n, c = rng.integers(2, 129), rng.integers(2, 17)
    mod = _fresh(REModule(int(c), int(c)), rng, dtype)
    v, r = _t(rng, (1, n, 3, c), dtype), _rot(rng, dtype)
    with torch.no_grad():
        plain = mod(v)
        turned = mod(rotate_features(v, r))
    return max(_rel(a, rotate_features(b, r)) for a, b in zip(turned, plain))


def _check_euclidean(rng, dtype):
    n, c = rng.integers(1, 129), rng.integers(1, 17)
    f1, f2, r = _t(rng, (n, 3, c), dtype), _t(rng, (n, 3, c), dtype), _rot(rng, dtype)
    return _rel(euclidean_distance(rotate_features(f1, r), rotate_features(f2, r)),
                euclidean_distance(f1, f2))


def _check_cosine(rng, dtype):
    n, c = rng.integers(1, 129), rng.integers(1, 17)
    f3, fo, r = _t(rng, (n, 3, c), dtype), _t(rng, (n, 3, 1), dtype), _rot(rng, dtype)
    return _rel(cosine_distance(rotate_features(f3, r), rotate_features(fo, r)),
                cosine_distance(f3, fo))


def _check_ri_neighborhood(rng, dtype):
    n, c, k = rng.integers(8, 129), rng.integers(1, 17), rng.integers(1, 8)
    pts = _t(rng, (n, 3), dtype)
    graph = knn(pts, int(k))
    f1, f2, f3 = (_t(rng, (n, 3, c), dtype) for _ in range(3))
    fo, r = _t(rng, (n, 3, 1), dtype), _rot(rng, dtype)
    plain = ri_neighborhood(f1, f2, f3, fo, graph)
    turned = ri_neighborhood(*(rotate_features(f, r) for f in (f1, f2, f3, fo)), graph)
    return _rel(turned, plain)


TOY_MODEL = ModelConfig(c_equi=8, mlp_dims=(32, 64), desc_dim=32, k_edgeconv=8, k_ri=8)


def _check_model(rng, dtype):
    model = init_params(TOY_MODEL, int(rng.integers(2**31)), dtype)
    cloud = rng.uniform(-1, 1, (128, 3))
    r = sample_rotation(int(rng.integers(2**31)), "so3")
    return relative_deviation(describe(model, cloud @ r), describe(model, cloud))


TARGETS: dict[str, Target] = {
    "vn_linear": Target(_check_vn_linear, "equivariance", 1e-12, 1e-4),
    "vn_relu": Target(_check_vn_relu, "equivariance", 1e-10, 1e-4),
    "vn_batchnorm": Target(_check_vn_batchnorm, "equivariance", 1e-10, 1e-4),
    "vn_maxpool": Target(_check_vn_maxpool, "equivariance", 1e-10, 1e-4),
    "re_edgeconv": Target(_check_re_edgeconv, "equivariance", 1e-10, 1e-4),
    "re_attention": Target(_check_re_attention, "equivariance", 1e-10, 1e-4),
    "re_module": Target(_check_re_module, "equivariance", 1e-10, 1e-4),
    "euclidean_distance": Target(_check_euclidean, "invariance", 1e-10, 1e-4),
    "cosine_distance": Target(_check_cosine, "invariance", 1e-10, 1e-4),
    "ri_neighborhood": Target(_check_ri_neighborhood, "invariance", 1e-10, 1e-4),
    "model": Target(_check_model, "invariance", 1e-10, 1e-3),
}

LAYER_TARGETS = ("vn_linear", "vn_relu", "vn_batchnorm", "vn_maxpool",
                 "re_edgeconv", "re_attention", "re_module")


def register_target(name: str, target: Target) -> None:
    TARGETS[name] = target


def check_equivariance(target: str, trials: int = 100, precision: str = "f64",
                       seed: int = 0, report_path=None) -> ConformanceReport:
    if target not in TARGETS:
        raise KeyError(f"unknown target {target!r}; known: {', '.join(sorted(TARGETS))}")
    if precision not in DTYPES:
        raise ValueError(f"precision must be f32 or f64, got {precision!r}")
    spec = TARGETS[target]
    rng = np.random.default_rng(seed)
    residuals = [spec.run(rng, DTYPES[precision]) for _ in range(trials)]
    tol = spec.tol_f64 if precision == "f64" else spec.tol_f32
    worst = max(residuals, default=0.0)
    passed = bool(np.all(np.isfinite(residuals))) and worst < tol
    if report_path:
        Path(report_path).write_text("".join(
            json.dumps({"trial": i, "seed": seed, "residual": r}) + "\n"
            for i, r in enumerate(residuals)))
    return ConformanceReport(target, spec.kind, precision, trials, worst, tol, passed, residuals)


# ---------------------------------------------------------------------------
# feature dumps
# ---------------------------------------------------------------------------

STAGES = ("equi", "ri", "descriptor")


def stage_features(model: VNINet, cloud: np.ndarray, stage: str) -> np.ndarray:
    """Rows of the requested stage: equi (N, 3C, channel-major xyz), ri (N, D),
    descriptor (1, desc_dim)."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {', '.join(STAGES)}, got {stage!r}")
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        feats = model.features(torch.as_tensor(cloud, dtype=dtype).unsqueeze(0))
    if stage == "equi":
        v = feats["equi"][0]
        return v.transpose(-1, -2).reshape(v.shape[0], -1).to(torch.float64).numpy()
    if stage == "ri":
        return feats["ri"][0].to(torch.float64).numpy()
    return feats["descriptor"].to(torch.float64).numpy()


def dump_features(cloud: np.ndarray, model: VNINet, stage: str, path) -> np.ndarray:
    rows = stage_features(model, cloud, stage)
    np.savetxt(path, rows, delimiter=",", fmt="%.17g")
    return rows
