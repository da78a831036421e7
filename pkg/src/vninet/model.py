"""Full descriptor network: RE-EdgeConv, two dense RE-Modules, the invariant
layer, a shared MLP, GeM pooling and a final projection."""

from __future__ import annotations

import logging
import math
import struct
from collections import OrderedDict
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_math import KnnGraph, decide, knn, self_graph
from .errors import FormatError
from .ri_layers import ri_neighborhood
from .vn_layers import REEdgeConv, REModule

log = logging.getLogger(__name__)

GEM_FLOOR = 1e-6
CHECKPOINT_MAGIC = b"VNIP"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    c_equi: int = 64
    mlp_dims: tuple[int, ...] = (512, 1024, 1024)
    desc_dim: int = 256
    k_edgeconv: int = 20
    k_ri: int = 20
    edgeconv_mode: str = "dim5"
    use_d_euc: bool = True
    use_d_cos: bool = True
    use_attention: bool = True
    use_neighborhood: bool = True
    use_vnn_inv_stub: bool = False
    gem_p_init: float = 3.0
    l2_normalize_descriptor: bool = False
    share_relu_direction: bool = False
    maxpool_mode: str = "direction"
    ri_swap_roles: bool = False

    @property
    def ri_dim(self) -> int:
        return self.c_equi * (int(self.use_d_euc) + int(self.use_d_cos))

    def validate(self) -> None:
        if self.c_equi < 1 or self.desc_dim < 1 or not self.mlp_dims:
            raise ValueError("c_equi, desc_dim and mlp_dims must be positive/non-empty")
        if any(d < 1 for d in self.mlp_dims):
            raise ValueError(f"bad mlp_dims {self.mlp_dims}")
        if self.k_edgeconv < 1 or self.k_ri < 1:
            raise ValueError("neighbourhood sizes must be positive")
        if self.edgeconv_mode not in ("dim3", "dim5"):
            raise ValueError(f"edgeconv_mode must be dim3 or dim5, got {self.edgeconv_mode!r}")
        if self.maxpool_mode not in ("direction", "norm"):
            raise ValueError(f"maxpool_mode must be direction or norm, got {self.maxpool_mode!r}")
        if self.ri_dim == 0:
            raise ValueError("at least one of use_d_euc / use_d_cos must be set")
        if self.gem_p_init < 1:
            raise ValueError("gem_p_init must be >= 1")
        if self.use_vnn_inv_stub:
            raise NotImplementedError(
                "the frame-alignment invariant layer is only an ablation placeholder")

    @property
    def min_points(self) -> int:
        return max(self.k_edgeconv, self.k_ri if self.use_neighborhood else 0) + 1

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{f.name}={val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict[str, str], strict: bool = True) -> "ModelConfig":
        kwargs = {}
        names = {f.name: f for f in fields(cls)}
        for key, raw in mapping.items():
            if key not in names:
                if strict:
                    raise ValueError(f"unknown model config key {key!r}")
                continue
            kwargs[key] = _coerce(names[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_key_values(text))


def _coerce(f: dataclasses.Field, raw):
    if not isinstance(raw, str):
        return tuple(raw) if f.name == "mlp_dims" else raw
    default = f.default
    if f.name == "mlp_dims":
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{f.name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def parse_key_values(text: str) -> dict[str, str]:
    """Parse flat ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def gem_pool(features: torch.Tensor, p) -> torch.Tensor:
    """Generalised mean over the point axis (-2) of (..., N, D) features."""
    if not isinstance(p, torch.Tensor):
        p = torch.tensor(float(p), dtype=features.dtype)
    keep = decide(lambda: features > GEM_FLOOR)
    floored = torch.where(keep, features, features.new_tensor(GEM_FLOOR))
    return floored.pow(p).mean(-2).pow(1.0 / p)


class GeM(nn.Module):
    def __init__(self, p: float = 3.0):
        super().__init__()
        self.p = nn.Parameter(torch.tensor(float(p)))

    def forward(self, x):
        return gem_pool(x, self.p)


class ReLU(nn.Module):
    """Rectifier whose active mask goes through :func:`decide`."""

    def forward(self, x):
        return torch.where(decide(lambda: x > 0), x, x.new_zeros(()))


class SharedMLP(nn.Module):
    """Per-point Linear -> BatchNorm -> ReLU stack."""

    def __init__(self, in_dim: int, dims):
        super().__init__()
        layers = []
        for d in dims:
            # a bias before BatchNorm is cancelled by the mean subtraction
            layers += [nn.Linear(in_dim, d, bias=False), nn.BatchNorm1d(d), ReLU()]
            in_dim = d
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        shape = x.shape
        y = self.layers(x.reshape(-1, shape[-1]))
        return y.reshape(*shape[:-1], y.shape[-1])


class VNINet(nn.Module):
    chunk_points = 256

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.c_equi
        share = config.share_relu_direction
        self.edgeconv = REEdgeConv(c, config.edgeconv_mode, share, config.maxpool_mode)
        # module1 orientation is never consumed, so it carries no attention weights
        self.module1 = REModule(c, c, False, share)
        self.module2 = REModule(c, c, config.use_attention, share)
        self.mlp = SharedMLP(config.ri_dim, config.mlp_dims)
        self.gem = GeM(config.gem_p_init)
        # the loss only sees descriptor differences, so a head bias is unidentifiable
        self.head = nn.Linear(config.mlp_dims[-1], config.desc_dim, bias=False)

    def features(self, points: torch.Tensor) -> dict[str, torch.Tensor]:
        """Run the network on (B, N, 3) clouds and keep every stage's output."""
        cfg = self.config
        n = points.shape[-2]
        if n < cfg.min_points:
            raise ValueError(f"cloud has {n} points, need at least {cfg.min_points}")
        points = points.to(self.head.weight.dtype)
        graph_e = knn(points, cfg.k_edgeconv)
        if not cfg.use_neighborhood:
            graph_ri = self_graph(points)
        elif cfg.k_ri == cfg.k_edgeconv:
            graph_ri = graph_e
        else:
            graph_ri = knn(points, cfg.k_ri)
        x0 = self._pointwise(lambda g: self.edgeconv(points, g), graph_e)
        _, _, f3_1, _ = self.module1(x0)
        f1, f2, f3, f_o = self.module2(f3_1 + x0)
        ri = self._pointwise(
            lambda g: ri_neighborhood(f1, f2, f3, f_o, g, cfg.use_d_euc,
                                      cfg.use_d_cos, cfg.ri_swap_roles), graph_ri)
        local = self.mlp(ri)
        desc = self.head(self.gem(local))
        if cfg.l2_normalize_descriptor:
            desc = F.normalize(desc, dim=-1)
        return {"equi": f3, "orientation": f_o, "ri": ri, "local": local, "descriptor": desc}

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return self.features(points)["descriptor"]

    def _pointwise(self, fn, graph: KnnGraph) -> torch.Tensor:
        # With frozen statistics the neighbourhood stages are independent per
        # point; evaluating them in slices keeps temporaries small.
        n = graph.neighbors.shape[-2]
        if self.training or n <= self.chunk_points:
            return fn(graph)
        outs = []
        for start in range(0, n, self.chunk_points):
            outs.append(fn(graph.restrict(slice(start, start + self.chunk_points))))
        return torch.cat(outs, dim=graph.neighbors.dim() - 2)


def init_params(config: ModelConfig, seed: int = 0, dtype=torch.float64) -> VNINet:
    """Deterministic initialisation: fan-in uniform for maps, identity for norms."""
    model = VNINet(config).to(torch.float64)
    gen = torch.Generator().manual_seed(int(seed))

    def uniform_(t, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        t.copy_(torch.rand(t.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)

    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, nn.BatchNorm1d):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
            elif isinstance(mod, nn.Linear):
                uniform_(mod.weight, mod.in_features)
                if mod.bias is not None:
                    uniform_(mod.bias, mod.in_features)
            elif isinstance(mod, GeM):
                mod.p.fill_(config.gem_p_init)
            else:
                for p in mod.parameters(recurse=False):
                    if p.dim() == 2:
                        uniform_(p, p.shape[1])
    return model.to(dtype)


def forward(cloud, model: VNINet, mode: str = "infer") -> torch.Tensor:
    """Descriptor of one (N, 3) cloud or a (B, N, 3) batch."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be train or infer, got {mode!r}")
    model.train(mode == "train")
    pts = torch.as_tensor(np.asarray(cloud) if not isinstance(cloud, torch.Tensor) else cloud)
    single = pts.dim() == 2
    if single:
        pts = pts.unsqueeze(0)
    with torch.set_grad_enabled(mode == "train"):
        out = model(pts)
    return out[0] if single else out


def param_breakdown(model: nn.Module) -> "OrderedDict[str, int]":
    """Trainable scalar count per layer (module path of each parameter)."""
    out: OrderedDict[str, int] = OrderedDict()
    for name, p in model.named_parameters():
        if p.requires_grad:
            layer = name.rsplit(".", 1)[0]
            out[layer] = out.get(layer, 0) + p.numel()
    return out


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def param_report(model: nn.Module) -> str:
    rows = [f"{name:40s} {n:>10d}" for name, n in param_breakdown(model).items()]
    rows.append(f"{'total':40s} {param_count(model):>10d}")
    return "\n".join(rows)


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

def save_checkpoint(model: VNINet, path) -> None:
    cfg = model.config.to_text().encode("utf-8")
    state = model.state_dict()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
              struct.pack("<I", len(state))]
    for name, t in state.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float64).numpy()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, dtype=torch.float64) -> VNINet:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig.from_text(r.take(r.u32()).decode("utf-8"))
    model = VNINet(config).to(torch.float64)
    state = model.state_dict()
    loaded = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        if name not in state:
            raise FormatError(f"{path}: unknown tensor {name!r}")
        if tuple(state[name].shape) != tuple(shape):
            raise FormatError(f"{path}: tensor {name!r} has shape {shape}, "
                              f"model expects {tuple(state[name].shape)}")
        loaded[name] = torch.from_numpy(values.copy()).to(state[name].dtype)
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    missing = set(state) - set(loaded)
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(loaded)
    return model.to(dtype)
