"""Frames, UTM indexes, positive/negative sets, synthetic scenes and the
descriptor database file."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_math import normalize_cloud, sample_rotation
from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

FRAME_POINTS = 4096
FRAME_BYTES = FRAME_POINTS * 3 * 8
COORD_LIMIT = 1.001

POS_RADIUS = 10.0
NEG_RADIUS = 50.0
EVAL_RADIUS = 25.0

DB_MAGIC = b"VNDB"
DB_VERSION = 1
DB_HEADER = struct.Struct("<4sHIH")


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------

def load_frame(path) -> np.ndarray:
    """Read a 4096-point frame of little-endian float64 xyz triples."""
    raw = Path(path).read_bytes()
    if len(raw) != FRAME_BYTES:
        raise FormatError(
            f"{path}: expected {FRAME_BYTES} bytes ({FRAME_POINTS} points), got {len(raw)}")
    pts = np.frombuffer(raw, dtype="<f8").reshape(FRAME_POINTS, 3).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValidationError(f"{path}: non-finite coordinate")
    worst = np.abs(pts).max()
    if worst > COORD_LIMIT:
        raise ValidationError(
            f"{path}: coordinate magnitude {worst:.6g} outside [-{COORD_LIMIT}, {COORD_LIMIT}]")
    return pts


def save_frame(cloud: np.ndarray, path) -> None:
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.shape != (FRAME_POINTS, 3):
        raise ValueError(f"a frame must have shape ({FRAME_POINTS}, 3), got {cloud.shape}")
    Path(path).write_bytes(cloud.astype("<f8").tobytes())


# ---------------------------------------------------------------------------
# index
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameRecord:
    id: int
    path: Path
    northing: float
    easting: float


@dataclass
class DatasetIndex:
    records: list[FrameRecord]
    split: str = "train"
    pos_radius: float = POS_RADIUS
    neg_radius: float = NEG_RADIUS
    eval_radius: float = EVAL_RADIUS

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate frame ids in index")
        if not 0 < self.pos_radius < self.eval_radius < self.neg_radius:
            raise ValidationError("thresholds must satisfy 0 < pos < eval < neg")
        self._by_id = {r.id: i for i, r in enumerate(self.records)}

    def __len__(self):
        return len(self.records)

    def position(self, frame_id: int) -> int:
        return self._by_id[frame_id]

    def coords(self) -> np.ndarray:
        return np.array([[r.northing, r.easting] for r in self.records], dtype=np.float64)

    def planar_distances(self) -> np.ndarray:
        c = self.coords()
        if len(c) == 0:
            return np.zeros((0, 0))
        diff = c[:, None, :] - c[None, :, :]
        return np.sqrt((diff ** 2).sum(-1))

    def masks(self) -> tuple[np.ndarray, np.ndarray]:
        """(positive, negative) boolean matrices over record positions."""
        d = self.planar_distances()
        pos = d <= self.pos_radius
        np.fill_diagonal(pos, False)
        return pos, d > self.neg_radius


def load_index(path, split: str = "train") -> DatasetIndex:
    """Parse ``path,northing,easting`` lines; relative paths resolve against
    the index file's directory. An optional header line is skipped."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read index ({exc})") from exc
    base = path.parent
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields_ = [f.strip() for f in line.split(",")]
        if lineno == 1 and fields_[1:] == ["northing", "easting"]:
            continue
        if len(fields_) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 fields path,northing,easting, "
                              f"got {len(fields_)}")
        try:
            northing, easting = float(fields_[1]), float(fields_[2])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from None
        if not (np.isfinite(northing) and np.isfinite(easting)):
            raise FormatError(f"{path}:{lineno}: non-finite coordinate")
        frame = Path(fields_[0])
        if not frame.is_absolute():
            frame = base / frame
        records.append(FrameRecord(len(records), frame, northing, easting))
    if not records:
        log.warning("index %s is empty", path)
    return DatasetIndex(records, split)


def write_index(index: DatasetIndex, path) -> None:
    path = Path(path)
    lines = []
    for r in index.records:
        try:
            p = r.path.relative_to(path.parent)
        except ValueError:
            p = r.path
        lines.append(f"{p.as_posix()},{r.northing!r},{r.easting!r}")
    path.write_text("".join(line + "\n" for line in lines))


def positives_negatives(index: DatasetIndex, anchor_id: int) -> tuple[set[int], set[int]]:
    """Ids within the positive radius (self excluded) and beyond the negative one."""
    a = index.records[index.position(anchor_id)]
    pos, neg = set(), set()
    for r in index.records:
        if r.id == anchor_id:
            continue
        d = float(np.hypot(r.northing - a.northing, r.easting - a.easting))
        if d <= index.pos_radius:
            pos.add(r.id)
        elif d > index.neg_radius:
            neg.add(r.id)
    return pos, neg


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    scenes: int = 50
    frames_per_scene: int = 4
    test_scenes: int = 20
    clusters: int = 12
    jitter: float = 0.01
    resample_fraction: float = 0.1
    scene_spacing: float = 100.0
    frame_spread: float = 2.0
    rotate_train: bool = False
    rotate_test: bool = False
    seed: int = 0

    def to_text(self) -> str:
        out = []
        for k, v in self.__dict__.items():
            out.append(f"{k}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(out) + "\n"


class _Scene:
    """Gaussian blobs of varied size and shape standing in for scene structure."""

    def __init__(self, rng: np.random.Generator, clusters: int):
        self.centres = rng.uniform(-1.0, 1.0, size=(clusters, 3)) * np.array([1.0, 1.0, 0.4])
        self.scales = rng.uniform(0.03, 0.25, size=(clusters, 3))
        weights = rng.uniform(0.5, 1.5, size=clusters)
        self.weights = weights / weights.sum()
        self.template = self.draw(rng, FRAME_POINTS)

    def draw(self, rng, n):
        which = rng.choice(len(self.centres), size=n, p=self.weights)
        return self.centres[which] + rng.standard_normal((n, 3)) * self.scales[which]

    def frame(self, rng, jitter, resample_fraction):
        pts = self.template.copy()
        n_new = int(round(resample_fraction * FRAME_POINTS))
        if n_new:
            slots = rng.choice(FRAME_POINTS, size=n_new, replace=False)
            pts[slots] = self.draw(rng, n_new)
        return pts + rng.standard_normal(pts.shape) * jitter


def gen_synthetic(out_dir, cfg: SyntheticConfig) -> dict[str, Path]:
    """Write frames and indexes under ``out_dir``; returns the index paths.

    Training scenes go to ``train.csv``. Each held-out scene contributes its
    first frame to ``database.csv`` and the rest to ``query.csv``. Scenes sit
    on a grid ``scene_spacing`` metres apart and frames of a scene within
    ``frame_spread`` metres of its centre, so same-scene frames are mutual
    positives and different scenes mutual negatives. Each frame keeps the
    point order of its scene template; jitter and a resampled fraction of
    points make frames differ. Fully determined by ``cfg.seed``.
    """
    if cfg.scene_spacing - 2 * cfg.frame_spread <= NEG_RADIUS or 2 * cfg.frame_spread > POS_RADIUS:
        raise ValueError("scene layout would break the positive/negative radii")
    if cfg.frames_per_scene < 1 or cfg.scenes < 0 or cfg.test_scenes < 0:
        raise ValueError("scene and frame counts must be non-negative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    side = max(1, int(np.ceil(np.sqrt(cfg.scenes + cfg.test_scenes))))
    records: dict[str, list[FrameRecord]] = {"train": [], "database": [], "query": []}
    for s in range(cfg.scenes + cfg.test_scenes):
        held_out = s >= cfg.scenes
        rotate = cfg.rotate_test if held_out else cfg.rotate_train
        frame_dir = out / ("test" if held_out else "train")
        frame_dir.mkdir(exist_ok=True)
        scene = _Scene(rng, cfg.clusters)
        cx, cy = (s // side) * cfg.scene_spacing, (s % side) * cfg.scene_spacing
        for f in range(cfg.frames_per_scene):
            pts = scene.frame(rng, cfg.jitter, cfg.resample_fraction)
            if rotate:
                pts = pts @ sample_rotation(int(rng.integers(2**31)), "so3")
            pts = normalize_cloud(pts)
            angle = rng.uniform(0, 2 * np.pi)
            radius = cfg.frame_spread * np.sqrt(rng.uniform())
            frame_path = frame_dir / f"scene{s:04d}_frame{f:02d}.bin"
            save_frame(pts, frame_path)
            split = "train" if not held_out else ("database" if f == 0 else "query")
            records[split].append(FrameRecord(len(records[split]), frame_path,
                                              float(cx + radius * np.cos(angle)),
                                              float(cy + radius * np.sin(angle))))
    paths = {}
    for split, recs in records.items():
        paths[split] = out / f"{split}.csv"
        write_index(DatasetIndex(recs, "train" if split == "train" else "test"), paths[split])
    (out / "gen.cfg").write_text(cfg.to_text())
    return paths


# ---------------------------------------------------------------------------
# descriptor database
# ---------------------------------------------------------------------------

@dataclass
class DescriptorDB:
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.float32))

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        if self.descriptors.ndim != 2:
            self.descriptors = self.descriptors.reshape(len(self.ids), -1)
        n = len(self.ids)
        if len(self.coords) != n or len(self.descriptors) != n:
            raise ValueError("ids, coords and descriptors must have equal length")
        if len(set(self.ids.tolist())) != n:
            raise ValueError("descriptor ids must be unique")

    @classmethod
    def from_entries(cls, entries) -> "DescriptorDB":
        entries = list(entries)
        if not entries:
            return cls()
        ids, north, east, desc = zip(*entries)
        return cls(np.array(ids), np.stack([north, east], axis=1),
                   np.stack([np.asarray(d, dtype=np.float32) for d in desc]))

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1] if self.descriptors.size else 0

    def entries(self):
        for i in range(len(self)):
            yield (int(self.ids[i]), float(self.coords[i, 0]), float(self.coords[i, 1]),
                   self.descriptors[i])


def _entry_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u4"), ("northing", "<f8"), ("easting", "<f8"),
                     ("desc", "<f4", (dim,))])


def save_db(db: DescriptorDB, path) -> None:
    dim = db.dim
    rec = np.zeros(len(db), dtype=_entry_dtype(dim))
    rec["id"] = db.ids
    rec["northing"] = db.coords[:, 0]
    rec["easting"] = db.coords[:, 1]
    if dim:
        rec["desc"] = db.descriptors
    Path(path).write_bytes(DB_HEADER.pack(DB_MAGIC, DB_VERSION, len(db), dim) + rec.tobytes())


def load_db(path) -> DescriptorDB:
    raw = Path(path).read_bytes()
    if len(raw) < DB_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, count, dim = DB_HEADER.unpack_from(raw)
    if magic != DB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {DB_MAGIC!r}")
    if version != DB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    dt = _entry_dtype(dim)
    expected = DB_HEADER.size + count * dt.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {count} entries, got {len(raw)}")
    rec = np.frombuffer(raw, dtype=dt, offset=DB_HEADER.size, count=count)
    return DescriptorDB(rec["id"].astype(np.int64),
                        np.stack([rec["northing"], rec["easting"]], axis=1),
                        rec["desc"].reshape(count, dim).copy())
