"""
Artifact files.

- checkpoint: ``MANTRA1`` magic, u32 metadata length + metadata text, u32
  tensor count, then per tensor u32 name length, name, u32 rank, u32 dims
  and little-endian float64 data.
- memory snapshot: ``MEM n width`` text line, metadata comment line, then per
  entry u32 id length, id, key and value float64s, i64 write epoch, u32
  future length and the future's float64 coordinates.
- datasets: ``train.csv`` / ``test.csv`` (``track_id,t,x,y``) and
  ``maps/<scenario>.map`` text grids.
- reports: CSV with a leading metadata comment.

Every file carries the config hash; loaders refuse a mismatching one when
``expected_hash`` is given.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from data_models import TrajectoryRecord, validate_rows
from layers import Module
from memory import MemoryEntry, MemoryStore
from trajectories import SemanticMap, Trajectory
from utils import logger, metadata_line, parse_metadata_line
from validation import validate_dataset_frame

CHECKPOINT_MAGIC = b"MANTRA1"
MEMORY_MAGIC = "MEM"
MAP_MAGIC = "MAP"


class ArtifactError(ValueError):
    """Raised for unreadable, truncated or mismatched artifact files."""
    pass


def check_config_hash(metadata: Dict[str, str], expected_hash: str | None, path: Path | str) -> None:
    if expected_hash is None:
        return
    found = metadata.get("config")
    if found != expected_hash:
        raise ArtifactError(f"{path}: config hash mismatch (expected {expected_hash}, found {found})")


def _metadata_text(metadata: Dict[str, object]) -> str:
    return "\n".join(f"{k}={v}" for k, v in sorted(metadata.items()))


def _parse_metadata_text(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


class _Cursor:
    """Bounds-checked reader over a byte buffer."""

    def __init__(self, buf: bytes, path: Path | str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArtifactError(
                f"{self.path}: truncated while reading {what} at byte offset {self.pos} "
                f"(need {n} bytes, {len(self.buf) - self.pos} available)"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def i64(self, what: str) -> int:
        return struct.unpack("<q", self.take(8, what))[0]

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)

    def text(self, what: str) -> str:
        n = self.u32(f"{what} length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ArtifactError(f"{self.path}: {what} at byte offset {self.pos - n} is not valid UTF-8") from e

    def line(self, what: str) -> str:
        end = self.buf.find(b"\n", self.pos)
        if end < 0:
            raise ArtifactError(f"{self.path}: truncated while reading {what} at byte offset {self.pos}")
        out = self.buf[self.pos:end].decode("utf-8", errors="replace")
        self.pos = end + 1
        return out

    @property
    def at_end(self) -> bool:
        return self.pos == len(self.buf)


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw

# -----------------
# Checkpoints
# -----------------

@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, str] = field(default_factory=dict)

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def has_prefix(self, prefix: str) -> bool:
        return any(k.startswith(prefix) for k in self.tensors)


def save_checkpoint(path: Path | str, tensors: Dict[str, np.ndarray], metadata: Dict[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [CHECKPOINT_MAGIC, _pack_text(_metadata_text(metadata)), struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        parts.append(_pack_text(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path.write_bytes(b"".join(parts))
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")
    return path


def load_checkpoint(path: Path | str, expected_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    cur = _Cursor(path.read_bytes(), path)
    magic = cur.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise ArtifactError(f"{path}: not a checkpoint (expected {CHECKPOINT_MAGIC.decode()}, found {magic!r})")
    metadata = _parse_metadata_text(cur.text("metadata"))
    check_config_hash(metadata, expected_hash, path)
    tensors: Dict[str, np.ndarray] = {}
    for i in range(cur.u32("tensor count")):
        name = cur.text(f"tensor {i} name")
        rank = cur.u32(f"rank of {name}")
        shape = struct.unpack(f"<{rank}I", cur.take(4 * rank, f"shape of {name}")) if rank else ()
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = cur.floats(count, f"data of {name}").reshape(shape)
    if not cur.at_end:
        raise ArtifactError(f"{path}: {len(cur.buf) - cur.pos} trailing bytes after offset {cur.pos}")
    return Checkpoint(tensors=tensors, metadata=metadata)


def save_modules(path: Path | str, modules: Dict[str, Module], metadata: Dict[str, object]) -> Path:
    tensors: Dict[str, np.ndarray] = {}
    for prefix, module in modules.items():
        for name, value in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = value
    return save_checkpoint(path, tensors, metadata)


def load_module_state(checkpoint: Checkpoint, prefix: str, module: Module) -> Module:
    if not checkpoint.has_prefix(prefix + "."):
        raise ArtifactError(f"checkpoint holds no '{prefix}' tensors")
    module.load_state_dict(checkpoint.subset(prefix + "."))
    return module

# -----------------
# Memory snapshots
# -----------------

def save_memory(path: Path | str, memory: MemoryStore, metadata: Dict[str, object]) -> Path:
    if memory.key_width != memory.value_width:
        raise ValueError("memory snapshots need equal key and value widths")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"{MEMORY_MAGIC} {len(memory)} {memory.key_width}\n"
    meta = metadata_line(metadata.get("seed", ""), metadata.get("config", ""), "memory") + "\n"
    parts = [header.encode("utf-8"), meta.encode("utf-8")]
    for entry in memory:
        parts.append(_pack_text(entry.source_id))
        parts.append(np.ascontiguousarray(entry.key, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(entry.value, dtype="<f8").tobytes())
        parts.append(struct.pack("<q", int(entry.write_epoch)))
        future = np.zeros((0, 2)) if entry.future is None else entry.future
        parts.append(struct.pack("<I", len(future)))
        parts.append(np.ascontiguousarray(future, dtype="<f8").tobytes())
    path.write_bytes(b"".join(parts))
    logger.info(f"Saved memory snapshot with {len(memory)} entries to {path}")
    return path


def load_memory(path: Path | str, expected_hash: str | None = None) -> Tuple[MemoryStore, Dict[str, str]]:
    path = Path(path)
    cur = _Cursor(path.read_bytes(), path)
    header = cur.line("header").split()
    if len(header) != 3 or header[0] != MEMORY_MAGIC:
        raise ArtifactError(f"{path}: not a memory snapshot (expected '{MEMORY_MAGIC} n width', found {header})")
    try:
        count, width = int(header[1]), int(header[2])
    except ValueError as e:
        raise ArtifactError(f"{path}: malformed memory header {header}") from e
    metadata = parse_metadata_line(cur.line("metadata"))
    check_config_hash(metadata, expected_hash, path)
    memory = MemoryStore(width, width)
    for i in range(count):
        source_id = cur.text(f"entry {i} source id")
        key = cur.floats(width, f"entry {i} key")
        value = cur.floats(width, f"entry {i} value")
        epoch = cur.i64(f"entry {i} write epoch")
        n_future = cur.u32(f"entry {i} future length")
        future = cur.floats(2 * n_future, f"entry {i} future").reshape(n_future, 2) if n_future else None
        memory.append(MemoryEntry(key=key, value=value, source_id=source_id, write_epoch=epoch, future=future))
    if not cur.at_end:
        raise ArtifactError(f"{path}: {len(cur.buf) - cur.pos} trailing bytes after offset {cur.pos}")
    return memory, metadata

# -----------------
# Datasets and maps
# -----------------

@dataclass
class LoadedDataset:
    train: List[Trajectory]
    test: List[Trajectory]
    maps: Dict[str, SemanticMap]
    metadata: Dict[str, str] = field(default_factory=dict)


def _write_csv(path: Path, frame: pd.DataFrame, header_line: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(header_line + "\n")
        frame.to_csv(fh, index=False, lineterminator="\n")


def trajectories_frame(trajectories: List[Trajectory]) -> pd.DataFrame:
    rows = []
    for traj in trajectories:
        for t, x, y in traj.points:
            rows.append({"track_id": traj.track_id, "t": t, "x": x, "y": y})
    return pd.DataFrame(rows, columns=["track_id", "t", "x", "y"])


def save_map(path: Path | str, semantic_map: SemanticMap, seed: int, config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    c, h, w = semantic_map.grid.shape
    lines = [
        metadata_line(seed, config_hash, "map"),
        f"{MAP_MAGIC} {c} {h} {w} {semantic_map.resolution!r} {semantic_map.origin[0]!r} {semantic_map.origin[1]!r}",
    ]
    for row in semantic_map.grid.reshape(c * h, w):
        lines.append(" ".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_map(path: Path | str, expected_hash: str | None = None) -> SemanticMap:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    metadata = parse_metadata_line(lines[0]) if lines and lines[0].startswith("#") else {}
    check_config_hash(metadata, expected_hash, path)
    body = [ln for ln in lines if ln.strip() and not ln.startswith("#")]
    if not body or not body[0].startswith(MAP_MAGIC + " "):
        raise ArtifactError(f"{path}: not a map file (expected '{MAP_MAGIC} C H W resolution origin_x origin_y')")
    head = body[0].split()
    try:
        c, h, w = int(head[1]), int(head[2]), int(head[3])
        resolution, ox, oy = float(head[4]), float(head[5]), float(head[6])
    except (IndexError, ValueError) as e:
        raise ArtifactError(f"{path}: malformed map header {body[0]!r}") from e
    values = np.array([float(v) for ln in body[1:] for v in ln.split()])
    if values.size != c * h * w:
        raise ArtifactError(f"{path}: map holds {values.size} values, header promises {c * h * w}")
    return SemanticMap(grid=values.reshape(c, h, w), resolution=resolution, origin=(ox, oy))


def save_dataset(directory: Path | str, train: List[Trajectory], test: List[Trajectory],
                 maps: Dict[str, SemanticMap], seed: int, config_hash: str) -> Path:
    directory = Path(directory)
    _write_csv(directory / "train.csv", trajectories_frame(train), metadata_line(seed, config_hash, "train"))
    _write_csv(directory / "test.csv", trajectories_frame(test), metadata_line(seed, config_hash, "test"))
    for scenario, semantic_map in sorted(maps.items()):
        save_map(directory / "maps" / f"{scenario}.map", semantic_map, seed, config_hash)
    logger.info(f"Saved dataset ({len(train)} train / {len(test)} test tracks, {len(maps)} maps) to {directory}")
    return directory


def load_trajectories(path: Path | str, expected_hash: str | None = None,
                      sample_period: float | None = None) -> Tuple[List[Trajectory], Dict[str, str]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        metadata = parse_metadata_line(fh.readline())
    check_config_hash(metadata, expected_hash, path)
    frame = pd.read_csv(path, comment="#", float_precision="round_trip", dtype={"track_id": str})
    ok, errors = validate_dataset_frame(frame)
    if not ok:
        raise ArtifactError(f"{path}: {'; '.join(errors)}")
    valid, row_errors = validate_rows(frame.to_dict(orient="records"), TrajectoryRecord)
    for idx, err in row_errors:
        logger.warning(f"{path.name} row {idx} skipped: {err}")

    grouped: Dict[str, List[Tuple[float, float, float]]] = {}
    for rec in valid:
        grouped.setdefault(rec.track_id, []).append((rec.t, rec.x, rec.y))
    trajectories = []
    for track_id, points in grouped.items():
        points = np.array(points)
        period = sample_period
        if period is None:
            period = float(np.median(np.diff(points[:, 0]))) if len(points) > 1 else 1.0
        try:
            trajectories.append(Trajectory(track_id=track_id, points=points, sample_period=period))
        except ValueError as e:
            logger.warning(f"{path.name}: track {track_id} skipped: {e}")
    return trajectories, metadata


def load_dataset(directory: Path | str, expected_hash: str | None = None,
                 sample_period: float | None = None) -> LoadedDataset:
    directory = Path(directory)
    for name in ("train.csv", "test.csv"):
        if not (directory / name).exists():
            raise ArtifactError(f"{directory}: missing {name}; run gen-data first")
    train, metadata = load_trajectories(directory / "train.csv", expected_hash, sample_period)
    test, _ = load_trajectories(directory / "test.csv", expected_hash, sample_period)
    maps = {p.stem: load_map(p, expected_hash) for p in sorted((directory / "maps").glob("*.map"))}
    logger.info(f"Loaded {len(train)} train / {len(test)} test tracks and {len(maps)} maps from {directory}")
    return LoadedDataset(train=train, test=test, maps=maps, metadata=metadata)

# -----------------
# Reports
# -----------------

def save_report(frame: pd.DataFrame, path: Path | str, seed: int, config_hash: str, kind: str) -> Path:
    path = Path(path)
    _write_csv(path, frame, metadata_line(seed, config_hash, kind))
    logger.info(f"Wrote {kind} ({len(frame)} rows) to {path}")
    return path


def load_report(path: Path | str, expected_hash: str | None = None) -> Tuple[pd.DataFrame, Dict[str, str]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        metadata = parse_metadata_line(fh.readline())
    check_config_hash(metadata, expected_hash, path)
    frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    return frame, metadata
