"""
Trajectories, canonical normalization, sliding-window chunking and the
synthetic road dataset with its semantic maps.

Canonical frame: the present (last past point) sits at the origin and the
last past displacement points along +Y, so every future starts at (0, 0)
heading upward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from data_models import SyntheticConfig
from utils import logger

ROAD, OFF_ROAD = 0, 1
MAP_CHANNELS = 2

# -----------------
# Core types
# -----------------

def rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class NormalizationTransform:
    translation: Tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0  # radians, world -> canonical

    @classmethod
    def identity(cls) -> "NormalizationTransform":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        """World -> canonical: rotate (p - translation) by ``rotation``."""
        points = np.asarray(points, dtype=np.float64)
        return (points - np.asarray(self.translation)) @ rotation_matrix(self.rotation).T

    def invert(self, points: np.ndarray) -> np.ndarray:
        """Canonical -> world."""
        points = np.asarray(points, dtype=np.float64)
        return points @ rotation_matrix(self.rotation) + np.asarray(self.translation)


def parse_track_id(track_id: str) -> Tuple[str, str, int]:
    """Split ``s0003-junction-b1-0`` into (scenario, kind, branch).

    Foreign ids come back as (track_id, "unknown", -1).
    """
    parts = str(track_id).split("-")
    if len(parts) >= 3 and parts[2].startswith("b") and parts[2][1:].isdigit():
        return parts[0], parts[1], int(parts[2][1:])
    return str(track_id), "unknown", -1


@dataclass
class Trajectory:
    track_id: str
    points: np.ndarray  # (N, 3) rows of (t, x, y)
    sample_period: float = 0.5

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.validate()

    def validate(self, tol: float = 1e-9) -> None:
        if self.sample_period <= 0:
            raise ValueError(f"track {self.track_id}: sample_period must be positive")
        if len(self.points) < 2:
            return
        dt = np.diff(self.points[:, 0])
        if np.any(dt <= 0):
            raise ValueError(f"track {self.track_id}: timestamps must be strictly increasing")
        if np.any(np.abs(dt - self.sample_period) > tol):
            raise ValueError(
                f"track {self.track_id}: timestamp spacing deviates from sample_period {self.sample_period}"
            )

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, 1:3]

    @property
    def scenario_id(self) -> str:
        return parse_track_id(self.track_id)[0]

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Sample:
    past: np.ndarray  # (P, 2) canonical
    future: np.ndarray  # (F, 2) canonical
    transform: NormalizationTransform = field(default_factory=NormalizationTransform)
    map_ref: Optional[str] = None
    sample_id: str = ""
    stationary: bool = False

    @property
    def track_id(self) -> str:
        return self.sample_id.split("@", 1)[0]

    @property
    def kind(self) -> str:
        return parse_track_id(self.track_id)[1]

    @property
    def branch(self) -> int:
        return parse_track_id(self.track_id)[2]

    def world_past(self) -> np.ndarray:
        return self.transform.invert(self.past)

    def world_future(self) -> np.ndarray:
        return self.transform.invert(self.future)


@dataclass
class SemanticMap:
    """Class-indicator grid; cell (row r, col c) is centred at origin + (c, r) * resolution."""

    grid: np.ndarray  # (C, H, W)
    resolution: float = 0.5
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3:
            raise ValueError(f"map grid must be (channels, height, width), got {self.grid.shape}")
        if self.resolution <= 0:
            raise ValueError(f"map resolution must be positive, got {self.resolution}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.grid.shape

    def world_to_cell(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        cols = (points[:, 0] - self.origin[0]) / self.resolution
        rows = (points[:, 1] - self.origin[1]) / self.resolution
        return cols, rows

    def off_road_mask(self, points: np.ndarray) -> np.ndarray:
        """True where the nearest cell is off-road or the point leaves the map."""
        cols, rows = self.world_to_cell(points)
        c = np.rint(cols).astype(int)
        r = np.rint(rows).astype(int)
        _, h, w = self.grid.shape
        inside = (c >= 0) & (c < w) & (r >= 0) & (r < h)
        out = np.ones(len(c), dtype=bool)
        out[inside] = self.grid[OFF_ROAD, r[inside], c[inside]] > 0.5
        return out

# -----------------
# Normalization
# -----------------

def _heading_angle(past: np.ndarray, eps: float = 1e-12) -> Optional[float]:
    steps = np.diff(past, axis=0)
    for step in steps[::-1]:
        if np.hypot(step[0], step[1]) > eps:
            return math.atan2(step[1], step[0])
    return None


def normalize(raw_past, raw_future, sample_id: str = "", map_ref: Optional[str] = None,
              rotation: Optional[float] = None) -> Sample:
    """Map a raw (past, future) pair into the canonical frame.

    The heading is the most recent nonzero past displacement.  A fully
    stationary past keeps rotation 0 and is flagged.  ``rotation`` overrides
    the canonical alignment (used for the random-rotation ablation).
    """
    past = np.asarray(raw_past, dtype=np.float64).reshape(-1, 2)
    future = np.asarray(raw_future, dtype=np.float64).reshape(-1, 2)
    if len(past) < 2:
        raise ValueError(f"normalize needs at least 2 past points to define a heading, got {len(past)}")

    stationary = False
    if rotation is None:
        heading = _heading_angle(past)
        if heading is None:
            stationary = True
            rotation = 0.0
            logger.debug(f"sample {sample_id or '?'} is stationary; rotation left at 0")
        else:
            rotation = math.pi / 2.0 - heading
    transform = NormalizationTransform(translation=(float(past[-1, 0]), float(past[-1, 1])),
                                       rotation=float(rotation))
    return Sample(past=transform.apply(past), future=transform.apply(future), transform=transform,
                  map_ref=map_ref, sample_id=sample_id, stationary=stationary)


def random_rotation_normalize(raw_past, raw_future, rng: np.random.Generator, sample_id: str = "",
                              map_ref: Optional[str] = None) -> Sample:
    """Translate the present to the origin but rotate by a random angle."""
    return normalize(raw_past, raw_future, sample_id=sample_id, map_ref=map_ref,
                     rotation=float(rng.uniform(0.0, 2.0 * math.pi)))


def denormalize(points, transform: NormalizationTransform) -> np.ndarray:
    return transform.invert(points)

# -----------------
# Chunking
# -----------------

def window_count(n_points: int, past_len: int, future_len: int, stride_steps: int = 1) -> int:
    if n_points < past_len + future_len:
        return 0
    return (n_points - past_len - future_len) // stride_steps + 1


def sliding_window_chunks(trajectory: Trajectory, past_seconds: float = 2.0, future_seconds: float = 4.0,
                          stride_steps: int = 1, rng: np.random.Generator | None = None) -> List[Sample]:
    """Cut a trajectory into normalized (past, future) windows.

    With ``rng`` given, windows get a random rotation instead of the
    canonical alignment.  Too-short trajectories yield an empty list.
    """
    if stride_steps < 1:
        raise ValueError(f"stride_steps must be >= 1, got {stride_steps}")
    past_len = int(round(past_seconds / trajectory.sample_period))
    future_len = int(round(future_seconds / trajectory.sample_period))
    xy = trajectory.xy
    samples: List[Sample] = []
    for k in range(window_count(len(xy), past_len, future_len, stride_steps)):
        start = k * stride_steps
        past = xy[start:start + past_len]
        future = xy[start + past_len:start + past_len + future_len]
        sample_id = f"{trajectory.track_id}@{start}"
        if rng is None:
            samples.append(normalize(past, future, sample_id=sample_id, map_ref=trajectory.scenario_id))
        else:
            samples.append(random_rotation_normalize(past, future, rng, sample_id=sample_id,
                                                     map_ref=trajectory.scenario_id))
    return samples


def build_samples(trajectories: List[Trajectory], past_seconds: float, future_seconds: float,
                  stride_steps: int = 1, rng: np.random.Generator | None = None) -> List[Sample]:
    samples: List[Sample] = []
    for traj in trajectories:
        samples.extend(sliding_window_chunks(traj, past_seconds, future_seconds, stride_steps, rng))
    return samples

# -----------------
# Synthetic generator
# -----------------

@dataclass
class SyntheticDataset:
    trajectories: List[Trajectory]
    maps: Dict[str, SemanticMap]

    def split(self, test_fraction: float, rng: np.random.Generator) -> Tuple[List[Trajectory], List[Trajectory]]:
        """Split by scenario so junction branches never straddle train and test."""
        scenarios = sorted({t.scenario_id for t in self.trajectories})
        order = rng.permutation(len(scenarios))
        n_test = int(round(test_fraction * len(scenarios)))
        test_ids = {scenarios[i] for i in order[:n_test]}
        train = [t for t in self.trajectories if t.scenario_id not in test_ids]
        test = [t for t in self.trajectories if t.scenario_id in test_ids]
        return train, test


def _straight_path(s: np.ndarray) -> np.ndarray:
    return np.stack([np.zeros_like(s), s], axis=1)


def _arc_path(s: np.ndarray, radius: float, turn: int) -> np.ndarray:
    # turn = +1 bends left (toward -x), -1 right
    phi = s / radius
    return np.stack([-turn * radius * (1.0 - np.cos(phi)), radius * np.sin(phi)], axis=1)


def _junction_path(s: np.ndarray, s_junction: float, branch: int, radius: float) -> np.ndarray:
    out = _straight_path(s)
    if branch == 0:
        return out
    turn = 1 if branch == 1 else -1
    quarter = math.pi * radius / 2.0
    d = s - s_junction
    on_arc = (d > 0) & (d <= quarter)
    after = d > quarter
    phi = d[on_arc] / radius
    out[on_arc, 0] = -turn * radius * (1.0 - np.cos(phi))
    out[on_arc, 1] = s_junction + radius * np.sin(phi)
    out[after, 0] = -turn * (radius + (d[after] - quarter))
    out[after, 1] = s_junction + radius
    return out


def _road_grid(centerlines: List[np.ndarray], config: SyntheticConfig) -> SemanticMap:
    pts = np.concatenate(centerlines, axis=0)
    lo = pts.min(axis=0) - config.map_margin
    hi = pts.max(axis=0) + config.map_margin
    res = config.map_resolution
    width = int(math.ceil((hi[0] - lo[0]) / res)) + 1
    height = int(math.ceil((hi[1] - lo[1]) / res)) + 1
    xs = lo[0] + np.arange(width) * res
    road = np.zeros((height, width))
    limit = config.road_half_width ** 2
    for r in range(height):
        y = lo[1] + r * res
        cells = np.stack([xs, np.full(width, y)], axis=1)
        d2 = ((cells[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2).min(axis=1)
        road[r] = d2 <= limit
    grid = np.stack([road, 1.0 - road])
    return SemanticMap(grid=grid, resolution=res, origin=(float(lo[0]), float(lo[1])))


def _dense_arclength(total: float, step: float = 0.25) -> np.ndarray:
    return np.linspace(0.0, total, max(2, int(math.ceil(total / step)) + 1))


def generate_synthetic_dataset(config: SyntheticConfig, seed: int) -> SyntheticDataset:
    """Deterministic straight / arc / junction scenarios with road maps.

    Junction scenarios share one noisy past prefix across all their tracks
    and branch at the present of the first window.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x6D616E]))
    dt = config.sample_period
    n = config.track_len
    times = np.arange(n) * dt
    split_at = config.past_len  # points shared by every branch

    trajectories: List[Trajectory] = []
    maps: Dict[str, SemanticMap] = {}
    kinds = ["straight"] * config.n_straight + ["arc"] * config.n_arc + ["junction"] * config.n_junction

    for idx, kind in enumerate(kinds):
        scenario = f"s{idx:04d}"
        speed = float(rng.uniform(config.speed_min, config.speed_max))
        theta = float(rng.uniform(0.0, 2.0 * math.pi))
        offset = rng.uniform(-200.0, 200.0, size=2)
        world = lambda local: local @ rotation_matrix(theta).T + offset
        s = speed * times
        dense = _dense_arclength(float(s[-1]))
        prefix_noise = rng.normal(0.0, config.noise_sigma, size=(split_at, 2)) if config.noise_sigma > 0 else np.zeros((split_at, 2))

        if kind == "straight":
            tracks = [(0, _straight_path(s))]
            centerlines = [_straight_path(dense)]
        elif kind == "arc":
            radius = float(rng.uniform(config.arc_radius_min, config.arc_radius_max))
            turn = int(rng.choice([-1, 1]))
            tracks = [(0 if turn > 0 else 1, _arc_path(s, radius, turn))]
            centerlines = [_arc_path(dense, radius, turn)]
        else:
            s_junction = float(s[config.past_len - 1])
            branches = []
            for k in range(config.tracks_per_junction):
                if config.branch_probability is None:
                    branches.append(k % config.junction_branches)
                elif rng.uniform() < config.branch_probability:
                    branches.append(0)
                else:
                    branches.append(int(rng.integers(1, config.junction_branches)))
            tracks = [(b, _junction_path(s, s_junction, b, config.turn_radius)) for b in branches]
            centerlines = [_junction_path(dense, s_junction, b, config.turn_radius)
                           for b in range(config.junction_branches)]

        for k, (branch, local) in enumerate(tracks):
            noisy = local.copy()
            noisy[:split_at] += prefix_noise
            if config.noise_sigma > 0:
                noisy[split_at:] += rng.normal(0.0, config.noise_sigma, size=(n - split_at, 2))
            xy = world(noisy)
            track_id = f"{scenario}-{kind}-b{branch}-{k}"
            trajectories.append(Trajectory(track_id=track_id,
                                           points=np.column_stack([times, xy]),
                                           sample_period=dt))
        maps[scenario] = _road_grid([world(c) for c in centerlines], config)

    logger.info(f"Generated {len(trajectories)} tracks over {len(kinds)} scenarios (seed={seed})")
    return SyntheticDataset(trajectories=trajectories, maps=maps)


def branch_counts(trajectories: List[Trajectory]) -> Dict[int, int]:
    counts: Dict[int, int] = {}
    for t in trajectories:
        _, kind, branch = parse_track_id(t.track_id)
        if kind == "junction":
            counts[branch] = counts.get(branch, 0) + 1
    return counts
