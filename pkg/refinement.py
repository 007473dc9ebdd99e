"""
Iterative refinement of memory predictions against the semantic map.

A two-layer CNN turns the map into a 16-channel feature grid.  Each
iteration samples the grid at the current coordinates, runs a GRU over the
pooled features (hidden state re-initialised from the past code every
iteration) and adds the head's per-step offsets to the coordinates.
Offsets are produced in the canonical frame and rotated into the world.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from autodiff import ShapeError, Tensor, bilinear_sample, no_grad, relu, stack
from encdec import EncDecModel
from layers import Adam, BatchNorm2d, Conv2d, Dense, GRUCell, Module, check_finite_loss, mse_loss
from memory import MemoryStore, read_top_k
from trajectories import NormalizationTransform, Sample, SemanticMap, rotation_matrix
from utils import logger

FEATURE_CHANNELS = 16


class RefinementModel(Module):
    def __init__(self, in_channels: int = 2, hidden_width: int = 48, iterations: int = 4,
                 affine_bridge: bool = False, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.iterations = iterations
        self.conv1 = Conv2d(in_channels, 8, kernel_size=3, stride=2, padding=1, rng=rng)
        self.bn1 = BatchNorm2d(8)
        self.conv2 = Conv2d(8, FEATURE_CHANNELS, kernel_size=3, stride=1, padding=1, rng=rng)
        self.bn2 = BatchNorm2d(FEATURE_CHANNELS)
        self.gru = GRUCell(FEATURE_CHANNELS, hidden_width, rng)
        self.bridge = Dense(hidden_width, hidden_width, rng) if affine_bridge else None
        self.head = Dense(hidden_width, 2, zero_init=True)

    def features(self, grid: np.ndarray, training: bool | None = None) -> Tensor:
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 3 or grid.shape[0] != self.in_channels:
            raise ShapeError(f"map must have {self.in_channels} channels as (C, H, W), got {grid.shape}")
        if grid.shape[1] < 1 or grid.shape[2] < 1:
            raise ShapeError(f"map {grid.shape} is smaller than one output cell")
        x = relu(self.bn1(self.conv1(Tensor(grid)), training))
        return relu(self.bn2(self.conv2(x), training))

    def initial_hidden(self, pi) -> Tensor:
        pi = pi if isinstance(pi, Tensor) else Tensor(np.asarray(pi, dtype=np.float64))
        return self.bridge(pi) if self.bridge is not None else pi


@dataclass
class FeatureMap:
    """16-channel grid; feature cell (r, c) sits at origin + (c, r) * resolution."""

    grid: Tensor
    resolution: float
    origin: Tuple[float, float]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.grid.shape

    def to_cells(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return ((points[:, 0] - self.origin[0]) / self.resolution,
                (points[:, 1] - self.origin[1]) / self.resolution)


def _feature_map(semantic_map: SemanticMap, model: RefinementModel, training: bool) -> FeatureMap:
    grid = model.features(semantic_map.grid, training)
    # stride 2 with padding 1: output cell r is centred on input cell 2r
    return FeatureMap(grid=grid, resolution=semantic_map.resolution * model.conv1.stride,
                      origin=tuple(semantic_map.origin))


def extract_feature_map(semantic_map: SemanticMap, model: RefinementModel) -> FeatureMap:
    with no_grad():
        return _feature_map(semantic_map, model, training=False)


def _pool(feature_map: FeatureMap, points: np.ndarray) -> Tensor:
    cols, rows = feature_map.to_cells(points)
    return bilinear_sample(feature_map.grid, cols, rows)


def pool_features(feature_map: FeatureMap, coords) -> np.ndarray:
    """(F, 16) bilinear samples at world coordinates; outside the grid gives zeros."""
    with no_grad():
        return _pool(feature_map, coords).data


def _refine_graph(model: RefinementModel, coords: Tensor, pi, feature_map: FeatureMap,
                  transform: NormalizationTransform, iterations: int) -> List[Tensor]:
    to_world = Tensor(rotation_matrix(transform.rotation))
    h0 = model.initial_hidden(pi)
    steps: List[Tensor] = []
    for _ in range(iterations):
        pooled = _pool(feature_map, coords.data)
        h = h0
        offsets: List[Tensor] = []
        for t in range(coords.shape[0]):
            h = model.gru(pooled[t], h)
            offsets.append(model.head(h))
        coords = coords + stack(offsets, axis=0) @ to_world
        steps.append(coords)
    return steps


@dataclass
class RefinedPrediction:
    coords: np.ndarray  # (F, 2) world frame
    start: np.ndarray
    steps: List[np.ndarray] = field(default_factory=list)  # coordinates after each iteration

    @property
    def offsets(self) -> np.ndarray:
        return self.coords - self.start


def refine(prediction, pi, feature_map: FeatureMap, model: RefinementModel,
           transform: NormalizationTransform | None = None, iterations: int | None = None) -> RefinedPrediction:
    """Refine one world-frame prediction; intermediate coordinates are kept in ``steps``."""
    transform = transform if transform is not None else NormalizationTransform.identity()
    iterations = model.iterations if iterations is None else iterations
    coords = Tensor(np.asarray(prediction, dtype=np.float64).reshape(-1, 2))
    with no_grad():
        steps = _refine_graph(model, coords, pi, feature_map, transform, iterations)
    start = coords.data.copy()
    if not steps:
        return RefinedPrediction(coords=start.copy(), start=start, steps=[])
    return RefinedPrediction(coords=steps[-1].data.copy(), start=start, steps=[s.data.copy() for s in steps])


def refine_futures(futures: np.ndarray, sample: Sample, pi, feature_map: FeatureMap,
                   model: RefinementModel, iterations: int | None = None) -> np.ndarray:
    """Refine K canonical futures of one sample; returns (K, F, 2) in the world frame."""
    out = []
    for future in futures:
        world = sample.transform.invert(future)
        out.append(refine(world, pi, feature_map, model, sample.transform, iterations).coords)
    return np.stack(out)

# -----------------
# Joint training
# -----------------

@dataclass
class RefinementTraining:
    model: RefinementModel
    encdec: EncDecModel
    history: pd.DataFrame
    first_step_loss: float = float("nan")
    first_step_unrefined_loss: float = float("nan")


def _world(points: Tensor, transform: NormalizationTransform) -> Tensor:
    return points @ Tensor(rotation_matrix(transform.rotation)) + Tensor(np.asarray(transform.translation))


def train_refinement(samples: Sequence[Sample], maps: Dict[str, SemanticMap], encdec: EncDecModel,
                     model: RefinementModel, memory: MemoryStore, epochs: int = 50, *,
                     learning_rate: float = 1e-4, grad_clip: float = 1.0,
                     rng: np.random.Generator | None = None, log_every: int = 10) -> RefinementTraining:
    """Train the refinement module and finetune the decoder; encoders stay frozen.

    Every sample is paired with the top-1 future code of a different memory
    entry when one exists.  One Adam step per scenario map per epoch, with
    the loss averaged over that scenario's samples.
    """
    usable = [s for s in samples if s.map_ref in maps]
    if len(usable) < len(samples):
        logger.warning(f"train-refine: {len(samples) - len(usable)} samples have no map and are skipped")
    if not usable:
        raise ValueError("train_refinement needs samples with semantic maps")
    rng = rng if rng is not None else np.random.default_rng(0)

    pis = encdec.encode_past(np.stack([s.past for s in usable]))
    partner_phi = np.stack([
        memory[int(read_top_k(pis[i], memory, 1, exclude_source=s.sample_id)[0][0])].value
        for i, s in enumerate(usable)
    ])
    groups: Dict[str, List[int]] = defaultdict(list)
    for i, s in enumerate(usable):
        groups[s.map_ref].append(i)
    scenario_ids = sorted(groups)

    params = list(model.named_parameters("refine."))
    params += list(encdec.decoder.named_parameters("decoder."))
    params += list(encdec.head.named_parameters("head."))
    optimizer = Adam(params, learning_rate=learning_rate, clip_norm=grad_clip)
    model.train()

    first_loss = first_unrefined = float("nan")
    last_finite: float | None = None
    history: List[Dict[str, float]] = []
    for epoch in range(1, epochs + 1):
        total = total_unrefined = 0.0
        for g in rng.permutation(len(scenario_ids)):
            idx = groups[scenario_ids[g]]
            optimizer.zero_grad()
            feature_map = _feature_map(maps[scenario_ids[g]], model, training=True)
            decoded = encdec.decode_graph(Tensor(pis[idx]), Tensor(partner_phi[idx]))
            loss = unrefined = None
            for row, i in enumerate(idx):
                sample = usable[i]
                target = sample.transform.invert(sample.future)
                start = _world(decoded[row], sample.transform)
                refined = _refine_graph(model, start, pis[i], feature_map, sample.transform, model.iterations)
                end = refined[-1] if refined else start
                term = mse_loss(end, target)
                loss = term if loss is None else loss + term
                plain = float(np.mean((start.data - target) ** 2))
                unrefined = plain if unrefined is None else unrefined + plain
            loss = loss * (1.0 / len(idx))
            unrefined /= len(idx)
            check_finite_loss(loss.item(), "train-refine", epoch, last_finite)
            if np.isnan(first_loss):
                first_loss, first_unrefined = loss.item(), unrefined
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            total_unrefined += unrefined * len(idx)
        mean_loss = total / len(usable)
        last_finite = mean_loss
        history.append({"epoch": epoch, "refined_mse": mean_loss, "unrefined_mse": total_unrefined / len(usable)})
        if epoch % log_every == 0 or epoch == 1:
            logger.info(f"refine epoch {epoch}: refined_mse={mean_loss:.6f} "
                        f"unrefined_mse={total_unrefined / len(usable):.6f}")

    model.eval()
    encdec.eval()
    return RefinementTraining(model=model, encdec=encdec, history=pd.DataFrame(history),
                              first_step_loss=first_loss, first_step_unrefined_loss=first_unrefined)
