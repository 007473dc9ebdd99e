"""
Displacement metrics, best-of-K, classical baselines and batch evaluation.

Errors are measured in meters in the world frame (predictions and ground
truth are denormalized with the sample's transform before comparing).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np
import pandas as pd

from autodiff import Tensor, no_grad, relu
from layers import Adam, Dense, Module, check_finite_loss, mse_loss
from memory import (CoordinateBank, MemoryStore, PredictionSet, TrajectoryCodec, copy_future_predict,
                    nearest_neighbor_predict, predict)
from refinement import RefinementModel, extract_feature_map, refine_futures
from trajectories import Sample, SemanticMap
from utils import logger

PREDICTION_MODES = ("decode", "copy", "nearest")

# -----------------
# Metrics
# -----------------

def _pair(prediction, ground_truth):
    prediction = np.asarray(prediction, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    if prediction.shape != ground_truth.shape:
        raise ValueError(f"prediction {prediction.shape} and ground truth {ground_truth.shape} differ")
    return prediction, ground_truth


def ade(prediction, ground_truth, horizon_steps: int | None = None) -> float:
    """Mean Euclidean error over steps 1..horizon_steps."""
    prediction, ground_truth = _pair(prediction, ground_truth)
    horizon_steps = len(ground_truth) if horizon_steps is None else horizon_steps
    if not 1 <= horizon_steps <= len(ground_truth):
        raise ValueError(f"horizon {horizon_steps} outside 1..{len(ground_truth)}")
    err = np.linalg.norm(prediction[:horizon_steps] - ground_truth[:horizon_steps], axis=1)
    return float(err.mean())


def fde(prediction, ground_truth, step: int | None = None) -> float:
    """Euclidean error at a 1-based future step (the last one by default)."""
    prediction, ground_truth = _pair(prediction, ground_truth)
    step = len(ground_truth) if step is None else step
    if not 1 <= step <= len(ground_truth):
        raise ValueError(f"step {step} outside 1..{len(ground_truth)}")
    return float(np.linalg.norm(prediction[step - 1] - ground_truth[step - 1]))


def best_of_k(metric: Callable[..., float], prediction_set, ground_truth, k: int, *args) -> float:
    futures = prediction_set.futures if isinstance(prediction_set, PredictionSet) else np.asarray(prediction_set)
    if len(futures) == 0:
        raise ValueError("best_of_k needs at least one prediction")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return min(metric(f, ground_truth, *args) for f in futures[:k])

# -----------------
# Baselines
# -----------------

class KalmanBaseline:
    """Constant-velocity filter over the past, then prediction without updates.

    State is [x, y, vx, vy] in per-step units, initialised from the first two
    observations.
    """

    name = "kalman"

    def __init__(self, sigma_q: float = 0.1, sigma_r: float = 0.1):
        self.F = np.array([
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        self.H = np.eye(2, 4)
        self.Q = np.eye(4) * sigma_q ** 2
        self.R = np.eye(2) * sigma_r ** 2

    def predict(self, past, future_len: int) -> np.ndarray:
        past = np.asarray(past, dtype=np.float64)
        if len(past) < 2:
            raise ValueError("kalman baseline needs at least 2 past points")
        x = np.concatenate([past[1], past[1] - past[0]])
        P = np.eye(4) * self.R[0, 0]
        for z in past[2:]:
            x = self.F @ x
            P = self.F @ P @ self.F.T + self.Q
            y = z - self.H @ x
            S = self.H @ P @ self.H.T + self.R
            K = P @ self.H.T @ np.linalg.inv(S)
            x = x + K @ y
            P = (np.eye(4) - K @ self.H) @ P
        out = np.zeros((future_len, 2))
        for i in range(future_len):
            x = self.F @ x
            out[i] = x[:2]
        return out


def kalman_baseline(past, future_len: int, sigma_q: float = 0.1, sigma_r: float = 0.1) -> np.ndarray:
    return KalmanBaseline(sigma_q, sigma_r).predict(past, future_len)


class LinearBaseline:
    """Least-squares map from flattened past (plus bias) to flattened future."""

    name = "linear"

    def __init__(self):
        self.coef: np.ndarray | None = None
        self.future_len = 0

    def fit(self, samples: Sequence[Sample]) -> "LinearBaseline":
        if not samples:
            raise ValueError("linear baseline needs training samples")
        X = np.stack([s.past.reshape(-1) for s in samples])
        Y = np.stack([s.future.reshape(-1) for s in samples])
        X = np.hstack([X, np.ones((len(X), 1))])
        # lstsq returns the minimum-norm (pseudo-inverse) solution when rank-deficient
        self.coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
        self.future_len = samples[0].future.shape[0]
        return self

    def predict(self, past, future_len: int | None = None) -> np.ndarray:
        if self.coef is None:
            raise RuntimeError("linear baseline is not fitted")
        x = np.append(np.asarray(past, dtype=np.float64).reshape(-1), 1.0)
        return (x @ self.coef).reshape(-1, 2)


class MLPBaseline(Module):
    """Two dense layers with ReLU from flattened past to flattened future."""

    name = "mlp"

    def __init__(self, past_len: int, future_len: int, hidden: int = 64, coordinate_scale: float = 10.0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.future_len = future_len
        self.coordinate_scale = coordinate_scale
        self.hidden = Dense(2 * past_len, hidden, rng)
        self.out = Dense(hidden, 2 * future_len, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(relu(self.hidden(x)))

    def fit(self, samples: Sequence[Sample], epochs: int = 500, learning_rate: float = 1e-3,
            batch_size: int = 32, rng: np.random.Generator | None = None, log_every: int = 100) -> pd.DataFrame:
        if not samples:
            raise ValueError("mlp baseline needs training samples")
        rng = rng if rng is not None else np.random.default_rng(0)
        X = np.stack([s.past.reshape(-1) for s in samples]) / self.coordinate_scale
        Y = np.stack([s.future.reshape(-1) for s in samples]) / self.coordinate_scale
        optimizer = Adam(self.named_parameters(), learning_rate=learning_rate)
        scale2 = self.coordinate_scale ** 2
        history: List[Dict[str, float]] = []
        last_finite: float | None = None
        for epoch in range(1, epochs + 1):
            perm = rng.permutation(len(X))
            total = 0.0
            for start in range(0, len(perm), batch_size):
                idx = perm[start:start + batch_size]
                optimizer.zero_grad()
                loss = mse_loss(self.forward(Tensor(X[idx])), Y[idx])
                check_finite_loss(loss.item(), "mlp baseline", epoch, last_finite)
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
            train_mse = total / len(X) * scale2
            last_finite = train_mse
            history.append({"epoch": epoch, "train_mse": train_mse})
            if epoch % log_every == 0:
                logger.debug(f"mlp epoch {epoch}: train_mse={train_mse:.6f}")
        return pd.DataFrame(history)

    def predict(self, past, future_len: int | None = None) -> np.ndarray:
        x = np.asarray(past, dtype=np.float64).reshape(1, -1) / self.coordinate_scale
        with no_grad():
            y = self.forward(Tensor(x)).data
        return (y * self.coordinate_scale).reshape(-1, 2)

# -----------------
# Batch evaluation
# -----------------

@dataclass
class EvalReport:
    summary: pd.DataFrame
    per_sample: pd.DataFrame
    memory_size: int
    metadata: Dict[str, str] = field(default_factory=dict)
    extras: Dict[str, float] = field(default_factory=dict)

    def value(self, method: str, k: int, horizon: float, metric: str = "fde") -> float:
        row = self.summary[(self.summary["method"] == method) & (self.summary["k"] == k)
                           & (self.summary["horizon_s"] == horizon)]
        if row.empty:
            raise KeyError(f"no summary row for method={method} k={k} horizon={horizon}")
        return float(row[metric].iloc[0])


def _metric_rows(sample_id: str, method: str, futures: np.ndarray, truth: np.ndarray,
                 k_list: Sequence[int], horizons: Dict[float, int]) -> List[Dict[str, object]]:
    rows = []
    for k in k_list:
        for seconds, steps in horizons.items():
            rows.append({
                "sample_id": sample_id,
                "method": method,
                "k": int(k),
                "horizon_s": float(seconds),
                "ade": best_of_k(ade, futures, truth, k, steps),
                "fde": best_of_k(fde, futures, truth, k, steps),
            })
    return rows


def evaluate(model: TrajectoryCodec, memory: MemoryStore, refinement: RefinementModel | None,
             samples: Sequence[Sample], k_list: Sequence[int], horizons: Dict[float, int], *,
             maps: Dict[str, SemanticMap] | None = None, mode: str = "decode",
             bank: CoordinateBank | None = None, baselines: Sequence | None = None,
             method: str = "memory", metadata: Dict[str, str] | None = None,
             memory_size: int | None = None) -> EvalReport:
    """Best-of-K ADE/FDE per horizon for the memory predictor and baselines.

    ``mode`` picks how the ranked futures are produced: ``decode`` through the
    decoder, ``copy`` returning stored source futures, ``nearest`` copying
    futures of the closest raw training pasts from ``bank``.
    """
    if not samples:
        raise ValueError("evaluate needs a non-empty dataset")
    if mode not in PREDICTION_MODES:
        raise ValueError(f"mode must be one of {PREDICTION_MODES}, got {mode!r}")
    if mode == "nearest" and bank is None:
        raise ValueError("nearest mode needs a coordinate bank")
    k_list = sorted(set(int(k) for k in k_list))
    k_max = k_list[-1]
    maps = maps or {}
    feature_cache: Dict[str, object] = {}

    rows: List[Dict[str, object]] = []
    off_road_refined: List[int] = []
    off_road_unrefined: List[int] = []
    for sample in sorted(samples, key=lambda s: s.sample_id):
        truth = sample.world_future()
        if mode == "nearest":
            pred = nearest_neighbor_predict(sample.past, bank, k_max)
        elif mode == "copy":
            pred = copy_future_predict(sample.past, memory, k_max, model)
        else:
            pred = predict(sample.past, memory, k_max, model)
        world = np.stack([sample.transform.invert(f) for f in pred.futures])

        semantic_map = maps.get(sample.map_ref) if sample.map_ref is not None else None
        if refinement is not None and semantic_map is not None:
            if sample.map_ref not in feature_cache:
                feature_cache[sample.map_ref] = extract_feature_map(semantic_map, refinement)
            pi = model.encode_past(sample.past)
            refined = refine_futures(pred.futures, sample, pi, feature_cache[sample.map_ref], refinement)
            off_road_unrefined.append(int(semantic_map.off_road_mask(world[0]).sum()))
            off_road_refined.append(int(semantic_map.off_road_mask(refined[0]).sum()))
            world = refined
        rows.extend(_metric_rows(sample.sample_id, method, world, truth, k_list, horizons))

        for baseline in baselines or ():
            guess = sample.transform.invert(baseline.predict(sample.past, len(sample.future)))
            rows.extend(_metric_rows(sample.sample_id, baseline.name, guess[None], truth, [1], horizons))

    per_sample = pd.DataFrame(rows)
    summary = (per_sample.groupby(["method", "k", "horizon_s"], sort=True)[["ade", "fde"]]
               .mean().reset_index())
    extras: Dict[str, float] = {}
    if off_road_refined:
        extras["off_road_refined"] = float(np.mean(off_road_refined))
        extras["off_road_unrefined"] = float(np.mean(off_road_unrefined))
    memory_size = len(memory) if memory_size is None else memory_size
    report = EvalReport(summary=summary, per_sample=per_sample, memory_size=memory_size,
                        metadata=dict(metadata or {}), extras=extras)
    logger.info(f"Evaluated {len(samples)} samples with memory size {memory_size} (mode={mode})")
    return report
