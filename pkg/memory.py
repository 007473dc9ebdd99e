"""
Persistent key-value memory of (past code, future code) pairs.

Reads are cosine-addressed over the keys; writes are gated by a one-input
controller that maps the miss-rate error of the current prediction to a
write probability.  Entries are only ever appended.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from autodiff import ShapeError, Tensor, sigmoid
from layers import Module, check_finite_loss, make_optimizer, zeros_param
from trajectories import Sample
from utils import logger

WRITE_THRESHOLD = 0.5


class EmptyMemoryError(LookupError):
    """Raised when reading a memory that holds no entries."""
    pass


class TrajectoryCodec(Protocol):
    future_len: int

    def encode_past(self, past) -> np.ndarray: ...

    def encode_future(self, future) -> np.ndarray: ...

    def decode(self, pi, phi) -> np.ndarray: ...

# -----------------
# Store
# -----------------

@dataclass(frozen=True, eq=False)
class MemoryEntry:
    key: np.ndarray
    value: np.ndarray
    source_id: str
    write_epoch: int = 0
    future: Optional[np.ndarray] = None  # canonical source future, used by the copy-future predictor

    def __post_init__(self):
        for name in ("key", "value", "future"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.array(arr, dtype=np.float64, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


class MemoryStore:
    """Append-only ordered list of entries with a cached key matrix."""

    def __init__(self, key_width: int = 48, value_width: int = 48):
        self.key_width = key_width
        self.value_width = value_width
        self._entries: List[MemoryEntry] = []
        self._keys = np.zeros((0, key_width))
        self._key_norms = np.zeros(0)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[MemoryEntry]:
        return iter(self._entries)

    def __getitem__(self, idx: int) -> MemoryEntry:
        return self._entries[idx]

    def __repr__(self) -> str:
        return f"MemoryStore(entries={len(self)}, key_width={self.key_width})"

    def append(self, entry: MemoryEntry) -> None:
        if entry.key.shape != (self.key_width,) or entry.value.shape != (self.value_width,):
            raise ShapeError(
                f"memory expects key/value widths {self.key_width}/{self.value_width}, "
                f"got {entry.key.shape}/{entry.value.shape}"
            )
        norm = float(np.linalg.norm(entry.key))
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError(f"entry {entry.source_id!r} has a zero or non-finite key")
        self._entries.append(entry)
        self._keys = np.vstack([self._keys, entry.key[None]])
        self._key_norms = np.append(self._key_norms, norm)

    def write(self, key, value, source_id: str, write_epoch: int = 0, future=None) -> MemoryEntry:
        entry = MemoryEntry(key=key, value=value, source_id=source_id, write_epoch=write_epoch, future=future)
        self.append(entry)
        return entry

    def copy(self) -> "MemoryStore":
        other = MemoryStore(self.key_width, self.value_width)
        other._entries = list(self._entries)
        other._keys = self._keys.copy()
        other._key_norms = self._key_norms.copy()
        return other

    def key_matrix(self) -> np.ndarray:
        return self._keys.copy()

    def value_matrix(self) -> np.ndarray:
        if not self._entries:
            return np.zeros((0, self.value_width))
        return np.stack([e.value for e in self._entries])

    def source_ids(self) -> List[str]:
        return [e.source_id for e in self._entries]

# -----------------
# Addressing
# -----------------

def similarity_scores(pi, memory: MemoryStore) -> np.ndarray:
    """Cosine similarity of ``pi`` against every key, in entry order."""
    if len(memory) == 0:
        raise EmptyMemoryError("memory is empty; fill memory before reading from it")
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (memory.key_width,):
        raise ShapeError(f"query has shape {pi.shape}, memory keys are {memory.key_width} wide")
    norm = float(np.linalg.norm(pi))
    if not np.isfinite(norm) or norm == 0.0:
        raise ValueError("query key must be finite with non-zero norm")
    scores = (memory._keys @ pi) / (memory._key_norms * norm)
    return np.clip(scores, -1.0, 1.0)


def read_top_k(pi, memory: MemoryStore, k: int,
               exclude_source: str | None = None) -> Tuple[np.ndarray, np.ndarray]:
    """Indices and scores of the ``k`` best keys; ties go to the older entry.

    ``exclude_source`` hides entries written from that sample as long as
    some other entry remains.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = similarity_scores(pi, memory)
    candidates = np.arange(len(memory))
    if exclude_source is not None:
        keep = np.array([sid != exclude_source for sid in memory.source_ids()])
        if keep.any():
            candidates = candidates[keep]
    order = np.argsort(-scores[candidates], kind="stable")[:k]
    idx = candidates[order]
    return idx, scores[idx]


@dataclass
class PredictionSet:
    futures: np.ndarray  # (K, F, 2) canonical frame
    scores: np.ndarray  # (K,)
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    source_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.futures = np.asarray(self.futures, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.futures) != len(self.scores):
            raise ShapeError(f"{len(self.futures)} futures but {len(self.scores)} scores")
        if np.any(np.diff(self.scores) > 0):
            raise ValueError("prediction scores must be non-increasing")

    def __len__(self) -> int:
        return len(self.futures)


def predict(past, memory: MemoryStore, k: int, model: TrajectoryCodec,
            exclude_source: str | None = None, pi=None) -> PredictionSet:
    """Decode the query's past code against each of the top-K future codes."""
    pi = model.encode_past(past) if pi is None else np.asarray(pi, dtype=np.float64)
    idx, scores = read_top_k(pi, memory, k, exclude_source)
    phis = np.stack([memory[i].value for i in idx])
    futures = model.decode(np.repeat(pi[None], len(idx), axis=0), phis)
    return PredictionSet(futures=futures, scores=scores, indices=idx,
                         source_ids=[memory[i].source_id for i in idx])


def copy_future_predict(past, memory: MemoryStore, k: int, model: TrajectoryCodec) -> PredictionSet:
    """Return the stored source futures of the top-K entries instead of decoding."""
    pi = model.encode_past(past)
    idx, scores = read_top_k(pi, memory, k)
    if any(memory[i].future is None for i in idx):
        raise ValueError("memory entries carry no source futures; rebuild the memory with futures stored")
    futures = np.stack([memory[i].future for i in idx])
    return PredictionSet(futures=futures, scores=scores, indices=idx,
                         source_ids=[memory[i].source_id for i in idx])


@dataclass
class CoordinateBank:
    """Raw training pasts and futures for the nearest-neighbour predictor."""

    pasts: np.ndarray  # (N, 2P)
    futures: np.ndarray  # (N, F, 2)
    source_ids: List[str]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "CoordinateBank":
        if not samples:
            raise ValueError("coordinate bank needs at least one sample")
        return cls(pasts=np.stack([s.past.reshape(-1) for s in samples]),
                   futures=np.stack([s.future for s in samples]),
                   source_ids=[s.sample_id for s in samples])

    def __len__(self) -> int:
        return len(self.source_ids)


def nearest_neighbor_predict(past, bank: CoordinateBank, k: int) -> PredictionSet:
    """Copy the futures of the K closest training pasts (Euclidean on coordinates)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    query = np.asarray(past, dtype=np.float64).reshape(-1)
    if query.shape[0] != bank.pasts.shape[1]:
        raise ShapeError(f"past has {query.shape[0]} coordinates, bank holds {bank.pasts.shape[1]}")
    dist = np.linalg.norm(bank.pasts - query, axis=1)
    idx = np.argsort(dist, kind="stable")[:k]
    return PredictionSet(futures=bank.futures[idx], scores=-dist[idx], indices=idx,
                         source_ids=[bank.source_ids[i] for i in idx])

# -----------------
# Controller
# -----------------

def miss_rate_error(prediction, ground_truth, th_horizon: float = 2.0) -> float:
    """Fraction of steps whose error exceeds a threshold growing linearly to ``th_horizon``."""
    prediction = np.asarray(prediction, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    if prediction.shape != ground_truth.shape:
        raise ShapeError(f"prediction {prediction.shape} and ground truth {ground_truth.shape} differ")
    steps = len(ground_truth)
    thresholds = th_horizon * np.arange(1, steps + 1) / steps
    hits = np.linalg.norm(prediction - ground_truth, axis=1) <= thresholds
    return float(1.0 - hits.mean())


class Controller(Module):
    """sigmoid(weight * e + bias), starting flat at P = 0.5."""

    def __init__(self, weight: float = 0.0, bias: float = 0.0):
        super().__init__()
        self.weight = zeros_param((1,), "weight")
        self.bias = zeros_param((1,), "bias")
        self.weight.data[0] = weight
        self.bias.data[0] = bias

    def forward_graph(self, e: float) -> Tensor:
        return sigmoid(self.weight * float(e) + self.bias).sum()

    def probability(self, e: float) -> float:
        z = float(self.weight.data[0]) * float(e) + float(self.bias.data[0])
        return float(0.5 * (1.0 + np.tanh(0.5 * z)))

    def separates(self) -> bool:
        """True when a miss is written and a perfect prediction is not."""
        return self.probability(1.0) > WRITE_THRESHOLD > self.probability(0.0)

    def __repr__(self) -> str:
        return f"Controller(weight={self.weight.data[0]:.6f}, bias={self.bias.data[0]:.6f})"


def controller_forward(e: float, controller: Controller) -> float:
    return controller.probability(e)


def controller_loss(e: float, p):
    """e * (1 - P) + (1 - e) * P; works on floats and on Tensors."""
    if not 0.0 <= float(e) <= 1.0:
        raise ValueError(f"error e must lie in [0, 1], got {e}")
    return e * (1.0 - p) + (1.0 - e) * p


def prediction_error(pi, memory: MemoryStore, ground_truth, model: TrajectoryCodec,
                     th_horizon: float = 2.0) -> float:
    """Miss-rate error of the top-1 memory prediction; 1 when memory is empty."""
    if len(memory) == 0:
        return 1.0
    pred = predict(None, memory, 1, model, pi=pi)
    return miss_rate_error(pred.futures[0], ground_truth, th_horizon)


@dataclass
class ControllerResult:
    controller: Controller
    memory: MemoryStore
    history: pd.DataFrame


def _codes(samples: Sequence[Sample], model: TrajectoryCodec) -> Tuple[np.ndarray, np.ndarray]:
    pasts = np.stack([s.past for s in samples])
    futures = np.stack([s.future for s in samples])
    return model.encode_past(pasts), model.encode_future(futures)


def train_controller(samples: Sequence[Sample], model: TrajectoryCodec, epochs: int = 10, *,
                     controller: Controller | None = None, learning_rate: float = 1e-4, optimizer: str = "adam",
                     th_horizon: float = 2.0, rng: np.random.Generator | None = None,
                     log_every: int = 1) -> ControllerResult:
    """Train the write gate against a memory that is reset every epoch.

    Each sample is predicted from the current memory, the controller takes one
    optimizer step on its loss, and the sample is written when the updated
    controller's probability exceeds 0.5 or the memory is still empty.

    Under Adam every perfectly predicted sample moves the bias by about one
    learning-rate step, so on highly redundant data the final gate can sit
    just below P(w|e=1) = 0.5.  ``optimizer="sgd"`` follows the saturating
    sigmoid gradient.  A gate failing P(1) > 0.5 > P(0) is logged.
    """
    if len(samples) == 0:
        raise ValueError("train_controller needs a non-empty dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    controller = controller if controller is not None else Controller()
    step_rule = make_optimizer(optimizer, controller.named_parameters(), learning_rate)
    pis, phis = _codes(samples, model)
    key_width, value_width = pis.shape[1], phis.shape[1]

    history: List[Dict[str, float]] = []
    memory = MemoryStore(key_width, value_width)
    last_finite: float | None = None
    for epoch in range(1, epochs + 1):
        memory = MemoryStore(key_width, value_width)
        losses = []
        for i in rng.permutation(len(samples)):
            sample = samples[i]
            e = prediction_error(pis[i], memory, sample.future, model, th_horizon)
            step_rule.zero_grad()
            loss = controller_loss(e, controller.forward_graph(e))
            check_finite_loss(loss.item(), "train-controller", epoch, last_finite)
            loss.backward()
            step_rule.step()
            losses.append(loss.item())
            if len(memory) == 0 or controller.probability(e) > WRITE_THRESHOLD:
                memory.write(pis[i], phis[i], sample.sample_id, epoch, sample.future)
        mean_loss = float(np.mean(losses))
        last_finite = mean_loss
        history.append({"epoch": epoch, "mean_loss": mean_loss, "memory_size": len(memory),
                        "weight": float(controller.weight.data[0]), "bias": float(controller.bias.data[0])})
        if epoch % log_every == 0 or epoch == epochs:
            logger.info(f"controller epoch {epoch}: loss={mean_loss:.4f} memory={len(memory)} {controller}")

    if controller.weight.data[0] <= 0:
        logger.warning(f"trained controller weight is not positive ({controller.weight.data[0]:.6f})")
    if not controller.separates():
        logger.warning(f"trained gate does not separate misses from hits: P(w|e=1)={controller.probability(1.0):.4f}, "
                       f"P(w|e=0)={controller.probability(0.0):.4f}")
    return ControllerResult(controller=controller, memory=memory, history=pd.DataFrame(history))


def online_ingest(sample: Sample, memory: MemoryStore, model: TrajectoryCodec, controller: Controller | None,
                  th_horizon: float = 2.0, write_epoch: int = 0, pi=None, phi=None) -> Tuple[bool, MemoryStore]:
    """Apply the write gate to one sample.

    ``controller=None`` writes unconditionally and an empty memory is always
    written to.
    """
    pi = model.encode_past(sample.past) if pi is None else pi
    if controller is None or len(memory) == 0:
        written = True
    else:
        e = prediction_error(pi, memory, sample.future, model, th_horizon)
        written = controller.probability(e) > WRITE_THRESHOLD
    if written:
        phi = model.encode_future(sample.future) if phi is None else phi
        memory.write(pi, phi, sample.sample_id, write_epoch, sample.future)
    return written, memory


def fill_memory(samples: Sequence[Sample], model: TrajectoryCodec, controller: Controller | None,
                th_horizon: float = 2.0, memory: MemoryStore | None = None) -> MemoryStore:
    """Single ordered pass over the training set through the write gate."""
    if len(samples) == 0:
        return memory if memory is not None else MemoryStore()
    pis, phis = _codes(samples, model)
    memory = memory if memory is not None else MemoryStore(pis.shape[1], phis.shape[1])
    for i, sample in enumerate(samples):
        online_ingest(sample, memory, model, controller, th_horizon, pi=pis[i], phi=phis[i])
    share = 100.0 * len(memory) / len(samples)
    logger.info(f"Filled memory with {len(memory)} of {len(samples)} samples ({share:.1f}%)")
    return memory
