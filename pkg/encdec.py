"""
Past encoder, future encoder and the conditioned decoder, plus their joint
autoencoder pretraining.

The decoder's hidden state starts at [pi; phi] and is unrolled with a zero
input; a per-step affine head emits absolute canonical coordinates.
Coordinates are divided by ``coordinate_scale`` on the way in and
multiplied back on the way out, so every loss here is in meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from autodiff import ShapeError, Tensor, concat, no_grad, stack
from data_models import RunConfig
from layers import Adam, Dense, GRUCell, Module, check_finite_loss, mse_loss
from trajectories import Sample
from utils import logger


class EncDecModel(Module):
    def __init__(self, past_len: int, future_len: int, past_hidden: int = 48, future_hidden: int = 48,
                 decoder_hidden: int | None = None, coordinate_scale: float = 10.0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        decoder_hidden = past_hidden + future_hidden if decoder_hidden is None else decoder_hidden
        if decoder_hidden != past_hidden + future_hidden:
            raise ShapeError(
                f"decoder hidden width {decoder_hidden} must equal {past_hidden} + {future_hidden}"
            )
        self.past_len = past_len
        self.future_len = future_len
        self.coordinate_scale = float(coordinate_scale)
        self.past_encoder = GRUCell(2, past_hidden, rng)
        self.future_encoder = GRUCell(2, future_hidden, rng)
        self.decoder = GRUCell(2, decoder_hidden, rng)
        self.head = Dense(decoder_hidden, 2, rng)

    @classmethod
    def from_config(cls, config: RunConfig, rng: np.random.Generator) -> "EncDecModel":
        return cls(config.past_len, config.future_len, config.past_hidden, config.future_hidden,
                   config.decoder_hidden, config.coordinate_scale, rng)

    @property
    def past_width(self) -> int:
        return self.past_encoder.hidden_width

    @property
    def future_width(self) -> int:
        return self.future_encoder.hidden_width

    # -----------------
    # Graph-building forward passes (batched)
    # -----------------

    def _encode(self, cell: GRUCell, points: np.ndarray) -> Tensor:
        batch, steps, _ = points.shape
        h = Tensor(np.zeros((batch, cell.hidden_width)))
        scaled = points / self.coordinate_scale
        for t in range(steps):
            h = cell(Tensor(scaled[:, t, :]), h)
        return h

    def past_code(self, pasts: np.ndarray) -> Tensor:
        return self._encode(self.past_encoder, self._check_points(pasts, self.past_len, "past"))

    def future_code(self, futures: np.ndarray) -> Tensor:
        return self._encode(self.future_encoder, self._check_points(futures, self.future_len, "future"))

    def decode_graph(self, pi: Tensor, phi: Tensor) -> Tensor:
        """(B, 48) x (B, 48) -> (B, F, 2) coordinates in meters."""
        if pi.shape[-1] != self.past_width or phi.shape[-1] != self.future_width:
            raise ShapeError(
                f"decode expects widths {self.past_width} + {self.future_width}, got {pi.shape} and {phi.shape}"
            )
        h = concat([pi, phi], axis=1)
        zero_input = Tensor(np.zeros((h.shape[0], 2)))
        outputs: List[Tensor] = []
        for _ in range(self.future_len):
            h = self.decoder(zero_input, h)
            outputs.append(self.head(h) * self.coordinate_scale)
        return stack(outputs, axis=1)

    @staticmethod
    def _check_points(points, expected: int, label: str) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 2:
            points = points[None]
        if points.ndim != 3 or points.shape[2] != 2:
            raise ShapeError(f"{label} must be (steps, 2) or (batch, steps, 2), got {points.shape}")
        if points.shape[1] != expected:
            raise ShapeError(f"{label} has {points.shape[1]} points, expected {expected}")
        return points

    # -----------------
    # Frozen inference on numpy arrays
    # -----------------

    def encode_past(self, past) -> np.ndarray:
        single = np.ndim(past) == 2
        with no_grad():
            code = self.past_code(past).data
        return code[0] if single else code

    def encode_future(self, future) -> np.ndarray:
        single = np.ndim(future) == 2
        with no_grad():
            code = self.future_code(future).data
        return code[0] if single else code

    def decode(self, pi, phi) -> np.ndarray:
        pi = np.asarray(pi, dtype=np.float64)
        phi = np.asarray(phi, dtype=np.float64)
        if not (np.all(np.isfinite(pi)) and np.all(np.isfinite(phi))):
            raise ValueError("decode received non-finite encodings")
        single = pi.ndim == 1
        pi2 = np.atleast_2d(pi)
        phi2 = np.atleast_2d(phi)
        if pi2.shape[0] != phi2.shape[0]:
            raise ShapeError(f"decode got {pi2.shape[0]} past codes but {phi2.shape[0]} future codes")
        with no_grad():
            out = self.decode_graph(Tensor(pi2), Tensor(phi2)).data
        return out[0] if single else out

    def reconstruct(self, samples: Sequence[Sample]) -> np.ndarray:
        pasts = np.stack([s.past for s in samples])
        futures = np.stack([s.future for s in samples])
        return self.decode(self.encode_past(pasts), self.encode_future(futures))

# -----------------
# Pretraining
# -----------------

@dataclass
class PretrainResult:
    model: EncDecModel
    best_epoch: int
    best_loss: float
    history: pd.DataFrame = field(default_factory=pd.DataFrame)
    stopped_early: bool = False


def _batch_mse(model: EncDecModel, pasts: np.ndarray, futures: np.ndarray) -> Tensor:
    pred = model.decode_graph(model.past_code(pasts), model.future_code(futures))
    return mse_loss(pred, futures)


def pretrain_autoencoder(samples: Sequence[Sample], model: EncDecModel, epochs: int = 5000, *,
                         learning_rate: float = 1e-4, batch_size: int = 32, patience: int = 200,
                         validation_fraction: float = 0.1, grad_clip: float = 1.0,
                         rng: np.random.Generator | None = None, log_every: int = 50) -> PretrainResult:
    """Train encoders and decoder jointly to reconstruct the future only.

    Early stopping watches the validation MSE (the training MSE when the set
    is too small to hold one out) and the best state is restored.
    """
    if len(samples) == 0:
        raise ValueError("pretrain_autoencoder needs at least one sample")
    rng = rng if rng is not None else np.random.default_rng(0)
    pasts = np.stack([s.past for s in samples])
    futures = np.stack([s.future for s in samples])

    order = rng.permutation(len(samples))
    n_val = int(round(validation_fraction * len(samples))) if len(samples) >= 10 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]

    optimizer = Adam(model.named_parameters(), learning_rate=learning_rate, clip_norm=grad_clip)
    model.train()
    best_loss, best_epoch, best_state = float("inf"), 0, model.state_dict()
    last_finite: float | None = None
    history: List[Dict[str, float]] = []
    stopped_early = False

    for epoch in range(1, epochs + 1):
        perm = train_idx[rng.permutation(len(train_idx))]
        total = 0.0
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            optimizer.zero_grad()
            loss = _batch_mse(model, pasts[idx], futures[idx])
            check_finite_loss(loss.item(), "pretrain", epoch, last_finite)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            logger.debug(f"pretrain epoch {epoch} batch {start // batch_size}: mse={loss.item():.6f}")
        train_mse = total / len(perm)
        last_finite = train_mse

        if n_val:
            with no_grad():
                val_mse = _batch_mse(model, pasts[val_idx], futures[val_idx]).item()
            check_finite_loss(val_mse, "pretrain validation", epoch, last_finite)
        else:
            val_mse = train_mse
        history.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse})

        if val_mse < best_loss:
            best_loss, best_epoch, best_state = val_mse, epoch, model.state_dict()
        if epoch % log_every == 0 or epoch == 1:
            logger.info(f"pretrain epoch {epoch}: train_mse={train_mse:.6f} val_mse={val_mse:.6f}")
        if epoch - best_epoch >= patience:
            stopped_early = True
            logger.info(f"pretrain stopped early at epoch {epoch} (best epoch {best_epoch})")
            break

    model.load_state_dict(best_state)
    model.eval()
    return PretrainResult(model=model, best_epoch=best_epoch, best_loss=best_loss,
                          history=pd.DataFrame(history), stopped_early=stopped_early)


def zeroed_embedding_errors(model: EncDecModel, samples: Sequence[Sample]) -> Dict[str, float]:
    """Mean displacement error of reconstructions with either code zeroed."""
    if not samples:
        raise ValueError("zeroed_embedding_errors needs at least one sample")
    pasts = np.stack([s.past for s in samples])
    futures = np.stack([s.future for s in samples])
    pi = model.encode_past(pasts)
    phi = model.encode_future(futures)

    def mean_error(p, f) -> float:
        pred = model.decode(p, f)
        return float(np.linalg.norm(pred - futures, axis=2).mean())

    return {
        "true": mean_error(pi, phi),
        "zero_past": mean_error(np.zeros_like(pi), phi),
        "zero_future": mean_error(pi, np.zeros_like(phi)),
    }
