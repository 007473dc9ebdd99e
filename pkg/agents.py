from __future__ import annotations

from typing import List

import numpy as np
from mesa import Agent

from memory import online_ingest, read_top_k
from utils import logger


class StreamAgent(Agent):
    """Hands out the next batch of not-yet-observed test trajectories."""

    def __init__(self, model, batch_size: int):
        super().__init__("stream", model)
        self.batch_size = batch_size
        self.observed = 0

    def next_batch(self) -> List[int]:
        remaining = self.model.remaining
        batch, self.model.remaining = remaining[:self.batch_size], remaining[self.batch_size:]
        self.observed += len(batch)
        return batch

    def step(self):
        # Driven by the model's orchestrated step.
        pass


class ControllerAgent(Agent):
    """Runs the write gate over each observed sample."""

    def __init__(self, model, controller, th_horizon: float = 2.0):
        super().__init__("controller", model)
        self.controller = controller
        self.th_horizon = th_horizon
        self.written_total = 0

    def ingest(self, batch: List[int], write_epoch: int) -> int:
        m = self.model
        written = 0
        for i in batch:
            ok, _ = online_ingest(m.samples[i], m.memory, m.codec, self.controller, self.th_horizon,
                                  write_epoch=write_epoch, pi=m.pis[i], phi=m.phis[i])
            written += int(ok)
        self.written_total += written
        logger.debug(f"online iteration {write_epoch}: wrote {written} of {len(batch)}")
        return written

    def step(self):
        pass


class EvaluatorAgent(Agent):
    """Best-of-K displacement errors of the current memory on the remaining samples."""

    def __init__(self, model, k: int = 5):
        super().__init__("evaluator", model)
        self.k = k
        self.last_ade = float("nan")
        self.last_fde = float("nan")

    def evaluate(self, indices: List[int]) -> None:
        m = self.model
        if not indices or len(m.memory) == 0:
            self.last_ade = self.last_fde = float("nan")
            return
        pis, phis, owners = [], [], []
        for row, i in enumerate(indices):
            idx, _ = read_top_k(m.pis[i], m.memory, self.k)
            for j in idx:
                pis.append(m.pis[i])
                phis.append(m.memory[j].value)
                owners.append(row)
        futures = m.codec.decode(np.stack(pis), np.stack(phis))
        truths = np.stack([m.samples[indices[r]].future for r in owners])
        # rigid transforms preserve distances, so canonical-frame errors are world errors
        dist = np.linalg.norm(futures - truths, axis=2)
        owners = np.asarray(owners)
        ade = np.full(len(indices), np.inf)
        fde = np.full(len(indices), np.inf)
        np.minimum.at(ade, owners, dist.mean(axis=1))
        np.minimum.at(fde, owners, dist[:, -1])
        self.last_ade = float(ade.mean())
        self.last_fde = float(fde.mean())

    def step(self):
        pass
