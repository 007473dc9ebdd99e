from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import pandas as pd
from mesa import Model
from mesa.datacollection import DataCollector
from mesa.time import BaseScheduler

from agents import ControllerAgent, EvaluatorAgent, StreamAgent
from memory import Controller, MemoryStore, TrajectoryCodec
from trajectories import Sample
from utils import logger, named_seed


class OnlineLearningModel(Model):
    """One run of the incremental setting.

    The test set is shuffled with the model's seeded ``random``; every step
    removes a batch, offers it to the write gate and evaluates best-of-K on
    what is left.  Iteration 0 records the starting memory.
    """

    def __init__(self, codec: TrajectoryCodec, controller: Controller | None, memory0: MemoryStore,
                 samples: Sequence[Sample], batch_size: int = 50, k: int = 5, th_horizon: float = 2.0,
                 seed: int | None = None):
        super().__init__()
        if batch_size > len(samples):
            raise ValueError(f"online batch {batch_size} is larger than the test set ({len(samples)})")
        if batch_size < 1:
            raise ValueError(f"online batch must be positive, got {batch_size}")
        self.codec = codec
        self.samples = list(samples)
        self.memory = memory0.copy()
        self.batch_size = batch_size
        self.iteration = 0
        self.pis = codec.encode_past(np.stack([s.past for s in self.samples]))
        self.phis = codec.encode_future(np.stack([s.future for s in self.samples]))

        self.remaining: List[int] = list(range(len(self.samples)))
        self.random.shuffle(self.remaining)

        self.schedule = BaseScheduler(self)
        self.stream = StreamAgent(self, batch_size)
        self.gate = ControllerAgent(self, controller, th_horizon)
        self.evaluator = EvaluatorAgent(self, k)
        for agent in (self.stream, self.gate, self.evaluator):
            self.schedule.add(agent)

        self.last_written = 0
        self.datacollector = DataCollector(model_reporters={
            "iteration": lambda m: m.iteration,
            "samples_observed": lambda m: m.stream.observed,
            "memory_size": lambda m: len(m.memory),
            "written": lambda m: m.last_written,
            "error": lambda m: m.evaluator.last_ade,
            "fde": lambda m: m.evaluator.last_fde,
        })
        self.evaluator.evaluate(self.remaining)
        self.datacollector.collect(self)
        self.running = len(self.remaining) > batch_size

    def step(self):
        self.iteration += 1
        batch = self.stream.next_batch()
        self.last_written = self.gate.ingest(batch, self.iteration)
        self.evaluator.evaluate(self.remaining)
        self.datacollector.collect(self)
        self.schedule.step()
        self.running = len(self.remaining) > self.batch_size

    def run(self) -> pd.DataFrame:
        while self.running:
            self.step()
        return self.datacollector.get_model_vars_dataframe()


@dataclass
class OnlineCurve:
    curve: pd.DataFrame  # per iteration: mean and variance across runs
    runs: pd.DataFrame  # every run's raw rows
    write_fraction: float

    @property
    def initial_error(self) -> float:
        return float(self.curve["error_mean"].iloc[0])

    @property
    def final_error(self) -> float:
        return float(self.curve["error_mean"].iloc[-1])


def aggregate_curve(frames: List[pd.DataFrame]) -> OnlineCurve:
    if not frames:
        raise ValueError("aggregate_curve needs at least one run")
    runs = pd.concat(frames, ignore_index=True)
    grouped = runs.groupby("iteration", sort=True)
    curve = pd.DataFrame({
        "samples_observed": grouped["samples_observed"].mean(),
        "memory_size_mean": grouped["memory_size"].mean(),
        "memory_size_var": grouped["memory_size"].var(ddof=0),
        "error_mean": grouped["error"].mean(),
        "error_var": grouped["error"].var(ddof=0),
        "fde_mean": grouped["fde"].mean(),
        "fde_var": grouped["fde"].var(ddof=0),
    }).reset_index()
    observed = runs.groupby("run")["samples_observed"].max().sum()
    written = runs.groupby("run")["written"].sum().sum()
    fraction = float(written / observed) if observed else 0.0
    return OnlineCurve(curve=curve, runs=runs, write_fraction=fraction)


def online_experiment(codec: TrajectoryCodec, controller: Controller | None, memory0: MemoryStore,
                      test_set: Sequence[Sample], batch: int = 50, runs: int = 20, k: int = 5,
                      th_horizon: float = 2.0, seed: int = 0) -> OnlineCurve:
    if batch > len(test_set):
        raise ValueError(f"online batch {batch} is larger than the test set ({len(test_set)})")
    frames = []
    for run in range(runs):
        sim = OnlineLearningModel(codec, controller, memory0, test_set, batch_size=batch, k=k,
                                  th_horizon=th_horizon, seed=named_seed(seed, f"online-{run}"))
        frame = sim.run()
        frame["run"] = run
        frames.append(frame)
        logger.info(f"online run {run}: memory {len(memory0)} -> {len(sim.memory)} "
                    f"({sim.gate.written_total} written), "
                    f"error {frame['error'].iloc[0]:.3f} -> {frame['error'].iloc[-1]:.3f}")
    return aggregate_curve(frames)
