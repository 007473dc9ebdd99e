"""
Stage functions and the end-to-end pipeline.

Order: gen-data, pretrain, train-controller, fill-memory, train-refine,
evaluate.  Each stage writes its artifact as soon as it finishes so a
failure later on leaves the earlier artifacts in place.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import pandas as pd

from data_models import ABLATION_FLAGS, RunConfig
from encdec import EncDecModel, pretrain_autoencoder
from evaluation import EvalReport, KalmanBaseline, LinearBaseline, MLPBaseline, evaluate
from memory import Controller, CoordinateBank, MemoryStore, fill_memory, train_controller
from persistence import (Checkpoint, load_checkpoint, load_dataset, load_module_state,
                         save_dataset, save_memory, save_modules)
from refinement import RefinementModel, train_refinement
from report_generator import ReportGenerator
from trajectories import Sample, SemanticMap, Trajectory, build_samples, generate_synthetic_dataset
from utils import logger, named_rng, named_seed

STAGES = ("gen-data", "pretrain", "train-controller", "fill-memory", "train-refine", "evaluate")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str) -> Iterator[None]:
    logger.info(f"--- {name} ---")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"stage '{name}' failed: {e}")
        raise StageError(name, e) from e


def metadata(config: RunConfig, kind: str) -> Dict[str, object]:
    return {"seed": config.seed, "config": config.config_hash(), "kind": kind}

# -----------------
# Data
# -----------------

@dataclass
class DatasetSplit:
    train: List[Trajectory]
    test: List[Trajectory]
    maps: Dict[str, SemanticMap]


def generate_data(config: RunConfig) -> DatasetSplit:
    dataset = generate_synthetic_dataset(config.synthetic(), named_seed(config.seed, "data"))
    train, test = dataset.split(config.test_fraction, named_rng(config.seed, "split"))
    return DatasetSplit(train=train, test=test, maps=dataset.maps)


def gen_data(config: RunConfig, out_dir: Path | str) -> DatasetSplit:
    split = generate_data(config)
    save_dataset(out_dir, split.train, split.test, split.maps, config.seed, config.config_hash())
    return split


def read_data(config: RunConfig, data_dir: Path | str) -> DatasetSplit:
    loaded = load_dataset(data_dir, expected_hash=config.config_hash(), sample_period=config.sample_period)
    return DatasetSplit(train=loaded.train, test=loaded.test, maps=loaded.maps)


def make_samples(config: RunConfig, trajectories: List[Trajectory], stream: str) -> List[Sample]:
    """Sliding-window samples; random rotations replace canonical alignment when that ablation is on."""
    rng = named_rng(config.seed, f"rotation-{stream}") if config.no_rotation_invariance else None
    return build_samples(trajectories, config.past_seconds, config.future_seconds, config.stride_steps, rng)

# -----------------
# Training stages
# -----------------

def pretrain(config: RunConfig, samples: List[Sample]) -> EncDecModel:
    model = EncDecModel.from_config(config, named_rng(config.seed, "init"))
    result = pretrain_autoencoder(
        samples, model, config.pretrain_epochs,
        learning_rate=config.learning_rate, batch_size=config.batch_size, patience=config.patience,
        validation_fraction=config.validation_fraction, grad_clip=config.grad_clip,
        rng=named_rng(config.seed, "shuffle"), log_every=config.log_every,
    )
    logger.info(f"pretrain: best epoch {result.best_epoch}, best mse {result.best_loss:.6f}")
    return result.model


def fit_controller(config: RunConfig, samples: List[Sample], model: EncDecModel) -> Controller:
    result = train_controller(
        samples, model, config.controller_epochs,
        learning_rate=config.controller_learning_rate or config.learning_rate,
        optimizer=config.controller_optimizer,
        th_horizon=config.th_horizon, rng=named_rng(config.seed, "shuffle-controller"),
    )
    return result.controller


def build_memory(config: RunConfig, samples: List[Sample], model: EncDecModel,
                 controller: Controller | None) -> MemoryStore:
    return fill_memory(samples, model, None if config.no_controller else controller, config.th_horizon)


def fit_refinement(config: RunConfig, samples: List[Sample], maps: Dict[str, SemanticMap],
                   model: EncDecModel, memory: MemoryStore) -> RefinementModel:
    refiner = RefinementModel(in_channels=2, hidden_width=config.past_hidden, iterations=config.refine_iterations,
                              affine_bridge=config.refine_affine_bridge, rng=named_rng(config.seed, "init-refine"))
    result = train_refinement(
        samples, maps, model, refiner, memory, config.refine_epochs,
        learning_rate=config.refine_learning_rate or config.learning_rate, grad_clip=config.grad_clip,
        rng=named_rng(config.seed, "shuffle-refine"), log_every=config.log_every,
    )
    return result.model


def baselines(config: RunConfig, train_samples: List[Sample]) -> List[object]:
    linear = LinearBaseline().fit(train_samples)
    mlp = MLPBaseline(config.past_len, config.future_len, config.mlp_hidden, config.coordinate_scale,
                      rng=named_rng(config.seed, "init-mlp"))
    mlp.fit(train_samples, config.mlp_epochs, config.mlp_learning_rate, config.batch_size,
            rng=named_rng(config.seed, "shuffle-mlp"))
    return [KalmanBaseline(config.kalman_sigma_q, config.kalman_sigma_r), linear, mlp]


def run_evaluation(config: RunConfig, model: EncDecModel | None, memory: MemoryStore,
                   refiner: RefinementModel | None, test_samples: List[Sample], train_samples: List[Sample],
                   maps: Dict[str, SemanticMap], with_baselines: bool = True) -> EvalReport:
    mode, bank, size = "decode", None, None
    if config.no_encdec:
        mode, bank = "nearest", CoordinateBank.from_samples(train_samples)
        size = len(bank)
        refiner = None
    elif config.no_decoder:
        mode, refiner = "copy", None
    if config.no_refine:
        refiner = None
    return evaluate(
        model, memory, refiner, test_samples, config.k_list, config.horizon_steps(),
        maps=maps, mode=mode, bank=bank,
        baselines=baselines(config, train_samples) if with_baselines else None,
        metadata={"seed": str(config.seed), "config": config.config_hash(),
                  "ablations": ",".join(config.ablations()) or "none"},
        memory_size=size,
    )

# -----------------
# Pipeline
# -----------------

@dataclass
class PipelineResult:
    report: EvalReport
    artifacts: Dict[str, Path] = field(default_factory=dict)
    model: Optional[EncDecModel] = None
    controller: Optional[Controller] = None
    memory: Optional[MemoryStore] = None
    refiner: Optional[RefinementModel] = None
    train_samples: int = 0


def pipeline_run(config: RunConfig, out_dir: Path | str | None = None, *, with_baselines: bool = True,
                 split: DatasetSplit | None = None, cache: Dict[Tuple, object] | None = None) -> PipelineResult:
    """Run every stage in order and write all artifacts under ``out_dir``.

    ``cache`` lets callers running several variants share trained encoders
    and controllers; entries are keyed by the settings they depend on.
    """
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = cache if cache is not None else {}
    reports = ReportGenerator(config.seed, config.config_hash())
    artifacts: Dict[str, Path] = {}
    model = controller = refiner = None
    memory = MemoryStore(config.past_hidden, config.future_hidden)

    with stage("gen-data"):
        if split is None:
            split = gen_data(config, out / "data")
            artifacts["data"] = out / "data"
        train_samples = make_samples(config, split.train, "train")
        test_samples = make_samples(config, split.test, "test")
        if not train_samples or not test_samples:
            raise ValueError(f"dataset yields {len(train_samples)} train and {len(test_samples)} test samples")

    if not config.no_encdec:
        key = ("encdec", config.no_rotation_invariance)
        with stage("pretrain"):
            model = EncDecModel.from_config(config, named_rng(config.seed, "init"))
            if key in cache:
                model.load_state_dict(cache[key])
            else:
                model = pretrain(config, train_samples)
                cache[key] = model.state_dict()
            artifacts["encdec"] = save_modules(out / "encdec.ckpt", {"encdec": model}, metadata(config, "encdec"))

        key = ("controller", config.no_rotation_invariance)
        with stage("train-controller"):
            controller = Controller()
            if key in cache:
                controller.load_state_dict(cache[key])
            else:
                controller = fit_controller(config, train_samples, model)
                cache[key] = controller.state_dict()
            artifacts["controller"] = save_modules(out / "controller.ckpt", {"controller": controller},
                                                   metadata(config, "controller"))

        with stage("fill-memory"):
            memory = build_memory(config, train_samples, model, controller)
            artifacts["memory"] = save_memory(out / "memory.mem", memory, metadata(config, "memory"))

        if not (config.no_refine or config.no_decoder):
            with stage("train-refine"):
                refiner = fit_refinement(config, train_samples, split.maps, model, memory)
                artifacts["refine"] = save_modules(out / "refine.ckpt", {"encdec": model, "refine": refiner},
                                                   metadata(config, "refine"))

    with stage("evaluate"):
        report = run_evaluation(config, model, memory, refiner, test_samples, train_samples, split.maps,
                                with_baselines)
        artifacts.update(reports.write_eval_report(report, out / "report.csv"))

    return PipelineResult(report=report, artifacts=artifacts, model=model, controller=controller,
                          memory=memory, refiner=refiner, train_samples=len(train_samples))


def run_ablations(config: RunConfig, out_dir: Path | str | None = None, k: int = 5) -> pd.DataFrame:
    """Full model plus one row per ablation flag: FDE per horizon at K and memory size."""
    out = Path(out_dir if out_dir is not None else config.out_dir)
    base = config.model_copy(update={flag: False for flag in ABLATION_FLAGS})
    with stage("gen-data"):
        split = gen_data(base, out / "data")
    cache: Dict[Tuple, object] = {}
    k = min(k, max(base.k_list))
    k_list = sorted(set(base.k_list) | {k})

    rows = []
    for variant in ("full",) + ABLATION_FLAGS:
        updates = {"k_list": k_list}
        if variant != "full":
            updates[variant] = True
        variant_config = base.model_copy(update=updates)
        result = pipeline_run(variant_config, out / variant, with_baselines=False, split=split, cache=cache)
        row: Dict[str, object] = {"variant": variant, "memory_size": result.report.memory_size,
                                  "memory_pct": 100.0 * result.report.memory_size / max(result.train_samples, 1)}
        for seconds in variant_config.horizon_steps():
            row[f"fde_{seconds:g}s"] = result.report.value("memory", k, seconds, "fde")
            row[f"ade_{seconds:g}s"] = result.report.value("memory", k, seconds, "ade")
        rows.append(row)
        logger.info(f"ablation {variant}: memory={row['memory_size']} ({row['memory_pct']:.1f}%)")

    frame = pd.DataFrame(rows)
    ReportGenerator(base.seed, base.config_hash()).write_ablations(frame, out / "ablations.csv")
    return frame

# -----------------
# Artifact loading for single-stage commands
# -----------------

def load_encdec(config: RunConfig, path: Path | str) -> EncDecModel:
    ckpt = load_checkpoint(path, expected_hash=config.config_hash())
    model = EncDecModel.from_config(config, named_rng(config.seed, "init"))
    return load_module_state(ckpt, "encdec", model)


def load_controller(config: RunConfig, path: Path | str) -> Controller:
    ckpt = load_checkpoint(path, expected_hash=config.config_hash())
    return load_module_state(ckpt, "controller", Controller())


def load_refiner(config: RunConfig, ckpt: Checkpoint) -> RefinementModel:
    refiner = RefinementModel(hidden_width=config.past_hidden, iterations=config.refine_iterations,
                              affine_bridge=config.refine_affine_bridge)
    load_module_state(ckpt, "refine", refiner)
    return refiner.eval()
