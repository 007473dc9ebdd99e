from __future__ import annotations

import math
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils import hash_text

ALLOWED_PRESETS = {"desk", "kitti-like"}
ALLOWED_OPTIMIZERS = {"adam", "sgd"}
PATH_KEYS = ("data_dir", "out_dir")
# evaluation and reporting settings; not part of the config hash
RUNTIME_KEYS = ("k_list", "log_every", "online_batch", "online_runs", "online_k", "no_refine", "no_decoder", "no_encdec")
ABLATION_FLAGS = ("no_refine", "no_decoder", "no_rotation_invariance", "no_controller", "no_encdec")


class ConfigError(ValueError):
    """Invalid configuration text or values."""
    pass


def _split_list(v):
    if v is None:
        return []
    if isinstance(v, str):
        return [p.strip() for p in v.split(",") if p.strip()]
    if isinstance(v, (list, tuple)):
        return list(v)
    return [v]


class SyntheticConfig(BaseModel):
    """Scenario mix and kinematics for the synthetic vehicle dataset."""

    model_config = ConfigDict(extra="forbid")

    sample_period: float = Field(default=0.5, gt=0)
    past_len: int = Field(default=4, ge=2)
    future_len: int = Field(default=8, ge=1)
    extra_points: int = Field(default=0, ge=0)
    n_straight: int = Field(default=40, ge=0)
    n_arc: int = Field(default=40, ge=0)
    n_junction: int = Field(default=40, ge=0)
    speed_min: float = 5.0
    speed_max: float = 15.0
    noise_sigma: float = Field(default=0.05, ge=0)
    arc_radius_min: float = Field(default=20.0, gt=0)
    arc_radius_max: float = Field(default=60.0, gt=0)
    turn_radius: float = Field(default=12.0, gt=0)
    junction_branches: int = Field(default=2, ge=2, le=3)
    tracks_per_junction: int = Field(default=2, ge=1)
    branch_probability: Optional[float] = Field(default=None, ge=0, le=1)
    map_resolution: float = Field(default=0.5, gt=0)
    road_half_width: float = Field(default=4.0, gt=0)
    map_margin: float = Field(default=10.0, ge=0)

    @field_validator("speed_min", "speed_max")
    @classmethod
    def non_negative_speed(cls, v):
        if v < 0:
            raise ValueError(f"speeds must be non-negative, got {v}")
        return v

    @model_validator(mode="after")
    def check_scenarios(self):
        if self.n_straight + self.n_arc + self.n_junction <= 0:
            raise ValueError("at least one scenario (straight, arc or junction) is required")
        if self.speed_min > self.speed_max:
            raise ValueError(f"speed_min {self.speed_min} exceeds speed_max {self.speed_max}")
        if self.arc_radius_min > self.arc_radius_max:
            raise ValueError("arc_radius_min exceeds arc_radius_max")
        return self

    @property
    def track_len(self) -> int:
        return self.past_len + self.future_len + self.extra_points

    @classmethod
    def kitti_like(cls, **overrides) -> "SyntheticConfig":
        values = {"sample_period": 0.1, "past_len": 20, "future_len": 40}
        values.update(overrides)
        return cls(**values)


class RunConfig(BaseModel):
    """Every knob of a run; serializes to canonical key=value text."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    preset: str = "desk"
    sample_period: float = Field(default=0.5, gt=0)
    past_seconds: float = Field(default=2.0, gt=0)
    future_seconds: float = Field(default=4.0, gt=0)
    stride_steps: int = Field(default=1, ge=1)

    past_hidden: int = Field(default=48, gt=0)
    future_hidden: int = Field(default=48, gt=0)
    decoder_hidden: int = Field(default=96, gt=0)
    coordinate_scale: float = Field(default=10.0, gt=0)

    learning_rate: float = Field(default=1e-4, gt=0)
    batch_size: int = Field(default=32, gt=0)
    grad_clip: float = Field(default=1.0, gt=0)
    pretrain_epochs: int = Field(default=5000, gt=0)
    patience: int = Field(default=200, gt=0)
    validation_fraction: float = Field(default=0.1, ge=0, lt=1)
    controller_epochs: int = Field(default=10, gt=0)
    controller_learning_rate: Optional[float] = Field(default=None, gt=0)
    controller_optimizer: str = "adam"
    refine_epochs: int = Field(default=50, gt=0)
    refine_learning_rate: Optional[float] = Field(default=None, gt=0)
    log_every: int = Field(default=50, gt=0)

    k_list: List[int] = Field(default_factory=lambda: [1, 5, 10, 20])
    th_horizon: float = Field(default=2.0, gt=0)
    refine_iterations: int = Field(default=4, gt=0)
    refine_affine_bridge: bool = False

    kalman_sigma_q: float = Field(default=0.1, ge=0)
    kalman_sigma_r: float = Field(default=0.1, gt=0)
    mlp_hidden: int = Field(default=64, gt=0)
    mlp_epochs: int = Field(default=500, gt=0)
    mlp_learning_rate: float = Field(default=1e-3, gt=0)

    online_batch: int = Field(default=50, gt=0)
    online_runs: int = Field(default=20, gt=0)
    online_k: int = Field(default=5, gt=0)

    n_straight: int = Field(default=40, ge=0)
    n_arc: int = Field(default=40, ge=0)
    n_junction: int = Field(default=40, ge=0)
    speed_min: float = 5.0
    speed_max: float = 15.0
    noise_sigma: float = Field(default=0.05, ge=0)
    junction_branches: int = Field(default=2, ge=2, le=3)
    tracks_per_junction: int = Field(default=2, ge=1)
    branch_probability: Optional[float] = Field(default=None, ge=0, le=1)
    extra_points: int = Field(default=4, ge=0)
    test_fraction: float = Field(default=0.2, ge=0, lt=1)
    map_resolution: float = Field(default=0.5, gt=0)
    road_half_width: float = Field(default=4.0, gt=0)

    no_refine: bool = False
    no_decoder: bool = False
    no_rotation_invariance: bool = False
    no_controller: bool = False
    no_encdec: bool = False

    data_dir: str = "data"
    out_dir: str = "runs"

    @model_validator(mode="before")
    @classmethod
    def apply_preset(cls, values):
        if isinstance(values, dict) and values.get("preset") == "kitti-like":
            values = dict(values)
            values.setdefault("sample_period", 0.1)
        return values

    @field_validator("preset")
    @classmethod
    def validate_preset(cls, v):
        v = str(v).strip().lower()
        if v not in ALLOWED_PRESETS:
            raise ValueError(f"preset must be one of {sorted(ALLOWED_PRESETS)}, got '{v}'")
        return v

    @field_validator("controller_optimizer")
    @classmethod
    def validate_optimizer(cls, v):
        v = str(v).strip().lower()
        if v not in ALLOWED_OPTIMIZERS:
            raise ValueError(f"controller_optimizer must be one of {sorted(ALLOWED_OPTIMIZERS)}, got '{v}'")
        return v

    @field_validator("k_list", mode="before")
    @classmethod
    def split_k_list(cls, v):
        return [int(k) for k in _split_list(v)]

    @field_validator("k_list")
    @classmethod
    def positive_sorted_k(cls, v):
        if not v or any(k < 1 for k in v):
            raise ValueError(f"k_list needs positive entries, got {v}")
        return sorted(set(v))

    @model_validator(mode="after")
    def check_widths(self):
        if self.decoder_hidden != self.past_hidden + self.future_hidden:
            raise ValueError(
                f"decoder_hidden ({self.decoder_hidden}) must equal past_hidden + future_hidden "
                f"({self.past_hidden + self.future_hidden})"
            )
        for name, seconds in (("past_seconds", self.past_seconds), ("future_seconds", self.future_seconds)):
            steps = seconds / self.sample_period
            if abs(steps - round(steps)) > 1e-9:
                raise ValueError(f"{name}={seconds} is not a whole number of sample periods ({self.sample_period})")
        if self.past_len < 2:
            raise ValueError("the past needs at least 2 points to define a heading")
        return self

    # -----------------
    # Derived values
    # -----------------

    @property
    def past_len(self) -> int:
        return int(round(self.past_seconds / self.sample_period))

    @property
    def future_len(self) -> int:
        return int(round(self.future_seconds / self.sample_period))

    def horizon_steps(self) -> Dict[float, int]:
        """Future step index (1-based) for every whole second of the horizon."""
        out: Dict[float, int] = {}
        for second in range(1, int(math.floor(self.future_seconds + 1e-9)) + 1):
            out[float(second)] = int(round(second / self.sample_period))
        return out

    def canonical_text(self) -> str:
        """Sorted key=value lines, directory and evaluation-only keys excluded."""
        lines = []
        for key, value in sorted(self.model_dump(exclude=set(PATH_KEYS + RUNTIME_KEYS)).items()):
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif value is None:
                value = ""
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hash_text(self.canonical_text())

    def ablations(self) -> List[str]:
        return [flag for flag in ABLATION_FLAGS if getattr(self, flag)]

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            sample_period=self.sample_period,
            past_len=self.past_len,
            future_len=self.future_len,
            extra_points=self.extra_points,
            n_straight=self.n_straight,
            n_arc=self.n_arc,
            n_junction=self.n_junction,
            speed_min=self.speed_min,
            speed_max=self.speed_max,
            noise_sigma=self.noise_sigma,
            junction_branches=self.junction_branches,
            tracks_per_junction=self.tracks_per_junction,
            branch_probability=self.branch_probability,
            map_resolution=self.map_resolution,
            road_half_width=self.road_half_width,
        )


def build_config(values: Dict[str, object] | None = None) -> RunConfig:
    try:
        return RunConfig(**(values or {}))
    except ValidationError as e:
        details = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid configuration: {details}") from e


class TrajectoryRecord(BaseModel):
    """One `track_id,t,x,y` line of a dataset file."""

    track_id: str
    t: float
    x: float
    y: float

    @field_validator("track_id", mode="before")
    @classmethod
    def coerce_id_to_str(cls, v):
        v = str(v).strip() if v is not None else ""
        if not v:
            raise ValueError("track_id cannot be empty")
        return v

    @field_validator("t", "x", "y")
    @classmethod
    def finite(cls, v):
        if not math.isfinite(v):
            raise ValueError(f"value must be finite, got {v}")
        return v


def validate_rows(rows, model_cls):
    """Validate list[dict] rows with the given model class.
    Returns (valid_models, errors) where errors is list of (index, error_message).
    """
    valid = []
    errors = []
    for idx, row in enumerate(rows):
        try:
            obj = model_cls(**row)
            valid.append(obj)
        except ValidationError as e:
            errors.append((idx, e.errors()))
    return valid, errors
