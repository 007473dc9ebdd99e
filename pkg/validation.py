"""
Input validation for configuration text and dataset files.

Provides:
- flat key=value config parsing into a RunConfig
- dataset frame checks (columns, finiteness, per-track time order)
- small value validators used by the CLI
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from data_models import ConfigError, RunConfig, build_config


# ===========================
# Config parsing
# ===========================

def parse_config_text(text: str) -> Dict[str, Optional[str]]:
    """
    Parse flat ``key=value`` text.

    Blank lines and ``#`` comments are ignored; an empty value means "unset".

    Args:
        text: Config file contents

    Returns:
        Mapping of keys to raw string values (None for empty values)
    """
    values: Dict[str, Optional[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value if value != "" else None
    return values


def _drop_unset(values: Dict[str, Any]) -> Dict[str, Any]:
    # an empty value falls back to the field default
    return {k: v for k, v in values.items() if v is not None}


def load_config(path: Path | str | None = None, overrides: Dict[str, Any] | None = None) -> RunConfig:
    """Read a config file (optional) and apply CLI overrides on top."""
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        values.update(parse_config_text(path.read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return build_config(_drop_unset(values))


# ===========================
# Dataset validation
# ===========================

def validate_dataset_frame(df: pd.DataFrame) -> tuple[bool, List[str]]:
    """
    Validate a ``track_id,t,x,y`` frame.

    Args:
        df: DataFrame read from a split file

    Returns:
        Tuple of (is_valid, error_messages)
    """
    errors = []

    required_cols = ["track_id", "t", "x", "y"]
    missing_cols = [col for col in required_cols if col not in df.columns]
    if missing_cols:
        errors.append(f"Missing required columns: {', '.join(missing_cols)}")
        return False, errors

    for col in ("t", "x", "y"):
        numeric = pd.to_numeric(df[col], errors="coerce")
        bad = df.index[numeric.isna() | ~np.isfinite(numeric.fillna(0.0))].tolist()
        if bad:
            errors.append(f"Column {col}: non-numeric or non-finite values in rows {[i + 2 for i in bad[:10]]}")
    if errors:
        return False, errors

    if df.duplicated(subset=["track_id", "t"]).any():
        dupes = df[df.duplicated(subset=["track_id", "t"])]["track_id"].unique().tolist()
        errors.append(f"Duplicate timestamps in tracks: {dupes[:10]}")

    for track_id, group in df.groupby("track_id", sort=False):
        if (np.diff(group["t"].to_numpy(dtype=np.float64)) <= 0).any():
            errors.append(f"Track {track_id}: timestamps are not strictly increasing")

    return len(errors) == 0, errors


# ===========================
# Value validators
# ===========================

def validate_k_list(value: Any) -> tuple[bool, Optional[List[int]]]:
    """
    Parse ``1,5,10,20`` into a sorted list of distinct positive integers.

    Returns:
        Tuple of (is_valid, parsed_list)
    """
    try:
        parts = value.split(",") if isinstance(value, str) else list(value)
        ks = sorted({int(str(p).strip()) for p in parts if str(p).strip()})
    except (ValueError, TypeError):
        return False, None
    if not ks or ks[0] < 1:
        return False, None
    return True, ks


def validate_positive_int(value: Any) -> tuple[bool, Optional[int]]:
    try:
        int_val = int(value)
    except (ValueError, TypeError):
        return False, None
    if int_val < 1:
        return False, None
    return True, int_val
