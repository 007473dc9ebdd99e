from __future__ import annotations

import hashlib
import logging
import zlib
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np
import pandas as pd

# -----------------
# Logging utilities
# -----------------

def get_logger(name: str = "mantra") -> logging.Logger:
    logger = logging.getLogger(name)
    if not logger.handlers:
        logger.setLevel(logging.INFO)
        ch = logging.StreamHandler()
        fmt = logging.Formatter("[%(asctime)s] %(levelname)s - %(message)s")
        ch.setFormatter(fmt)
        logger.addHandler(ch)
    return logger

logger = get_logger()


def set_verbose(verbose: bool) -> None:
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)

# -----------------
# Randomness
# -----------------

def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named stream of a run seed.

    Every random draw in the package goes through here so a single config
    seed reproduces a whole run.
    """
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def named_seed(seed: int, name: str) -> int:
    return int(named_rng(seed, name).integers(0, 2**31 - 1))

# -----------------
# Hashing
# -----------------

def hash_text(text: str, length: int = 16) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def metadata_line(seed: int, config_hash: str, kind: str) -> str:
    return f"# mantra seed={seed} config={config_hash} kind={kind}"


def parse_metadata_line(line: str) -> Dict[str, str]:
    line = line.strip()
    if not line.startswith("# mantra"):
        return {}
    out: Dict[str, str] = {}
    for token in line[len("# mantra"):].split():
        if "=" in token:
            k, v = token.split("=", 1)
            out[k] = v
    return out

# -----------------
# Frame helpers
# -----------------

def points_to_columns(points: np.ndarray, prefix: str) -> Dict[str, float]:
    """Flatten an (N, 2) array into ``{prefix}x0, {prefix}y0, ...`` columns."""
    row: Dict[str, float] = {}
    for i, (x, y) in enumerate(np.asarray(points, dtype=np.float64)):
        row[f"{prefix}x{i}"] = float(x)
        row[f"{prefix}y{i}"] = float(y)
    return row


def vector_to_columns(vec: Iterable[float], prefix: str) -> Dict[str, float]:
    return {f"{prefix}{i}": float(v) for i, v in enumerate(vec)}

# -----------------
# Optional plotting
# -----------------

def plot_lines_svg(frame: pd.DataFrame, x: str, ys: Sequence[str], out_path: Path | str,
                   title: str = "", ylabel: str = "", band: Dict[str, str] | None = None) -> Path | None:
    """Write a line plot of ``ys`` against ``x`` as standalone SVG text.

    ``band`` maps a y column to a variance column drawn as a +-1 std band.
    Uses lazy imports so normal runs avoid importing matplotlib.
    """
    if frame.empty:
        logger.warning("Nothing to plot for %s", out_path)
        return None
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt  # type: ignore
    except ImportError as e:
        logger.warning(f"Plot dependencies missing: {e}. Install matplotlib.")
        return None

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    matplotlib.rcParams["svg.hashsalt"] = "mantra"
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in ys:
        ax.plot(frame[x], frame[col], label=col)
        if band and col in band:
            std = np.sqrt(frame[band[col]].to_numpy(dtype=np.float64))
            mean = frame[col].to_numpy(dtype=np.float64)
            ax.fill_between(frame[x], mean - std, mean + std, alpha=0.2)
    ax.set_title(title)
    ax.set_xlabel(x)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path


def plot_trajectories_svg(trajectories: List[np.ndarray], out_path: Path | str, title: str = "") -> Path | None:
    """Overlay (N, 2) trajectories in one SVG, e.g. decoded memory contents."""
    if not trajectories:
        logger.warning("No trajectories to plot for %s", out_path)
        return None
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt  # type: ignore
    except ImportError as e:
        logger.warning(f"Plot dependencies missing: {e}. Install matplotlib.")
        return None

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    matplotlib.rcParams["svg.hashsalt"] = "mantra"
    fig, ax = plt.subplots(figsize=(5, 5))
    for traj in trajectories:
        traj = np.asarray(traj)
        ax.plot(traj[:, 0], traj[:, 1], linewidth=0.8, alpha=0.6)
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path
