"""
Report generation for evaluation runs.

Writes:
- evaluation summaries and per-sample errors as CSV
- online-learning curves as CSV plus optional SVG line plots
- memory inspection dumps (embeddings and decoded futures) with an optional SVG overlay
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from evaluation import EvalReport
from memory import MemoryStore, TrajectoryCodec
from model import OnlineCurve
from persistence import save_report
from utils import logger, plot_lines_svg, plot_trajectories_svg, points_to_columns, vector_to_columns


class ReportGenerator:
    """Write CSV and SVG artifacts stamped with one run's seed and config hash."""

    def __init__(self, seed: int, config_hash: str):
        self.seed = seed
        self.config_hash = config_hash

    def write_eval_report(self, report: EvalReport, out_path: Path | str) -> Dict[str, Path]:
        """Write the summary to ``out_path`` and per-sample rows beside it.

        Returns:
            Mapping of artifact kind to written path
        """
        out_path = Path(out_path)
        summary = report.summary.copy()
        summary["memory_size"] = report.memory_size
        samples_path = out_path.with_name(out_path.stem + "_samples.csv")
        written = {
            "report": save_report(summary, out_path, self.seed, self.config_hash, "report"),
            "samples": save_report(report.per_sample, samples_path, self.seed, self.config_hash, "samples"),
        }
        return written

    def write_online_curve(self, curve: OnlineCurve, out_path: Path | str, svg: bool = False) -> Dict[str, Path]:
        out_path = Path(out_path)
        written = {"curve": save_report(curve.curve, out_path, self.seed, self.config_hash, "online")}
        runs_path = out_path.with_name(out_path.stem + "_runs.csv")
        written["runs"] = save_report(curve.runs, runs_path, self.seed, self.config_hash, "online-runs")
        if svg:
            growth = plot_lines_svg(curve.curve, "samples_observed", ["memory_size_mean"],
                                    out_path.with_name(out_path.stem + "_memory.svg"),
                                    title="Memory growth", ylabel="entries",
                                    band={"memory_size_mean": "memory_size_var"})
            error = plot_lines_svg(curve.curve, "samples_observed", ["error_mean"],
                                   out_path.with_name(out_path.stem + "_error.svg"),
                                   title="Best-of-K error", ylabel="ADE (m)",
                                   band={"error_mean": "error_var"})
            for kind, path in (("memory_svg", growth), ("error_svg", error)):
                if path is not None:
                    written[kind] = path
        return written

    def memory_inspection_frame(self, memory: MemoryStore, codec: TrajectoryCodec) -> pd.DataFrame:
        """One row per entry: provenance, raw key/value codes and the decoded future."""
        if len(memory) == 0:
            return pd.DataFrame(columns=["index", "source_id", "write_epoch"])
        decoded = codec.decode(memory.key_matrix(), memory.value_matrix())
        rows: List[Dict[str, object]] = []
        for i, entry in enumerate(memory):
            row: Dict[str, object] = {"index": i, "source_id": entry.source_id, "write_epoch": entry.write_epoch}
            row.update(vector_to_columns(entry.key, "key_"))
            row.update(vector_to_columns(entry.value, "value_"))
            row.update(points_to_columns(decoded[i], "decoded_"))
            rows.append(row)
        return pd.DataFrame(rows)

    def write_memory_inspection(self, memory: MemoryStore, codec: TrajectoryCodec, out_path: Path | str,
                                svg_path: Optional[Path | str] = None) -> Dict[str, Path]:
        frame = self.memory_inspection_frame(memory, codec)
        written = {"inspection": save_report(frame, out_path, self.seed, self.config_hash, "memory-inspection")}
        if svg_path is not None and len(memory):
            decoded = codec.decode(memory.key_matrix(), memory.value_matrix())
            plotted = plot_trajectories_svg(list(decoded), svg_path, title=f"Decoded memory ({len(memory)} entries)")
            if plotted is not None:
                written["svg"] = plotted
        logger.info(f"Memory inspection: {len(memory)} entries")
        return written

    def write_ablations(self, frame: pd.DataFrame, out_path: Path | str) -> Path:
        return save_report(frame, out_path, self.seed, self.config_hash, "ablations")
