"""
Tests for report generation functionality.
"""
import numpy as np
import pandas as pd
import pytest

from evaluation import evaluate
from memory import MemoryStore, fill_memory
from model import online_experiment
from persistence import load_report
from report_generator import ReportGenerator


@pytest.fixture
def generator():
    """Create a ReportGenerator stamped with a fixed seed and hash."""
    return ReportGenerator(seed=3, config_hash="feedbeef")


@pytest.fixture
def samples(make_straight):
    return [make_straight(1.0 + 0.5 * i, f"s{i}") for i in range(6)]


def test_eval_report_writes_summary_and_samples(generator, lookup_codec, samples, tmp_path):
    report = evaluate(lookup_codec, fill_memory(samples[:3], lookup_codec, None), None, samples[3:], [1, 2],
                      {4.0: 8})
    written = generator.write_eval_report(report, tmp_path / "report.csv")
    assert set(written) == {"report", "samples"}
    summary, metadata = load_report(written["report"], expected_hash="feedbeef")
    assert metadata["kind"] == "report" and metadata["seed"] == "3"
    assert (summary["memory_size"] == 3).all()
    per_sample, _ = load_report(tmp_path / "report_samples.csv")
    assert len(per_sample) == 3 * 2


def test_online_curve_written_with_runs(generator, lookup_codec, samples, tmp_path):
    memory0 = fill_memory(samples[:1], lookup_codec, None)
    curve = online_experiment(lookup_codec, None, memory0, samples[1:], batch=2, runs=2, k=1)
    written = generator.write_online_curve(curve, tmp_path / "curve.csv")
    frame, _ = load_report(written["curve"])
    assert list(frame["samples_observed"]) == [0.0, 2.0, 4.0]
    runs, _ = load_report(written["runs"])
    assert set(runs["run"]) == {0, 1}


def test_online_curve_svg(generator, lookup_codec, samples, tmp_path):
    pytest.importorskip("matplotlib")
    memory0 = fill_memory(samples[:1], lookup_codec, None)
    curve = online_experiment(lookup_codec, None, memory0, samples[1:], batch=2, runs=1, k=1)
    written = generator.write_online_curve(curve, tmp_path / "curve.csv", svg=True)
    assert written["memory_svg"].read_text(encoding="utf-8").lstrip().startswith("<?xml")
    assert written["error_svg"].exists()


def test_memory_inspection_frame_columns(generator, lookup_codec, samples):
    frame = generator.memory_inspection_frame(fill_memory(samples[:2], lookup_codec, None), lookup_codec)
    assert frame["source_id"].tolist() == ["s0", "s1"]
    assert {"key_0", "value_47", "decoded_x7", "decoded_y7"} <= set(frame.columns)
    np.testing.assert_allclose(frame.loc[1, [f"decoded_y{i}" for i in range(8)]].to_numpy(dtype=float),
                               samples[1].future[:, 1])


def test_empty_memory_inspection(generator, lookup_codec, tmp_path):
    written = generator.write_memory_inspection(MemoryStore(48, 48), lookup_codec, tmp_path / "m.csv",
                                                svg_path=tmp_path / "m.svg")
    assert "svg" not in written
    frame, _ = load_report(written["inspection"])
    assert frame.empty


def test_ablations_table_round_trip(generator, tmp_path):
    table = pd.DataFrame({"variant": ["full", "no_refine"], "k": [5, 5], "fde_4s": [1.25, 1.5]})
    frame, metadata = load_report(generator.write_ablations(table, tmp_path / "ablations.csv"))
    pd.testing.assert_frame_equal(frame, table)
    assert metadata["kind"] == "ablations"
