from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import f1_score

from hfn_anomaly.model import HFN
from hfn_anomaly.config import ModelConfig, DetectorConfig
from hfn_anomaly.dataset import SeriesFrame, make_windows
from hfn_anomaly.models import Calibration, VariableSchema
from hfn_anomaly.exception import DataValidationError, InsufficientDataError
from hfn_anomaly.detector import (
    detect,
    score,
    metrics,
    localize,
    calibrate,
    rank_sensors,
    export_scores,
    sweep_threshold,
    condition_scores,
    predict_windows,
    export_graph_range,
    calibration_from_series,
)


def test_calibration_quantiles():
    calib = calibration_from_series(np.array([[0.0], [1.0], [2.0], [3.0], [4.0]]))
    assert calib.median == [2.0] and calib.iqr == [2.0]
    perfect = calibration_from_series(np.zeros((12, 3)))
    assert perfect.iqr == [0.0] * 3 and perfect.median == [0.0] * 3
    two = calibration_from_series(np.column_stack([np.arange(5.0), np.zeros(5)]))
    assert two.iqr == [2.0, 0.0]


def test_condition_scores():
    calib = Calibration(iqr=[0.1], median=[0.2], windows=10)
    sensor, total = condition_scores(np.array([[0.5]]), calib)
    assert sensor[0, 0] == pytest.approx(0.3333333333)
    zero = Calibration(iqr=[0.0], median=[0.0], windows=10)
    assert condition_scores(np.array([[0.0]]), zero)[1].tolist() == [0.0]

    flat = Calibration(iqr=[0.0] * 3, median=[0.0] * 3, windows=10)
    sensor, total = condition_scores(np.array([[-0.1, 0.4, 0.2]]), flat)
    assert total[0] == pytest.approx(0.4) and int(np.argmax(sensor[0])) == 1


@pytest.mark.parametrize("seed", range(10))
def test_score_monotone_in_error(seed: int):
    rng = np.random.default_rng(seed)
    calib = Calibration(iqr=rng.uniform(0, 1, 4).tolist(), median=rng.uniform(0, 1, 4).tolist(), windows=10)
    errors = rng.uniform(0, 1, (20, 4))
    bumped = errors.copy()
    bumped[:, rng.integers(0, 4)] += rng.uniform(0, 1)
    assert np.all(condition_scores(bumped, calib)[1] >= condition_scores(errors, calib)[1])


def test_metrics():
    assert metrics(np.array([1, 1, 0, 0]), np.array([1, 1, 0, 0]))[:3] == (1.0, 1.0, 1.0)
    assert metrics(np.array([1, 0]), np.array([0, 1]))[:3] == (0.0, 0.0, 0.0)
    m = metrics(np.array([1, 1, 1, 0, 0]), np.array([1, 1, 0, 1, 0]))
    assert (m.tp, m.fp, m.fn, m.tn) == (2, 1, 1, 1)
    assert m.precision == pytest.approx(2 / 3) and m.recall == pytest.approx(2 / 3) and m.f1 == pytest.approx(2 / 3)
    with pytest.raises(DataValidationError):
        metrics(np.array([1, 0]), np.array([1]))


def test_sweep_example():
    result = sweep_threshold(np.array([0.1, 0.2, 0.9, 0.8]), np.array([0, 0, 1, 1]))
    assert result.f1 == 1.0 and (result.precision, result.recall) == (1.0, 1.0)
    assert result.threshold == 0.8


def test_sweep_ties_pick_smallest_threshold():
    result = sweep_threshold(np.array([1.0, 2.0, 3.0, 4.0]), np.array([1, 0, 0, 1]))
    assert result.threshold == 1.0 and result.f1 == pytest.approx(2 / 3)
    assert (result.precision, result.recall) == (0.5, 1.0)


def test_sweep_degenerate_labels(log_records: list[str]):
    result = sweep_threshold(np.array([0.1, 0.5]), np.array([0, 0]))
    assert result.f1 == 0.0
    assert "WARNING" in log_records
    assert sweep_threshold(np.array([0.1, 0.5]), np.array([1, 1])).f1 == 0.0


@pytest.mark.parametrize("seed", range(100))
def test_sweep_matches_brute_force(seed: int):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    scores = np.round(rng.normal(size=n), int(rng.integers(1, 4)))
    labels = (rng.random(n) < rng.uniform(0.1, 0.6)).astype(int)
    labels[0], labels[-1] = 0, 1
    result = sweep_threshold(scores, labels)
    by_threshold = {u: f1_score(labels, (scores >= u).astype(int), zero_division=0) for u in np.unique(scores)}
    brute = max(by_threshold.values())
    assert result.f1 == pytest.approx(brute, abs=1e-12)
    assert result.threshold == min(u for u, f1 in by_threshold.items() if f1 >= brute - 1e-12)
    assert metrics(scores >= result.threshold, labels).f1 == pytest.approx(result.f1, abs=1e-12)
    for grid in np.linspace(scores.min(), scores.max(), 7):
        assert result.f1 >= f1_score(labels, (scores >= grid).astype(int), zero_division=0) - 1e-12


def test_localize():
    sensor = np.zeros((6, 3))
    sensor[[0, 2, 4], 1] = 1.0
    counts = localize(sensor, 0.5, 10, 16, offset=10)
    assert counts.tolist() == [0, 3, 0]
    assert rank_sensors(counts, ["a", "b", "c"])[0].name == "b"
    assert localize(np.zeros((6, 3)), 0.5, 10, 16, offset=10).tolist() == [0, 0, 0]
    assert localize(np.array([[0.5, 0.49], [0.5, 0.5]]), 0.5, 0, 2).tolist() == [2, 1]
    assert [r.name for r in rank_sensors(np.array([2, 5, 2]), ["a", "b", "c"])] == ["b", "a", "c"]
    with pytest.raises(DataValidationError):
        localize(sensor, 0.5, 12, 12, offset=10)
    with pytest.raises(DataValidationError):
        localize(sensor, 0.5, 5, 12, offset=10)


@pytest.mark.parametrize("seed", range(10))
def test_localize_matches_recount(seed: int):
    rng = np.random.default_rng(seed)
    sensor = rng.normal(size=(30, 4))
    threshold = float(rng.normal())
    start, stop = sorted(rng.choice(np.arange(5, 36), size=2, replace=False).tolist())
    counts = localize(sensor, threshold, start, stop, offset=5)
    expected = [sum(1 for t in range(start, stop) if sensor[t - 5, i] >= threshold) for i in range(4)]
    assert counts.tolist() == expected
    whole = localize(sensor, threshold, 5, 35, offset=5)
    split = localize(sensor, threshold, 5, 20, offset=5) + localize(sensor, threshold, 20, 35, offset=5)
    assert whole.tolist() == split.tolist()


@pytest.fixture()
def fitted(schema: VariableSchema) -> HFN:
    model = HFN(schema=schema, config=ModelConfig(window=3, embed_dim=4, hidden_dim=3, heads=2), seed=1)
    model.p.fusion.W2.values[:] = np.random.default_rng(1).normal(size=model.p.fusion.W2.shape)
    return model


def _frame(schema: VariableSchema, rows: int, seed: int, labels: bool = False) -> SeriesFrame:
    rng = np.random.default_rng(seed)
    values = rng.uniform(size=(rows, len(schema)))
    marks = None
    if labels:
        marks = np.zeros(rows, dtype=int)
        marks[rows // 2 : rows // 2 + 5] = 1
        values[rows // 2 : rows // 2 + 5, 0] += 3.0
    return SeriesFrame(schema=schema, values=values, labels=marks)


def test_calibrate_needs_windows(fitted: HFN, schema: VariableSchema):
    with pytest.raises(InsufficientDataError):
        calibrate(fitted, _frame(schema, 12, 0))
    calib = calibrate(fitted, _frame(schema, 40, 0))
    assert calib.windows == 37 and all(v >= 0 for v in calib.iqr)
    assert calibrate(fitted, _frame(schema, 40, 0), "prediction").basis == "prediction"


def test_parallel_scoring_matches_serial(fitted: HFN, schema: VariableSchema):
    windows = make_windows(_frame(schema, 80, 2), 3)
    serial = predict_windows(fitted, windows, workers=1, chunk_size=7)
    parallel = predict_windows(fitted, windows, workers=4, chunk_size=7)
    assert np.array_equal(serial, parallel)
    calib = calibrate(fitted, _frame(schema, 40, 0))
    sensor, total = score(fitted, calib, windows, workers=3, chunk_size=5)
    assert sensor.shape == (77, 4) and np.array_equal(total, sensor.max(axis=1))


def test_detect_report(fitted: HFN, schema: VariableSchema, tmp_path: Path):
    calib = calibrate(fitted, _frame(schema, 40, 0))
    report = detect(fitted, calib, _frame(schema, 60, 3, labels=True), DetectorConfig(workers=2, chunk_size=8))
    assert report.labeled and report.offset == 3
    assert len(report.score) == 57 and len(report.sensor_scores[0]) == 4
    assert report.f1 == pytest.approx(2 * report.precision * report.recall / (report.precision + report.recall))
    flagged = sum(s >= report.threshold for s in report.score)
    assert sum(report.exceedance) >= flagged
    assert report.tp + report.fp + report.fn + report.tn == 57
    assert [r.count for r in report.ranking] == sorted(report.exceedance, reverse=True)

    paths = export_scores(report, tmp_path)
    traces = pd.read_csv(paths[1], index_col=0)
    assert list(traces.columns) == schema.names and traces.index[0] == 3


def test_detect_without_labels(fitted: HFN, schema: VariableSchema):
    calib = calibrate(fitted, _frame(schema, 40, 0))
    report = detect(fitted, calib, _frame(schema, 30, 4))
    assert not report.labeled and report.threshold is None and report.f1 is None
    assert len(report.score) == 27


def test_export_graph_range(fitted: HFN, schema: VariableSchema, tmp_path: Path):
    written = export_graph_range(fitted, _frame(schema, 30, 5), 10, 20, tmp_path)
    assert {p.name for p in written} >= {"t10_A.csv", "t19_M_Es.csv", "t19_M_Fs.csv"}
    with pytest.raises(DataValidationError):
        export_graph_range(fitted, _frame(schema, 30, 5), 1, 20, tmp_path)
