"""条件得分、阈值扫描与异常定位

得分 Score_i = (|x_i - x̂_i| - IQR_i) / (μ_i + 1)，时间戳得分取所有传感器中的最大值。
前 ω 个时间戳没有完整窗口，不参与打分与评估。
"""

from pathlib import Path
from typing import Union, Literal, Optional, NamedTuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix, precision_recall_curve

from .model import HFN
from .config import DetectorConfig
from .graph import export_graph
from .utils import log, escape_tag
from .dataset import WindowSet, SeriesFrame, make_windows
from .models import SensorRank, Calibration, DetectionReport
from .exception import StorageError, NumericalError, DataValidationError, InsufficientDataError

MIN_CALIBRATION_WINDOWS = 10
Basis = Literal["error", "prediction"]


class SweepResult(NamedTuple):
    f1: float
    precision: float
    recall: float
    threshold: float


class Metrics(NamedTuple):
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int


def _windows(data: Union[SeriesFrame, WindowSet], window: int) -> WindowSet:
    return data if isinstance(data, WindowSet) else make_windows(data, window)


def predict_windows(model: HFN, windows: WindowSet, workers: int = 1, chunk_size: int = 256) -> np.ndarray:
    """冻结参数下按块并行预测，结果按窗口顺序拼回"""
    chunks = [windows.inputs[i : i + chunk_size] for i in range(0, len(windows), chunk_size)]
    if not chunks:
        return np.zeros((0, len(model.schema)))
    if workers <= 1 or len(chunks) == 1:
        outputs = [model.forward(chunk).values for chunk in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(lambda chunk: model.forward(chunk).values, chunks))
    return np.concatenate(outputs, axis=0)


def calibrate(
    model: HFN,
    valid: Union[SeriesFrame, WindowSet],
    basis: Basis = "error",
    *,
    workers: int = 1,
    chunk_size: int = 256,
) -> Calibration:
    """在正常的验证数据上统计每个传感器的四分位距与中位数"""
    windows = _windows(valid, model.config.window)
    if len(windows) < MIN_CALIBRATION_WINDOWS:
        raise InsufficientDataError(
            f"calibration needs at least {MIN_CALIBRATION_WINDOWS} validation windows, got {len(windows)}"
        )
    pred = predict_windows(model, windows, workers, chunk_size)
    series = np.abs(windows.targets - pred) if basis == "error" else pred
    return calibration_from_series(series, basis)


def calibration_from_series(series: np.ndarray, basis: Basis = "error") -> Calibration:
    q1, median, q3 = np.quantile(np.asarray(series, dtype=np.float64), [0.25, 0.5, 0.75], axis=0)
    if basis == "prediction" and (median + 1.0 <= 0).any():
        raise NumericalError("prediction-basis median <= -1 makes the score denominator non-positive")
    calib = Calibration(basis=basis, iqr=(q3 - q1).tolist(), median=median.tolist(), windows=len(series))
    log("DEBUG", f"calibrated {len(calib.iqr)} sensor(s) on {calib.windows} window(s), basis={basis}")
    return calib


def condition_scores(errors: np.ndarray, calib: Calibration) -> tuple[np.ndarray, np.ndarray]:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.shape[-1] != len(calib.iqr):
        raise DataValidationError(f"errors have {errors.shape[-1]} sensor(s), calibration has {len(calib.iqr)}")
    sensor = (errors - np.asarray(calib.iqr)) / (np.asarray(calib.median) + 1.0)
    return sensor, sensor.max(axis=-1)


def score(
    model: HFN,
    calib: Calibration,
    frame: Union[SeriesFrame, WindowSet],
    *,
    workers: int = 1,
    chunk_size: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """返回 (T - ω) x L 的 Score_i 矩阵与长度 T - ω 的 Score 向量"""
    windows = _windows(frame, model.config.window)
    pred = predict_windows(model, windows, workers, chunk_size)
    return condition_scores(np.abs(windows.targets - pred), calib)


def _check_labels(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise DataValidationError(f"length mismatch: {scores.size} score(s) vs {labels.size} label(s)")
    if not np.isin(labels, (0, 1)).all():
        raise DataValidationError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def metrics(flags: np.ndarray, labels: np.ndarray) -> Metrics:
    flags, labels = _check_labels(flags, labels)
    tn, fp, fn, tp = (int(v) for v in confusion_matrix(labels, flags.astype(np.int64), labels=[0, 1]).ravel())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(precision, recall, f1, tp, fp, fn, tn)


def sweep_threshold(scores: np.ndarray, labels: np.ndarray) -> SweepResult:
    """在得分出现过的每个取值上评估 F1，返回最大者；并列时取最小阈值

    时间戳 t 被标记为异常当且仅当 Score(t) >= threshold，不做 point-adjust。
    """
    scores, labels = _check_labels(scores, labels)
    if not scores.size:
        raise InsufficientDataError("no scores to sweep")
    positives = int(labels.sum())
    if positives in (0, labels.size):
        log("WARNING", f"labels are all {labels[0]}: precision/recall undefined, reporting F1 = 0")
        return SweepResult(0.0, 0.0, 0.0, float(scores.max()))

    precision, recall, thresholds = precision_recall_curve(labels, scores)
    # 最后一个点是 (precision=1, recall=0)，没有对应阈值
    precision, recall = precision[:-1], recall[:-1]
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(thresholds.size), where=denom > 0)
    best = int(np.argmax(f1))
    return SweepResult(float(f1[best]), float(precision[best]), float(recall[best]), float(thresholds[best]))


def localize(sensor_scores: np.ndarray, threshold: float, start: int, stop: int, offset: int = 0) -> np.ndarray:
    """统计时间戳区间 [start, stop) 内每个传感器满足 Score_i(t) >= threshold 的次数

    与检测时标记异常的规则相同，恰好等于阈值的得分也计入。

    区间以原始数据的时间戳下标给出，offset 为第一个得分对应的下标（即 ω）。
    """
    sensor_scores = np.asarray(sensor_scores, dtype=np.float64)
    if stop <= start:
        raise DataValidationError(f"empty localization range [{start}, {stop})")
    lo, hi = start - offset, stop - offset
    if lo < 0 or hi > sensor_scores.shape[0]:
        raise DataValidationError(
            f"range [{start}, {stop}) is outside the scored region [{offset}, {offset + sensor_scores.shape[0]})"
        )
    return (sensor_scores[lo:hi] >= threshold).sum(axis=0).astype(np.int64)


def rank_sensors(counts: np.ndarray, names: list[str]) -> list[SensorRank]:
    order = np.argsort(-np.asarray(counts), kind="stable")
    return [SensorRank(name=names[i], index=int(i), count=int(counts[i])) for i in order]


def detect(
    model: HFN,
    calib: Calibration,
    frame: SeriesFrame,
    config: Optional[DetectorConfig] = None,
    *,
    seed: int = 0,
) -> DetectionReport:
    """打分后在有标签时扫描最优阈值、计算指标并统计整个打分区间的超阈次数"""
    config = config or DetectorConfig()
    window = model.config.window
    windows = make_windows(frame, window)
    sensor, total = score(model, calib, windows, workers=config.workers, chunk_size=config.chunk_size)
    report = DetectionReport(
        variables=model.schema.names,
        offset=window,
        score=total.tolist(),
        sensor_scores=sensor.tolist(),
        error_basis=calib.basis,
        seed=seed,
    )
    if windows.labels is None:
        log("WARNING", "test data has no labels: reporting scores only, metrics omitted")
        return report

    sweep = sweep_threshold(total, windows.labels)
    m = metrics(total >= sweep.threshold, windows.labels)
    counts = localize(sensor, sweep.threshold, window, window + len(total), offset=window)
    report = report.model_copy(
        update={
            "threshold": sweep.threshold,
            "labeled": True,
            "precision": m.precision,
            "recall": m.recall,
            "f1": m.f1,
            "tp": m.tp,
            "fp": m.fp,
            "fn": m.fn,
            "tn": m.tn,
            "exceedance": counts.tolist(),
            "ranking": rank_sensors(counts, model.schema.names),
        }
    )
    log("DEBUG", f"best F1={m.f1:.4f} (P={m.precision:.4f}, R={m.recall:.4f}) at threshold {sweep.threshold:.6g}")
    return report


def export_scores(report: DetectionReport, directory: Union[str, Path]) -> list[Path]:
    """写出 score.csv 与 sensor_scores.csv，首列为原始时间戳下标"""
    directory = Path(directory)
    index = pd.RangeIndex(report.offset, report.offset + len(report.score), name="t")
    paths = [directory / "score.csv", directory / "sensor_scores.csv"]
    try:
        directory.mkdir(parents=True, exist_ok=True)
        pd.DataFrame({"score": report.score}, index=index).to_csv(paths[0], float_format="%.10g", lineterminator="\n")
        pd.DataFrame(report.sensor_scores, index=index, columns=report.variables).to_csv(
            paths[1], float_format="%.10g", lineterminator="\n"
        )
    except OSError as e:
        raise StorageError(f"cannot export scores to {directory}: {e}") from e
    log("DEBUG", f"exported score traces to {escape_tag(str(directory))}")
    return paths


def export_graph_range(
    model: HFN, frame: SeriesFrame, start: int, stop: int, directory: Union[str, Path]
) -> list[Path]:
    """导出时间戳区间首尾两个窗口的相似度与邻接矩阵，文件名前缀为目标时间戳下标"""
    window = model.config.window
    windows = make_windows(frame, window)
    if stop <= start or start < window or stop > frame.T:
        raise DataValidationError(f"graph export range [{start}, {stop}) must lie within [{window}, {frame.T})")
    written: list[Path] = []
    for t in sorted({start, stop - 1}):
        _, bundle = model.graph(windows.inputs[t - window])
        written.extend(export_graph(bundle, model.schema, directory, prefix=f"t{t}_"))
    return written
