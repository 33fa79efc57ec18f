"""带标注异常的合成异构时序数据

连续变量两两共享一个潜在过程（正弦 + AR(1)），离散变量是其驱动连续变量的阈值函数，
模拟执行器跟随传感器的控制逻辑。测试集注入四类异常：
spike（叠加偏移）、stuck（冻结取值）、flip（执行器被强制到错误状态）、break（解除耦合）。
"""

from typing import Optional
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel

from .utils import log
from .dataset import SeriesFrame
from .exception import InvalidConfigError
from .config import SynthConfig, AnomalySegment
from .models import VariableKind, VariableSchema

KINDS = ("spike", "stuck", "flip", "break")
DEFAULT_MAGNITUDE = {"spike": 4.0, "stuck": 1.0, "flip": 1.0, "break": 1.0}


class SynthTruth(BaseModel):
    segments: list[AnomalySegment]
    drivers: dict[str, str]
    """离散变量到其驱动连续变量的映射"""
    coupled: list[tuple[str, str]]
    """共享潜在过程的连续变量对"""
    levels: dict[str, int]
    thresholds: dict[str, list[float]]
    """离散变量在驱动变量上的分段阈值"""
    anomaly_rows: int


@dataclass
class _Layout:
    periods: np.ndarray
    phases: np.ndarray
    gains: np.ndarray
    offsets: np.ndarray
    own_periods: np.ndarray
    own_phases: np.ndarray


def synth_schema(config: SynthConfig) -> VariableSchema:
    continuous = [(f"c{i}", VariableKind.CONTINUOUS) for i in range(config.n_continuous)]
    discrete = [(f"d{i}", VariableKind.DISCRETE) for i in range(config.n_discrete)]
    return VariableSchema.of(*continuous, *discrete)


def _check_counts(config: SynthConfig) -> None:
    if config.n_continuous + config.n_discrete == 0:
        raise InvalidConfigError("synthetic config needs at least one variable")
    if config.n_continuous + config.n_discrete < 2:
        raise InvalidConfigError("synthetic config needs at least two variables")
    if config.n_discrete and not config.n_continuous:
        raise InvalidConfigError("discrete variables need at least one continuous driver")


def _layout(rng: np.random.Generator, n_continuous: int) -> _Layout:
    n_latent = (n_continuous + 1) // 2
    return _Layout(
        periods=rng.uniform(40.0, 200.0, n_latent),
        phases=rng.uniform(0.0, 2 * np.pi, n_latent),
        gains=rng.uniform(0.6, 1.4, n_continuous) * rng.choice((-1.0, 1.0), n_continuous),
        offsets=rng.uniform(-1.0, 1.0, n_continuous),
        own_periods=rng.uniform(15.0, 60.0, n_continuous),
        own_phases=rng.uniform(0.0, 2 * np.pi, n_continuous),
    )


def _latent(rng: np.random.Generator, layout: _Layout, t: np.ndarray) -> np.ndarray:
    wave = np.sin(2 * np.pi * t[:, None] / layout.periods[None, :] + layout.phases[None, :])
    shocks = rng.normal(0.0, 0.05, wave.shape)
    drift = np.zeros_like(wave)
    for k in range(1, len(t)):
        drift[k] = 0.95 * drift[k - 1] + shocks[k]
    return wave + drift


def _continuous(
    rng: np.random.Generator, layout: _Layout, latent: np.ndarray, t: np.ndarray, noise_std: float
) -> np.ndarray:
    n = len(layout.gains)
    shared = latent[:, np.arange(n) // 2] * layout.gains[None, :]
    own = 0.3 * np.sin(2 * np.pi * t[:, None] / layout.own_periods[None, :] + layout.own_phases[None, :])
    return shared + own + layout.offsets[None, :] + rng.normal(0.0, noise_std, (len(t), n))


def _discrete(driver: np.ndarray, thresholds: list[float]) -> np.ndarray:
    return np.searchsorted(np.asarray(thresholds), driver, side="right").astype(np.float64)


def _auto_segments(config: SynthConfig, rng: np.random.Generator, schema: VariableSchema) -> list[AnomalySegment]:
    total = int(np.floor(config.anomaly_rate * config.t_test + 0.5))
    if total == 0:
        return []
    count = max(1, total // config.segment_length)
    lengths = [config.segment_length] * count
    lengths[-1] += total - sum(lengths)
    usable = config.t_test - config.warmup
    slot = usable // count
    if slot < max(lengths):
        raise InvalidConfigError(
            f"anomaly_rate {config.anomaly_rate} does not fit: {count} segment(s) in {usable} rows after warmup"
        )
    kinds = [k for k in KINDS if k != "flip" or config.n_discrete]
    continuous = [schema.names[i] for i in schema.continuous_index]
    discrete = [schema.names[i] for i in schema.discrete_index]
    segments = []
    for k, length in enumerate(lengths):
        kind = kinds[k % len(kinds)]
        pool = discrete if kind == "flip" else continuous
        start = config.warmup + k * slot + int(rng.integers(0, slot - length + 1))
        segments.append(
            AnomalySegment(
                kind=kind,  # type: ignore
                variable=pool[int(rng.integers(0, len(pool)))],
                start=start,
                length=length,
                magnitude=DEFAULT_MAGNITUDE[kind],
            )
        )
    return segments


def _check_segments(segments: list[AnomalySegment], schema: VariableSchema, t_test: int) -> None:
    ordered = sorted(segments, key=lambda s: s.start)
    for seg in ordered:
        if seg.variable not in schema.names:
            raise InvalidConfigError(f"segment variable {seg.variable!r} is not in the schema")
        kind = schema.variables[schema.index(seg.variable)].kind
        if seg.kind == "flip" and kind is not VariableKind.DISCRETE:
            raise InvalidConfigError(f"flip segment needs a discrete variable, {seg.variable!r} is continuous")
        if seg.kind in ("spike", "break") and kind is not VariableKind.CONTINUOUS:
            raise InvalidConfigError(f"{seg.kind} segment needs a continuous variable, {seg.variable!r} is discrete")
        if seg.kind == "stuck" and seg.start < 1:
            raise InvalidConfigError(f"stuck segment on {seg.variable!r} needs a preceding row to freeze, got start=0")
        if seg.stop > t_test:
            raise InvalidConfigError(f"segment {seg.kind}@{seg.start} ends at {seg.stop}, beyond t_test={t_test}")
    for prev, seg in zip(ordered, ordered[1:]):
        if seg.start < prev.stop:
            raise InvalidConfigError(
                f"segments overlap: {prev.kind}@{prev.start}+{prev.length} and {seg.kind}@{seg.start}"
            )


def synth_generate_with_truth(
    config: SynthConfig, seed: Optional[int] = None
) -> tuple[SeriesFrame, SeriesFrame, SynthTruth]:
    _check_counts(config)
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    schema = synth_schema(config)
    n_c, n_d = config.n_continuous, config.n_discrete

    layout = _layout(rng, n_c)
    t_train = np.arange(config.t_train, dtype=np.float64)
    t_test = np.arange(config.t_train, config.t_train + config.t_test, dtype=np.float64)
    train_c = _continuous(rng, layout, _latent(rng, layout, t_train), t_train, config.noise_std)
    test_latent = _latent(rng, layout, t_test)
    test_c = _continuous(rng, layout, test_latent, t_test, config.noise_std)

    drivers, levels, thresholds = {}, {}, {}
    train_d = np.zeros((config.t_train, n_d))
    test_d = np.zeros((config.t_test, n_d))
    for k in range(n_d):
        name, driver = f"d{k}", k % n_c
        levels[name] = 2 + k % 2
        cuts = np.quantile(train_c[:, driver], np.arange(1, levels[name]) / levels[name]).tolist()
        drivers[name], thresholds[name] = f"c{driver}", cuts
        train_d[:, k] = _discrete(train_c[:, driver], cuts)
        test_d[:, k] = _discrete(test_c[:, driver], cuts)

    segments = list(config.segments) or _auto_segments(config, rng, schema)
    _check_segments(segments, schema, config.t_test)

    test = np.concatenate([test_c, test_d], axis=1)
    labels = np.zeros(config.t_test, dtype=np.int64)
    train_std = train_c.std(axis=0)
    for seg in segments:
        j = schema.index(seg.variable)
        rows = slice(seg.start, seg.stop)
        if seg.kind == "spike":
            test[rows, j] += seg.magnitude * train_std[j]
        elif seg.kind == "stuck":
            test[rows, j] = test[seg.start - 1, j]
        elif seg.kind == "flip":
            level = levels[seg.variable]
            test[rows, j] = (test[rows, j] + 1) % level
        else:
            coupling = test_latent[rows, j // 2] * layout.gains[j]
            test[rows, j] -= (1.0 + seg.magnitude) * coupling
        labels[rows] = 1

    truth = SynthTruth(
        segments=segments,
        drivers=drivers,
        coupled=[(f"c{i}", f"c{i + 1}") for i in range(0, n_c - 1, 2)],
        levels=levels,
        thresholds=thresholds,
        anomaly_rows=int(labels.sum()),
    )
    log(
        "DEBUG",
        f"synthesized train T={config.t_train}, test T={config.t_test}, "
        f"{len(segments)} segment(s), {truth.anomaly_rows} anomalous row(s)",
    )
    train = SeriesFrame(
        schema=schema,
        values=np.concatenate([train_c, train_d], axis=1),
        labels=np.zeros(config.t_train, dtype=np.int64),
    )
    return train, SeriesFrame(schema=schema, values=test, labels=labels), truth


def synth_generate(config: SynthConfig, seed: Optional[int] = None) -> tuple[SeriesFrame, SeriesFrame]:
    train, test, _ = synth_generate_with_truth(config, seed)
    return train, test
