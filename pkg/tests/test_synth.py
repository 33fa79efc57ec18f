import numpy as np
import pytest

from hfn_anomaly.models import VariableKind
from hfn_anomaly.exception import InvalidConfigError
from hfn_anomaly.config import SynthConfig, AnomalySegment
from hfn_anomaly.synth import synth_generate, synth_generate_with_truth


def test_deterministic(tiny_synth: SynthConfig):
    train_a, test_a = synth_generate(tiny_synth, seed=3)
    train_b, test_b = synth_generate(tiny_synth, seed=3)
    assert np.array_equal(train_a.values, train_b.values)
    assert np.array_equal(test_a.values, test_b.values)
    assert np.array_equal(test_a.labels, test_b.labels)
    _, test_c = synth_generate(tiny_synth, seed=4)
    assert not np.array_equal(test_a.values, test_c.values)


def test_schema_and_labels(tiny_synth: SynthConfig):
    train, test, truth = synth_generate_with_truth(tiny_synth)
    assert train.schema.names == ["c0", "c1", "d0"]
    assert train.schema.kinds[-1] is VariableKind.DISCRETE
    assert train.labels is not None and train.labels.sum() == 0
    assert test.labels is not None
    assert int(test.labels.sum()) == truth.anomaly_rows == 12
    assert all(seg.start >= tiny_synth.warmup for seg in truth.segments)


def test_anomaly_rate_on_long_series():
    config = SynthConfig(n_continuous=4, n_discrete=2, t_train=100, t_test=10000, anomaly_rate=0.05)
    _, test, truth = synth_generate_with_truth(config)
    assert test.labels is not None
    assert abs(int(test.labels.sum()) - 500) <= config.segment_length
    assert {seg.kind for seg in truth.segments} == {"spike", "stuck", "flip", "break"}


def test_flip_differs_from_threshold_function_exactly_on_labels():
    config = SynthConfig(
        n_continuous=2,
        n_discrete=1,
        t_train=300,
        t_test=200,
        segments=[AnomalySegment(kind="flip", variable="d0", start=50, length=20)],
    )
    _, test, truth = synth_generate_with_truth(config)
    driver = test.schema.index(truth.drivers["d0"])
    expected = np.searchsorted(truth.thresholds["d0"], test.values[:, driver], side="right")
    differs = expected != test.values[:, test.schema.index("d0")]
    assert test.labels is not None
    assert np.array_equal(differs, test.labels.astype(bool))


def test_discrete_levels_are_integers(tiny_synth: SynthConfig):
    train, _, truth = synth_generate_with_truth(tiny_synth)
    codes = train.values[:, 2]
    assert set(np.unique(codes)) <= set(range(truth.levels["d0"]))


@pytest.mark.parametrize(
    "segment",
    [
        AnomalySegment(kind="flip", variable="c0", start=10, length=5),
        AnomalySegment(kind="spike", variable="d0", start=10, length=5),
        AnomalySegment(kind="spike", variable="nope", start=10, length=5),
        AnomalySegment(kind="stuck", variable="c0", start=118, length=5),
        AnomalySegment(kind="stuck", variable="c1", start=0, length=5),
    ],
)
def test_invalid_segments(tiny_synth: SynthConfig, segment: AnomalySegment):
    with pytest.raises(InvalidConfigError):
        synth_generate(tiny_synth.model_copy(update={"segments": [segment]}))


def test_overlapping_segments(tiny_synth: SynthConfig):
    segments = [
        AnomalySegment(kind="spike", variable="c0", start=10, length=5),
        AnomalySegment(kind="stuck", variable="c1", start=12, length=5),
    ]
    with pytest.raises(InvalidConfigError):
        synth_generate(tiny_synth.model_copy(update={"segments": segments}))


def test_stuck_holds_the_last_normal_value(tiny_synth: SynthConfig):
    reference = AnomalySegment(kind="spike", variable="c0", start=80, length=5)
    stuck = AnomalySegment(kind="stuck", variable="c1", start=40, length=6)
    _, clean, _ = synth_generate_with_truth(tiny_synth.model_copy(update={"segments": [reference]}))
    _, test, _ = synth_generate_with_truth(tiny_synth.model_copy(update={"segments": [reference, stuck]}))
    column = test.schema.index("c1")
    assert np.all(test.values[40:46, column] == clean.values[39, column])
    assert test.values[40, column] != clean.values[40, column]
    assert np.array_equal(test.values[:40], clean.values[:40])
    assert test.labels is not None and test.labels[39] == 0 and test.labels[40:46].all()


@pytest.mark.parametrize("seed", range(5))
def test_labels_mark_exactly_the_segments(seed: int):
    config = SynthConfig(
        n_continuous=3, n_discrete=2, t_train=100, t_test=400, anomaly_rate=0.1, segment_length=8, warmup=20
    )
    _, test, truth = synth_generate_with_truth(config, seed=seed)
    assert test.labels is not None
    inside = [any(seg.start <= t < seg.stop for seg in truth.segments) for t in range(config.t_test)]
    assert test.labels.astype(bool).tolist() == inside
