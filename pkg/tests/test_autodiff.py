import threading

import numpy as np
import pytest
from oracles import check_op

from hfn_anomaly import autodiff as ad
from hfn_anomaly.autodiff import Tape, Tensor
from hfn_anomaly.exception import (
    AutodiffError,
    DimensionError,
    StaleTapeError,
    DegenerateRowError,
)

SEEDS = range(100)


def test_matmul_values():
    assert np.array_equal(ad.matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]]).values, [[1, 2], [3, 4]])
    assert np.array_equal(ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).values, [[11]])
    with pytest.raises(DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_against_ones():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    with Tape():
        loss = ad.sum(a @ Tensor([[1.0], [1.0]]))
    ad.backward(loss)
    assert np.allclose(a.grad, np.ones((2, 2)))


def test_activation_values():
    assert ad.selu(0.0).item() == 0.0
    assert ad.selu(1.0).item() == pytest.approx(1.05070098)
    assert ad.selu(-1.0).item() == pytest.approx(-1.11133, abs=1e-5)
    assert ad.leaky_relu(2.0).item() == 2.0
    assert ad.leaky_relu(-2.0, 0.2).item() == pytest.approx(-0.4)
    assert ad.leaky_relu(0.0).item() == 0.0
    assert ad.sigmoid(0.0).item() == 0.5
    assert ad.sigmoid(np.log(3.0)).item() == pytest.approx(0.75)
    big = ad.sigmoid([10.0, 20.0, 40.0, 800.0]).values
    assert np.all(np.diff(big) >= 0) and np.all(big <= 1.0) and np.isfinite(big).all()
    with pytest.raises(AutodiffError):
        ad.leaky_relu(1.0, slope=1.5)


@pytest.mark.parametrize("seed", range(10))
def test_activations_are_monotone(seed: int):
    x = np.sort(np.random.default_rng(seed).normal(scale=10.0, size=500))
    for name, values in [
        ("selu", ad.selu(x).values),
        ("sigmoid", ad.sigmoid(x).values),
        ("leaky_relu", ad.leaky_relu(x, 0.2).values),
    ]:
        assert np.all(np.diff(values) >= 0), name


def test_softmax_rows():
    assert np.allclose(ad.softmax_rows([[0.0, 0.0]]).values, [[0.5, 0.5]])
    assert np.allclose(ad.softmax_rows([[np.log(2.0), 0.0]]).values, [[2 / 3, 1 / 3]])
    masked = ad.softmax_rows([[5.0, 9.0]], mask=np.array([[True, False]])).values
    assert masked.tolist() == [[1.0, 0.0]]
    with pytest.raises(DegenerateRowError):
        ad.softmax_rows([[1.0, 2.0]], mask=np.array([[False, False]]))


@pytest.mark.parametrize("seed", range(20))
def test_softmax_rows_normalized(seed: int):
    rng = np.random.default_rng(seed)
    mask = rng.random((5, 5)) < 0.5
    mask[np.arange(5), np.arange(5)] = True
    y = ad.softmax_rows(rng.normal(size=(5, 5)) * 10, mask).values
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(y[~mask] == 0.0)


def test_elementwise_values():
    assert ad.hadamard([[1.0, 2.0]], [[3.0, 4.0]]).values.tolist() == [[3.0, 8.0]]
    assert ad.concat([np.ones((1, 3)), np.zeros((1, 3))], axis=0).shape == (2, 3)
    assert ad.mean([2.0, 4.0]).item() == 3.0
    with pytest.raises(DimensionError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))


def test_mse_loss():
    assert ad.mse_loss([1.0, 2.0], [1.0, 2.0]).item() == 0.0
    assert ad.mse_loss([0.0, 0.0], [1.0, 1.0]).item() == 1.0
    pred = Tensor([2.0], requires_grad=True)
    with Tape():
        loss = ad.mse_loss(pred, [0.0])
    ad.backward(loss)
    assert pred.grad.tolist() == [4.0]
    with pytest.raises(DimensionError):
        ad.mse_loss([1.0, 2.0], [1.0])


def test_backward_simple():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape():
        loss = ad.sum(w)
    ad.backward(loss)
    assert w.grad.tolist() == [1.0, 1.0, 1.0]

    w = Tensor([3.0], requires_grad=True)
    with Tape():
        loss = ad.sum(w * w)
    ad.backward(loss)
    assert w.grad.tolist() == [6.0]


def test_backward_twice_is_stale():
    w = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = ad.sum(w * w)
    ad.backward(loss)
    with pytest.raises(StaleTapeError):
        ad.backward(loss)


def test_inference_mode_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    loss = ad.sum(w * w)
    assert not loss.requires_grad
    with pytest.raises(StaleTapeError):
        ad.backward(loss)


def test_tape_is_per_thread():
    tape = Tape()
    seen = []
    with tape:
        thread = threading.Thread(target=lambda: seen.append(ad.active_tape()))
        thread.start()
        thread.join()
        assert ad.active_tape() is tape
    assert seen == [None]
    assert ad.active_tape() is None


def test_broadcast_gradient_reduces():
    bias = Tensor(np.zeros(3), requires_grad=True)
    x = np.arange(12.0).reshape(2, 2, 3)
    with Tape():
        loss = ad.sum(x + bias)
    ad.backward(loss)
    assert bias.grad.tolist() == [4.0, 4.0, 4.0]


def test_cosine_zero_rows_stay_finite():
    x = Tensor(np.array([[0.0, 0.0], [1.0, 2.0]]), requires_grad=True)
    with Tape():
        loss = ad.sum(ad.cosine_similarity(x) * np.arange(4.0).reshape(2, 2))
    ad.backward(loss)
    assert np.isfinite(x.grad).all()
    assert x.grad[0].tolist() == [0.0, 0.0]
    assert ad.cosine_similarity(x).values.tolist()[0] == [0.0, 0.0]


def test_cosine_small_rows_are_exact():
    sim = ad.cosine_similarity(np.array([[1e-7, 0.0], [1e-7, 1e-7]])).values
    assert abs(sim[0, 0] - 1.0) < 1e-12 and abs(sim[1, 1] - 1.0) < 1e-12
    assert abs(sim[0, 1] - np.sqrt(0.5)) < 1e-12
    scaled = ad.cosine_similarity(np.array([[1.0, 0.0], [1.0, 1.0]])).values
    assert np.allclose(sim, scaled, atol=1e-12, rtol=0)


def test_threshold_st_forward():
    m = np.array([[0.9, 0.2], [0.2, 0.9]])
    assert ad.threshold_st(m, 0.5).values.tolist() == [[1.0, 0.0], [0.0, 1.0]]
    boundary = np.array([[0.0, 0.5], [0.5, 0.0]])
    assert ad.threshold_st(boundary, 0.5).values.tolist() == [[1.0, 1.0], [1.0, 1.0]]


def test_threshold_st_surrogate_gradient_reaches_tau():
    tau = Tensor(0.5, requires_grad=True)
    m = Tensor([[0.0, 0.55], [0.45, 0.0]], requires_grad=True)
    with Tape():
        loss = ad.sum(ad.threshold_st(m, tau))
    ad.backward(loss)
    assert tau.grad is not None and tau.grad < 0
    assert m.grad[0, 0] == 0.0 and m.grad[0, 1] > 0


def _rand(rng, *shape):
    return rng.normal(size=shape)


@pytest.mark.parametrize("seed", SEEDS)
def test_op_gradients_match_finite_differences(seed: int):
    rng = np.random.default_rng(seed)
    mask = rng.random((3, 4)) < 0.6
    mask[:, 0] = True
    index = rng.integers(0, 4, size=5)
    cases = [
        (lambda a, b: a + b, _rand(rng, 2, 3), _rand(rng, 3)),
        (lambda a, b: a - b, _rand(rng, 2, 3), _rand(rng, 2, 1)),
        (lambda a, b: a * b, _rand(rng, 2, 3), _rand(rng, 2, 3)),
        (lambda a, b: ad.hadamard(a, b), _rand(rng, 3, 3), _rand(rng, 3, 3)),
        (lambda a, b: a @ b, _rand(rng, 2, 3, 4), _rand(rng, 4, 2)),
        (lambda a: ad.transpose(a), _rand(rng, 2, 3)),
        (lambda a: ad.reshape(a, (6,)), _rand(rng, 2, 3)),
        (lambda a: ad.take(a, index, axis=1), _rand(rng, 2, 4)),
        (lambda a, b: ad.concat([a, b], axis=-2), _rand(rng, 2, 3), _rand(rng, 1, 3)),
        (lambda a: ad.mean(a, axis=0), _rand(rng, 3, 2)),
        (lambda a: ad.abs(a), _rand(rng, 4)),
        (lambda a: ad.selu(a), _rand(rng, 5)),
        (lambda a: ad.leaky_relu(a, 0.2), _rand(rng, 5)),
        (lambda a: ad.sigmoid(a), _rand(rng, 5)),
        (lambda a: ad.softmax_rows(a, mask), _rand(rng, 3, 4)),
        (lambda a, b: ad.mse_loss(a, b), _rand(rng, 3), _rand(rng, 3)),
        (lambda a: ad.cosine_similarity(a), _rand(rng, 4, 3)),
        (lambda a: ad.cosine_similarity(a), _rand(rng, 2, 3, 3)),
        (
            lambda m, t: ad.threshold_st(m, t, temperature=0.5, relaxed=True),
            _rand(rng, 3, 3),
            np.array(rng.uniform(-0.5, 0.5)),
        ),
    ]
    for k, (fn, *arrays) in enumerate(cases):
        errors = check_op(fn, *arrays, seed=seed)
        assert max(errors) < 1e-4, f"case {k}: {errors}"
