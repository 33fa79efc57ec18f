"""基于 numpy 的最小反向模式自动微分

每次前向计算都在当前激活的 `Tape` 上按执行顺序记录算子，
`backward` 按记录的逆序回放。没有激活的 `Tape` 时，算子只做前向计算（推理模式）。
"""

from dataclasses import dataclass
from contextvars import ContextVar
from collections.abc import Sequence
from typing import Union, Callable, Optional

import numpy as np

from .exception import AutodiffError, DimensionError, StaleTapeError, DegenerateRowError

SELU_LAMBDA = 1.05070098
SELU_ALPHA = 1.67326324
LEAKY_SLOPE = 0.2

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", np.ndarray, float, int]

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("hfn_active_tape", default=None)


class Tensor:
    __array_ufunc__ = None

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values: np.ndarray = np.array(values, dtype=np.float64)
        """按行优先存储的实数值"""
        self.requires_grad = requires_grad
        """是否需要梯度"""
        self.grad: Optional[np.ndarray] = None
        """`backward` 之后填充，形状与 `values` 相同"""
        self.name = name
        self._tape: Optional["Tape"] = None
        self._generation = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float(self.values)

    def __repr__(self) -> str:
        name = f" {self.name}" if self.name else ""
        return f"<Tensor{name} shape={self.shape} requires_grad={self.requires_grad}>"

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Backward


class Tape:
    """按执行顺序记录的算子序列，同一时刻只属于一个线程"""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.generation = 0
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward: Backward) -> None:
        self.nodes.append(_Node(output, inputs, backward))
        output._tape = self
        output._generation = self.generation

    def clear(self) -> None:
        """释放全部中间结果，此前记录的张量随之失效"""
        self.nodes = []
        self.generation += 1


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(values: np.ndarray, inputs: tuple[Tensor, ...], backward: Backward) -> Tensor:
    out = Tensor(values)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)
    return _result(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a, b)
    return _result(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a, b)
    return _result(a.values * b.values, (a, b), lambda g: (g * b.values, g * a.values))


def hadamard(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("hadamard", a, b)
    return _result(a.values * b.values, (a, b), lambda g: (g * b.values, g * a.values))


def neg(x: Operand) -> Tensor:
    x = as_tensor(x)
    return _result(-x.values, (x,), lambda g: (-g,))


def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError("matmul", a.shape, b.shape) from None

    def backward(g: np.ndarray):
        return g @ np.swapaxes(b.values, -1, -2), np.swapaxes(a.values, -1, -2) @ g

    return _result(a.values @ b.values, (a, b), backward)


def transpose(x: Operand) -> Tensor:
    """交换最后两个维度"""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("transpose", x.shape)
    return _result(np.swapaxes(x.values, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Operand, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        values = x.values.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", x.shape, tuple(shape)) from None
    return _result(values, (x,), lambda g: (g.reshape(x.shape),))


def take(x: Operand, indices: Sequence[int], axis: int = 0) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise DimensionError("take", x.shape, idx.shape)

    def backward(g: np.ndarray):
        gx = np.zeros_like(x.values)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _result(np.take(x.values, idx, axis=axis), (x,), backward)


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise DimensionError("concat")
    try:
        values = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError:
        raise DimensionError("concat", *(p.shape for p in parts)) from None
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(values, parts, lambda g: tuple(np.split(g, splits, axis=axis)))


def sum(x: Operand, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(x.values.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Operand, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def abs(x: Operand) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _result(np.abs(x.values), (x,), lambda g: (g * np.sign(x.values),))


def selu(x: Operand) -> Tensor:
    x = as_tensor(x)
    positive = x.values > 0
    expm = np.exp(np.minimum(x.values, 0.0))
    values = np.where(positive, SELU_LAMBDA * x.values, SELU_LAMBDA * SELU_ALPHA * (expm - 1.0))
    slope = np.where(positive, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * expm)
    return _result(values, (x,), lambda g: (g * slope,))


def leaky_relu(x: Operand, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise AutodiffError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    nonneg = x.values >= 0
    values = np.where(nonneg, x.values, slope * x.values)
    return _result(values, (x,), lambda g: (np.where(nonneg, g, slope * g),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Operand) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.values)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax_rows(x: Operand, mask: Optional[np.ndarray] = None) -> Tensor:
    """沿最后一维做带掩码的 softmax，被掩码的位置恰好为 0"""
    x = as_tensor(x)
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            keep = np.broadcast_to(mask, x.shape)
        except ValueError:
            raise DimensionError("softmax_rows", x.shape, mask.shape) from None
    if not keep.any(axis=-1).all():
        raise DegenerateRowError("softmax_rows: a row is fully masked")
    z = np.where(keep, x.values, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def mse_loss(pred: Operand, target: Operand) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError("mse_loss", pred.shape, target.shape)
    diff = pred.values - target.values
    n = max(diff.size, 1)

    def backward(g: np.ndarray):
        d = 2.0 * g * diff / n
        return d, -d

    return _result(np.asarray(np.mean(diff * diff)), (pred, target), backward)


def cosine_similarity(x: Operand) -> Tensor:
    """行向量两两之间的余弦相似度，`(..., L, d) -> (..., L, L)`

    只有范数乘积为 0 的位置（含零向量行）取 0，其余位置严格等于 `dot / (|a||b|)`；
    这些位置的梯度同样为 0。
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("cosine_similarity", x.shape)
    xv = x.values
    norm = np.sqrt((xv * xv).sum(axis=-1))
    dot = xv @ np.swapaxes(xv, -1, -2)
    prod = norm[..., :, None] * norm[..., None, :]
    live = prod > 0
    denom = np.where(live, prod, 1.0)
    values = np.where(live, dot / denom, 0.0)

    def backward(g: np.ndarray):
        g = np.where(live, g, 0.0)
        g_dot = g / denom
        g_denom = -g * dot / (denom * denom)
        g_norm = (g_denom @ norm[..., :, None])[..., 0] + (np.swapaxes(g_denom, -1, -2) @ norm[..., :, None])[..., 0]
        safe = np.where(norm > 0, norm, 1.0)
        radial = np.where(norm > 0, g_norm / safe, 0.0)[..., None] * xv
        return ((g_dot + np.swapaxes(g_dot, -1, -2)) @ xv + radial,)

    return _result(values, (x,), backward)


def threshold_st(m: Operand, tau: Operand, temperature: float = 0.1, relaxed: bool = False) -> Tensor:
    """`m >= tau` 的二值化，对角线恒为 1

    前向使用硬阈值（`relaxed=True` 时使用 sigmoid 代理值），
    反向始终经由 `sigmoid((m - tau) / temperature)` 传递梯度。
    """
    m, tau = as_tensor(m), as_tensor(tau)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise DimensionError("threshold_st", m.shape)
    _broadcast("threshold_st", m, tau)
    shifted = (m.values - tau.values) / temperature
    soft = _sigmoid(shifted)
    off_diag = 1.0 - np.eye(m.shape[-1])
    base = soft if relaxed else (m.values >= tau.values).astype(np.float64)
    values = base * off_diag + (1.0 - off_diag)
    slope = soft * (1.0 - soft) / temperature * off_diag

    def backward(g: np.ndarray):
        d = g * slope
        return d, -d

    return _result(values, (m, tau), backward)


def backward(loss: Tensor) -> None:
    """从标量 `loss` 回放当前 tape，填充所有可达张量的 `grad`"""
    if loss.size != 1:
        raise DimensionError("backward (scalar loss expected)", loss.shape)
    tape = loss._tape
    if tape is None or loss._generation != tape.generation:
        raise StaleTapeError("loss is not on the current tape; run a new forward pass before backward")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = _unbroadcast(np.asarray(gi), inp.shape)
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if inp._tape is not tape or inp._generation != tape.generation:
                leaves[key] = inp

    for key, tensor in leaves.items():
        g = np.array(grads[key], dtype=np.float64)
        tensor.grad = g if tensor.grad is None else tensor.grad + g
    tape.clear()
