from collections.abc import Mapping
from dataclasses import field, dataclass

import numpy as np

from .autodiff import Tensor
from .exception import NotReadyError, DimensionError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    """已执行的更新次数"""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    """一阶矩估计"""
    v: dict[str, np.ndarray] = field(default_factory=dict)
    """二阶矩估计"""


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """带偏差修正的 Adam 更新，随后清空梯度

    未收到梯度的参数（例如被消融的分支）按零梯度处理。
    """
    if not any(p.grad is not None for p in params.values()):
        raise NotReadyError("no gradients populated; call backward() before adam_step()")

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, param in params.items():
        g = param.grad if param.grad is not None else np.zeros_like(param.values)
        if g.shape != param.shape:
            raise DimensionError(f"adam_step[{name}]", g.shape, param.shape)
        if name not in state.m:
            state.m[name] = np.zeros_like(param.values)
            state.v[name] = np.zeros_like(param.values)
        m, v = state.m[name], state.v[name]
        if m.shape != param.shape:
            raise DimensionError(f"adam_step[{name}]", m.shape, param.shape)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        param.values -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.epsilon)
        param.grad = None
