"""异构图结构学习

嵌入相似度与特征相似度加权聚合后按可学习阈值 τ 二值化，
再按变量类型切分为连续 (C)、离散 (D)、混合 (CD) 三张子图。
"""

from pathlib import Path
from dataclasses import dataclass, replace
from typing import Union, Optional

import numpy as np
import pandas as pd

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import WindowSample
from .config import ModelConfig
from .utils import log, glorot, escape_tag
from .models import VariableKind, VariableSchema
from .exception import StorageError, DimensionError, DegenerateEmbeddingError

SUBGRAPHS = ("A_C", "A_D", "A_CD")
EXPORTED = ("M_Es", "M_Fs", "M_As", "A")


@dataclass
class StructureParams:
    E: Tensor
    """L x ω' 的节点嵌入"""
    W_proj_C: Tensor
    b_C: Tensor
    W_proj_D: Tensor
    b_D: Tensor
    W_Es: Tensor
    W_Fs: Tensor
    tau_raw: Tensor
    """τ = sigmoid(tau_raw)，初始 τ = 0.5"""

    @classmethod
    def init(cls, rng: np.random.Generator, n_nodes: int, config: ModelConfig) -> "StructureParams":
        w, d = config.window, config.embed_dim
        return cls(
            E=Tensor(rng.normal(0.0, config.embedding_std, (n_nodes, d)), requires_grad=True),
            W_proj_C=Tensor(glorot(rng, w, d), requires_grad=True),
            b_C=Tensor(np.zeros(d), requires_grad=True),
            W_proj_D=Tensor(glorot(rng, w, d), requires_grad=True),
            b_D=Tensor(np.zeros(d), requires_grad=True),
            W_Es=Tensor(np.ones((n_nodes, n_nodes)), requires_grad=True),
            W_Fs=Tensor(np.ones((n_nodes, n_nodes)), requires_grad=True),
            tau_raw=Tensor(0.0, requires_grad=True),
        )

    @property
    def tau(self) -> Tensor:
        return ad.sigmoid(self.tau_raw)


@dataclass
class GraphBundle:
    M_Es: Optional[Tensor]
    M_Fs: Optional[Tensor]
    M_As: Tensor
    A: Tensor
    A_C: Tensor
    A_D: Tensor
    A_CD: Tensor

    def matrices(self, index: int = 0) -> dict[str, np.ndarray]:
        """取出批次中第 index 个窗口的四个矩阵，缺省项（被消融）为 None"""
        result = {}
        for name in EXPORTED:
            tensor: Optional[Tensor] = getattr(self, name)
            if tensor is None:
                continue
            values = tensor.values
            result[name] = values[index] if values.ndim == 3 else values
        return result


def _pair_masks(schema: VariableSchema) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = np.array([k is VariableKind.CONTINUOUS for k in schema.kinds])
    d = ~c
    return np.outer(c, c).astype(float), np.outer(d, d).astype(float), (np.outer(c, d) | np.outer(d, c)).astype(float)


def project_features(window: Union[WindowSample, Tensor, np.ndarray], params: StructureParams, schema: VariableSchema):
    """按变量类型分别投影到共享的 ω' 维空间，`(..., L, ω) -> (..., L, ω')`"""
    if isinstance(window, WindowSample):
        window = window.input
    x = ad.as_tensor(window)
    if x.ndim < 2 or x.shape[-2] != len(schema) or x.shape[-1] != params.W_proj_C.shape[0]:
        raise DimensionError("project_features", x.shape, (len(schema), params.W_proj_C.shape[0]))
    c = np.array([k is VariableKind.CONTINUOUS for k in schema.kinds], dtype=float)[:, None]
    parts = []
    if c.any():
        parts.append(ad.selu(x @ params.W_proj_C + params.b_C) * c)
    if not c.all():
        parts.append(ad.selu(x @ params.W_proj_D + params.b_D) * (1.0 - c))
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]


def _check_norms(x: Tensor, what: str) -> None:
    norms = np.sqrt((x.values * x.values).sum(axis=-1))
    if (norms == 0).any():
        rows = sorted(set(np.argwhere(norms == 0)[:, -1].tolist()))
        raise DegenerateEmbeddingError(f"{what} has zero-norm row(s) {rows}")


def embedding_similarity(E: Tensor, strict: bool = True) -> Tensor:
    if strict:
        _check_norms(E, "embedding")
    return ad.cosine_similarity(E)


def feature_similarity(F: Tensor, strict: bool = True) -> Tensor:
    if strict:
        _check_norms(F, "feature projection")
    return ad.cosine_similarity(F)


def aggregate_similarity(M_Es: Optional[Tensor], M_Fs: Optional[Tensor], params: StructureParams) -> Tensor:
    """M_As = M_Es ∘ W_Es + M_Fs ∘ W_Fs，任一项为 None 时视为被消融"""
    terms = []
    if M_Es is not None:
        terms.append(ad.hadamard(M_Es, params.W_Es))
    if M_Fs is not None:
        terms.append(ad.hadamard(M_Fs, params.W_Fs))
    if not terms:
        raise DimensionError("aggregate_similarity (both similarity terms removed)")
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def threshold_adjacency(
    M_As: Tensor, tau: Union[Tensor, float], temperature: float = 0.1, relaxed: bool = False
) -> Tensor:
    """前向取硬阈值、反向走 sigmoid((M_As - τ) / temperature) 代理梯度的邻接矩阵"""
    return ad.threshold_st(M_As, tau, temperature=temperature, relaxed=relaxed)


def extract_subgraphs(A: Union[Tensor, np.ndarray], schema: VariableSchema) -> tuple[Tensor, Tensor, Tensor]:
    """A_C / A_D 只保留同类型节点对，A_CD 只保留跨类型节点对；每个节点在所属子图中都有自环"""
    A = ad.as_tensor(A)
    n = len(schema)
    if A.shape[-2:] != (n, n):
        raise DimensionError("extract_subgraphs", A.shape, (n, n))
    cc, dd, cross = _pair_masks(schema)
    eye = np.eye(n)
    off = 1.0 - eye
    A_C = A * (cc * off) + eye * cc
    A_D = A * (dd * off) + eye * dd
    A_CD = A * cross + eye
    return A_C, A_D, A_CD


def random_mask(
    bundle: GraphBundle, p: float, rng: np.random.Generator, shape: Optional[tuple[int, ...]] = None
) -> GraphBundle:
    """每张子图的非自环边以概率 p 独立置零"""
    if p <= 0.0:
        return bundle
    masked = {}
    for name in SUBGRAPHS:
        sub: Tensor = getattr(bundle, name)
        target = np.broadcast_shapes(sub.shape, shape) if shape is not None else sub.shape
        n = target[-1]
        keep = (rng.random(target) >= p) | np.eye(n, dtype=bool)
        masked[name] = sub * keep.astype(np.float64)
    return replace(bundle, **masked)


def export_graph(
    bundle: GraphBundle, schema: VariableSchema, directory: Union[str, Path], index: int = 0, prefix: str = ""
) -> list[Path]:
    """把一个窗口的 M_Es、M_Fs、M_As 与 A 写成带变量名表头的 CSV"""
    directory = Path(directory)
    written = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for name, matrix in bundle.matrices(index).items():
            path = directory / f"{prefix}{name}.csv"
            pd.DataFrame(matrix, index=schema.names, columns=schema.names).to_csv(
                path, float_format="%.10g", lineterminator="\n"
            )
            written.append(path)
    except OSError as e:
        raise StorageError(f"cannot export graph to {directory}: {e}") from e
    log("DEBUG", f"exported {len(written)} matrices to {escape_tag(str(directory))}")
    return written
