"""异构特征网络 (HFN)

三个图注意力通道分别在 A_C、A_D、A_CD 上传播，按节点维度拼回 schema 顺序后
以可学习的 beta 与混合通道加权，最后由节点共享的 MLP 预测下一时刻的取值。
"""

from pathlib import Path
from dataclasses import field, dataclass
from typing import Union, Optional
from collections.abc import Sequence

import numpy as np
from pydantic import ValidationError

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Normalizer, WindowSample, CategoryEncoder
from .utils import log, glorot, make_rng, escape_tag
from .config import ModelConfig, TrainConfig
from .ablation import AblationPlan, apply_ablation
from .models import Checkpoint, Calibration, VariableSchema
from .exception import StorageError, DimensionError, ContractViolation, DataValidationError
from .graph import (
    GraphBundle,
    StructureParams,
    random_mask,
    extract_subgraphs,
    project_features,
    feature_similarity,
    threshold_adjacency,
    aggregate_similarity,
    embedding_similarity,
)

CHANNELS = ("C", "D", "CD")


@dataclass
class GatChannelParams:
    W: list[Tensor]
    """每个头一个 ω'' x ω' 的共享权重"""
    a: list[Tensor]
    """每个头一个 2ω'' x 1 的注意力向量"""

    @classmethod
    def init(cls, rng: np.random.Generator, config: ModelConfig) -> "GatChannelParams":
        d_in, d_out = config.embed_dim, config.hidden_dim
        return cls(
            W=[Tensor(glorot(rng, d_in, d_out, (d_out, d_in)), requires_grad=True) for _ in range(config.heads)],
            a=[Tensor(glorot(rng, 2 * d_out, 1), requires_grad=True) for _ in range(config.heads)],
        )

    @property
    def heads(self) -> int:
        return len(self.W)


@dataclass
class FusionParams:
    beta_raw: Tensor
    """beta = sigmoid(beta_raw)，初始 0.5"""
    E_proj: Tensor
    """把 ω' 维嵌入投影到 ω'' 维，与 h 相加"""
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, config: ModelConfig) -> "FusionParams":
        d, h = config.embed_dim, config.hidden_dim
        return cls(
            beta_raw=Tensor(0.0, requires_grad=True),
            E_proj=Tensor(glorot(rng, d, h), requires_grad=True),
            W1=Tensor(glorot(rng, h, h), requires_grad=True),
            b1=Tensor(np.zeros(h), requires_grad=True),
            # 输出层零初始化，未训练的模型输出 SELU(0) = 0
            W2=Tensor(np.zeros((h, 1)), requires_grad=True),
            b2=Tensor(np.zeros(1), requires_grad=True),
        )

    @property
    def beta(self) -> Tensor:
        return ad.sigmoid(self.beta_raw)


@dataclass
class ModelParams:
    structure: StructureParams
    channels: dict[str, GatChannelParams]
    fusion: FusionParams

    @classmethod
    def init(cls, schema: VariableSchema, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = make_rng(seed)
        return cls(
            structure=StructureParams.init(rng, len(schema), config),
            channels={name: GatChannelParams.init(rng, config) for name in CHANNELS},
            fusion=FusionParams.init(rng, config),
        )

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for key, value in vars(self.structure).items():
            named[f"structure.{key}"] = value
        for channel, params in self.channels.items():
            for head, (W, a) in enumerate(zip(params.W, params.a)):
                named[f"channels.{channel}.W.{head}"] = W
                named[f"channels.{channel}.a.{head}"] = a
        for key, value in vars(self.fusion).items():
            named[f"fusion.{key}"] = value
        return named

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = sorted(set(named) - set(state))
        if missing:
            raise DataValidationError(f"state is missing parameter(s): {', '.join(missing)}")
        for name, tensor in named.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != tensor.shape:
                raise DimensionError(f"load_state_dict[{name}]", values.shape, tensor.shape)
            tensor.values = values.copy()

    def copy(self) -> "ModelParams":
        def fresh(t: Tensor) -> Tensor:
            return Tensor(t.values.copy(), requires_grad=True)

        return ModelParams(
            structure=StructureParams(**{k: fresh(v) for k, v in vars(self.structure).items()}),
            channels={
                name: GatChannelParams(W=[fresh(w) for w in p.W], a=[fresh(a) for a in p.a])
                for name, p in self.channels.items()
            },
            fusion=FusionParams(**{k: fresh(v) for k, v in vars(self.fusion).items()}),
        )


def gat_channel(F: Tensor, A_sub: Tensor, params: GatChannelParams, slope: float = ad.LEAKY_SLOPE) -> Tensor:
    """一张子图上的多头图注意力，`(..., L, ω') -> (..., L, ω'')`

    不在该子图中的节点（整行整列为 0）输出全零行。
    """
    hard = A_sub.values > 0
    n = hard.shape[-1]
    eye = np.eye(n, dtype=bool)
    active = hard.any(axis=-1) | hard.any(axis=-2)
    diag = np.diagonal(hard, axis1=-2, axis2=-1)
    if (active & ~diag).any():
        nodes = sorted(set(np.argwhere(active & ~diag)[:, -1].tolist()))
        raise ContractViolation(f"gat_channel: node(s) {nodes} have edges but no self-loop")
    mask = hard | (eye & ~active[..., :, None])

    d = params.W[0].shape[0]
    total: Optional[Tensor] = None
    for W, a in zip(params.W, params.a):
        Z = F @ W.T
        src = Z @ ad.take(a, range(d), axis=0)
        dst = Z @ ad.take(a, range(d, 2 * d), axis=0)
        alpha = ad.softmax_rows(ad.leaky_relu(src + dst.T, slope), mask)
        head = ad.hadamard(alpha, A_sub) @ Z
        total = head if total is None else total + head
    assert total is not None
    return ad.selu(total * (1.0 / params.heads))


def channel_aggregate(
    h_C: Tensor,
    h_D: Tensor,
    h_CD: Optional[Tensor],
    beta: Union[Tensor, float],
    schema: VariableSchema,
) -> Tensor:
    """h = beta * (h_C ‖ h_D) + (1 - beta) * h_CD，拼接沿节点维度并恢复 schema 顺序"""
    c_index, d_index = schema.continuous_index, schema.discrete_index
    if h_C.shape[-2] != len(c_index) or h_D.shape[-2] != len(d_index):
        raise DimensionError("channel_aggregate", h_C.shape, h_D.shape)
    if h_CD is not None and h_CD.shape[-2] != len(schema):
        raise DimensionError("channel_aggregate", h_CD.shape, (len(schema),))
    parts = [p for p in (h_C, h_D) if p.shape[-2]]
    stacked = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-2)
    typed = ad.take(stacked, np.argsort(c_index + d_index, kind="stable"), axis=-2)
    if h_CD is None:
        return typed
    return beta * typed + (1.0 - beta) * h_CD


def predict(h: Tensor, E: Tensor, params: FusionParams) -> Tensor:
    """x̂_i = SELU(mlp(h_i + E_proj · e_i))，MLP 在节点间共享"""
    if h.shape[-1] != params.E_proj.shape[1] or E.shape[-1] != params.E_proj.shape[0]:
        raise DimensionError("predict", h.shape, E.shape, params.E_proj.shape)
    z = h + E @ params.E_proj
    hidden = ad.selu(z @ params.W1 + params.b1)
    out = ad.selu(hidden @ params.W2 + params.b2)
    return ad.reshape(out, out.shape[:-1])


@dataclass
class HFN:
    schema: VariableSchema
    config: ModelConfig = field(default_factory=ModelConfig)
    params: Optional[ModelParams] = None
    seed: int = 0
    plan: AblationPlan = field(init=False)

    def __post_init__(self):
        self.plan = apply_ablation(self.config.ablation)
        if self.params is None:
            self.params = ModelParams.init(self.schema, self.config, self.seed)

    @property
    def p(self) -> ModelParams:
        assert self.params is not None
        return self.params

    def _inputs(self, inputs: Union[WindowSample, Tensor, np.ndarray]) -> Tensor:
        if isinstance(inputs, WindowSample):
            inputs = inputs.input
        x = ad.as_tensor(inputs)
        if x.ndim not in (2, 3) or x.shape[-2:] != (len(self.schema), self.config.window):
            raise DimensionError("HFN.forward", x.shape, (len(self.schema), self.config.window))
        return x

    def graph(
        self,
        inputs: Union[WindowSample, Tensor, np.ndarray],
        *,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[Tensor, GraphBundle]:
        """返回投影特征 F 与本批窗口的图结构"""
        x = self._inputs(inputs)
        s = self.p.structure
        F = project_features(x, s, self.schema)
        M_Es = embedding_similarity(s.E, strict=False) if self.plan.use_embedding_similarity else None
        M_Fs = feature_similarity(F, strict=False) if self.plan.use_feature_similarity else None
        M_As = aggregate_similarity(M_Es, M_Fs, s)
        A = threshold_adjacency(M_As, s.tau, temperature=self.config.temperature, relaxed=self.config.relaxed_adjacency)
        bundle = GraphBundle(M_Es, M_Fs, M_As, A, *extract_subgraphs(A, self.schema))
        if training and self.config.mask_p > 0:
            if rng is None:
                raise ValueError("training with mask_p > 0 needs a seeded rng")
            n = len(self.schema)
            bundle = random_mask(bundle, self.config.mask_p, rng, shape=x.shape[:-2] + (n, n))
        return F, bundle

    def forward(
        self,
        inputs: Union[WindowSample, Tensor, np.ndarray],
        *,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """预测窗口之后下一时刻的全部变量，`(B, L, ω) -> (B, L)` 或 `(L, ω) -> (L,)`"""
        F, bundle = self.graph(inputs, training=training, rng=rng)
        channels, slope = self.p.channels, self.config.leaky_slope
        batch = F.shape[:-2]
        hidden = self.config.hidden_dim

        def typed(name: str, index: Sequence[int], enabled: bool, A_sub: Tensor) -> Tensor:
            if not index or not enabled:
                return Tensor(np.zeros(batch + (len(index), hidden)))
            return ad.take(gat_channel(F, A_sub, channels[name], slope), index, axis=-2)

        h_C = typed("C", self.schema.continuous_index, self.plan.use_continuous_channel, bundle.A_C)
        h_D = typed("D", self.schema.discrete_index, self.plan.use_discrete_channel, bundle.A_D)
        if self.plan.use_hybrid_channel:
            h_CD = gat_channel(F, bundle.A_CD, channels["CD"], slope)
            h = channel_aggregate(h_C, h_D, h_CD, self.p.fusion.beta, self.schema)
        else:
            h = channel_aggregate(h_C, h_D, None, 1.0, self.schema)
        return predict(h, self.p.structure.E, self.p.fusion)

    __call__ = forward


def forward(window: Union[WindowSample, np.ndarray], model: HFN) -> np.ndarray:
    return model.forward(window).values


def save_checkpoint(
    path: Union[str, Path],
    model: HFN,
    *,
    normalizer: Optional[Normalizer] = None,
    calibrations: Optional[dict[str, Calibration]] = None,
    train: Optional[TrainConfig] = None,
    categories: Optional[CategoryEncoder] = None,
) -> None:
    checkpoint = Checkpoint(
        schema=model.schema,
        model=model.config,
        train=train,
        params={name: values.tolist() for name, values in model.p.state_dict().items()},
        normalizer=normalizer.model_dump() if normalizer is not None else None,
        calibrations=calibrations or {},
        categories=categories.mapping if categories is not None else None,
    )
    try:
        Path(path).write_text(checkpoint.model_dump_json(by_alias=True), encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write checkpoint {path}: {e}") from e
    log("INFO", f"checkpoint written to <y>{escape_tag(str(path))}</y>")


def load_checkpoint(path: Union[str, Path]) -> tuple[HFN, Checkpoint]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot read checkpoint {path}: {e}") from e
    try:
        checkpoint = Checkpoint.model_validate_json(text)
    except ValidationError as e:
        raise DataValidationError(f"invalid checkpoint {path}:\n{e}") from e
    model = HFN(schema=checkpoint.schema_, config=checkpoint.model)
    model.p.load_state_dict({name: np.asarray(values) for name, values in checkpoint.params.items()})
    return model, checkpoint


def checkpoint_normalizer(checkpoint: Checkpoint) -> Optional[Normalizer]:
    return Normalizer.model_validate(checkpoint.normalizer) if checkpoint.normalizer is not None else None


def checkpoint_categories(checkpoint: Checkpoint) -> Optional[CategoryEncoder]:
    return CategoryEncoder(mapping=checkpoint.categories) if checkpoint.categories is not None else None
