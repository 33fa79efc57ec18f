from enum import Enum
from typing import Union, Literal, Optional

from pydantic import Field, BaseModel, field_validator, model_validator

from .config import ModelConfig, TrainConfig

CHECKPOINT_FORMAT = "hfn-checkpoint/1"


class VariableKind(str, Enum):
    CONTINUOUS = "continuous"
    """连续数值传感器"""
    DISCRETE = "discrete"
    """离散类别执行器"""


class Variable(BaseModel):
    name: str
    kind: VariableKind

    @field_validator("kind", mode="before")
    def parse_kind(cls, v):
        if isinstance(v, str):
            short = {"c": "continuous", "d": "discrete"}
            return short.get(v.lower(), v.lower())
        return v


class VariableSchema(BaseModel):
    variables: list[Variable]

    @model_validator(mode="after")
    def check_variables(self):
        names = [v.name for v in self.variables]
        if len(names) < 2:
            raise ValueError(f"schema needs at least 2 variables, got {len(names)}")
        duplicated = sorted({n for n in names if names.count(n) > 1})
        if duplicated:
            raise ValueError(f"duplicated variable names: {', '.join(duplicated)}")
        return self

    @classmethod
    def of(cls, *entries: tuple[str, "VariableKind | str"]) -> "VariableSchema":
        return cls(variables=[Variable(name=name, kind=kind) for name, kind in entries])  # type: ignore

    def __len__(self) -> int:
        return len(self.variables)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def kinds(self) -> list[VariableKind]:
        return [v.kind for v in self.variables]

    @property
    def continuous_index(self) -> list[int]:
        return [i for i, v in enumerate(self.variables) if v.kind is VariableKind.CONTINUOUS]

    @property
    def discrete_index(self) -> list[int]:
        return [i for i, v in enumerate(self.variables) if v.kind is VariableKind.DISCRETE]

    def index(self, name: str) -> int:
        return self.names.index(name)


class Calibration(BaseModel):
    basis: Literal["error", "prediction"] = "error"
    iqr: list[float]
    """每个传感器的四分位距 IQR_i"""
    median: list[float]
    """每个传感器的中位数 μ_i"""
    windows: int
    """参与统计的验证窗口数"""


class TrainReport(BaseModel):
    loss_history: list[float] = Field(default_factory=list)
    """每个 epoch 的平均训练损失"""
    valid_history: list[float] = Field(default_factory=list)
    stop_reason: Literal["max-epochs", "early-stop"] = "max-epochs"
    stop_detail: Literal["max-epochs", "loss-floor", "valid-patience"] = "max-epochs"
    best_epoch: int = 0
    best_valid_loss: Optional[float] = None
    epochs: int = 0
    steps: int = 0
    wall_clock: float = 0.0
    seed: int = 0
    ablation: list[str] = Field(default_factory=list)
    checkpoint: Optional[str] = None
    """最终 checkpoint 文件路径"""


class SensorRank(BaseModel):
    name: str
    index: int
    count: int


class DetectionReport(BaseModel):
    variables: list[str]
    offset: int
    """第一个得分对应的时间戳下标（即 ω），更早的时间戳不参与打分与评估"""
    score: list[float]
    sensor_scores: list[list[float]]
    """(T - ω) x L 的逐传感器得分 Score_i"""
    threshold: Optional[float] = None
    labeled: bool = False
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    tp: Optional[int] = None
    fp: Optional[int] = None
    fn: Optional[int] = None
    tn: Optional[int] = None
    exceedance: list[int] = Field(default_factory=list)
    """整个打分区间内每个传感器得分超过阈值的次数"""
    ranking: list[SensorRank] = Field(default_factory=list)
    error_basis: Literal["error", "prediction"] = "error"
    seed: int = 0


class Checkpoint(BaseModel):
    format: Literal["hfn-checkpoint/1"] = CHECKPOINT_FORMAT
    schema_: VariableSchema = Field(alias="schema")
    model: ModelConfig
    train: Optional[TrainConfig] = None
    params: dict[str, Union[list, float]]
    """参数名到嵌套列表形式数组的映射"""
    normalizer: Optional[dict[str, list]] = None
    """Normalizer 的 names / minimum / maximum"""
    categories: Optional[dict[str, dict[str, int]]] = None
    """离散列的字符串类别到整数编码"""
    calibrations: dict[str, Calibration] = Field(default_factory=dict)

    model_config = {"populate_by_name": True}
