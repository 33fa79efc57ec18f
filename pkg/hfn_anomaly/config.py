import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import Field, BaseModel, ConfigDict, field_validator, model_validator

ABLATION_TAGS = ("-NE", "-NF", "-DFS", "-CFS", "-HFS")


class AblationFlags(BaseModel):
    model_config = ConfigDict(frozen=True)

    disable_ne: bool = False
    """去掉节点嵌入相似度 M_Es"""
    disable_nf: bool = False
    """去掉节点特征相似度 M_Fs"""
    disable_dfs: bool = False
    """去掉离散特征子图通道"""
    disable_cfs: bool = False
    """去掉连续特征子图通道"""
    disable_hfs: bool = False
    """去掉混合特征子图通道，beta 固定为 1"""

    @classmethod
    def from_tags(cls, tags: "list[str] | tuple[str, ...]") -> "AblationFlags":
        flags: dict[str, bool] = {}
        for tag in tags:
            for part in filter(None, tag.upper().replace("+", " ").replace("-", " -").split()):
                if part not in ABLATION_TAGS:
                    raise ValueError(f"unknown ablation tag {part!r}, expected one of {', '.join(ABLATION_TAGS)}")
                flags[f"disable_{part[1:].lower()}"] = True
        return cls(**flags)

    @property
    def tags(self) -> list[str]:
        return [tag for tag in ABLATION_TAGS if getattr(self, f"disable_{tag[1:].lower()}")]

    @property
    def label(self) -> str:
        return "".join(self.tags) or "full"


class ModelConfig(BaseModel):
    window: int = Field(15, ge=1)
    """滑动窗口长度 ω"""
    embed_dim: int = Field(64, ge=1)
    """嵌入与特征投影维度 ω'"""
    hidden_dim: int = Field(10, ge=1)
    """图注意力输出维度 ω''"""
    heads: int = Field(4, ge=1)
    """注意力头数 H"""
    leaky_slope: float = Field(0.2, gt=0.0, lt=1.0)
    temperature: float = Field(0.1, gt=0.0)
    """阈值代理 sigmoid 的温度"""
    mask_p: float = Field(0.1, ge=0.0, lt=1.0)
    """训练时子图边的随机掩码概率"""
    relaxed_adjacency: bool = False
    """前向直接使用代理邻接矩阵（用于有限差分检查）"""
    embedding_std: float = Field(0.1, gt=0.0)
    ablation: AblationFlags = Field(default_factory=AblationFlags)


class TrainConfig(BaseModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    lr: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(64, ge=1)
    max_epochs: int = Field(100, ge=1)
    loss_floor: float = Field(1e-4, ge=0.0)
    """训练损失低于此值时触发提前停止规则"""
    floor_patience: int = Field(10, ge=1)
    floor_rule: Literal["consecutive", "after"] = "consecutive"
    """consecutive: 连续 floor_patience 个 epoch 低于 loss_floor；after: 第 floor_patience 个 epoch 之后首次低于"""
    valid_patience: int = Field(10, ge=1)
    """验证损失连续无改进的 epoch 数"""
    seed: int = 0


class DetectorConfig(BaseModel):
    error_basis: Literal["error", "prediction"] = "error"
    """IQR 与中位数基于绝对预测误差还是预测值本身"""
    export_scores: bool = False
    export_graph: Optional[tuple[int, int]] = None
    """导出相似度矩阵的时间戳区间 [start, stop)"""
    workers: int = Field(1, ge=1)
    chunk_size: int = Field(256, ge=1)


class AnomalySegment(BaseModel):
    kind: Literal["spike", "stuck", "flip", "break"]
    variable: str
    start: int = Field(ge=0)
    length: int = Field(ge=1)
    magnitude: float = 1.0

    @property
    def stop(self) -> int:
        return self.start + self.length


class SynthConfig(BaseModel):
    n_continuous: int = Field(8, ge=0)
    n_discrete: int = Field(4, ge=0)
    t_train: int = Field(5000, ge=2)
    t_test: int = Field(2000, ge=2)
    segments: list[AnomalySegment] = Field(default_factory=list)
    """显式给出的异常片段；为空时按 anomaly_rate 自动放置"""
    anomaly_rate: float = Field(0.05, ge=0.0, lt=1.0)
    segment_length: int = Field(25, ge=1)
    warmup: int = Field(50, ge=0)
    """测试集开头保持正常的行数"""
    noise_std: float = Field(0.05, ge=0.0)
    seed: int = 0


class RunConfig(BaseModel):
    train_csv: Optional[Path] = None
    test_csv: Optional[Path] = None
    schema_path: Optional[Path] = None
    checkpoint: Optional[Path] = None
    output_dir: Path = Field(default_factory=lambda: Path(os.environ.get("HFN_OUTPUT_DIR", "hfn-output")))
    """输出目录，默认取环境变量 HFN_OUTPUT_DIR"""
    label_column: Optional[str] = "label"
    timestamp_column: Optional[str] = None
    forward_fill: bool = False
    valid_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    seed: int = 0
    """整个流水线唯一的随机种子，覆盖 train.seed 与 synth.seed"""
    train: TrainConfig = Field(default_factory=TrainConfig)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)

    @field_validator("output_dir", mode="before")
    def expand_output_dir(cls, v):
        return Path(v).expanduser() if v is not None else v

    @model_validator(mode="after")
    def propagate_seed(self):
        self.train.seed = self.seed
        self.synth.seed = self.seed
        return self

    @classmethod
    def load(cls, path: "Path | str") -> "RunConfig":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
