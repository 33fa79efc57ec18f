from pathlib import Path
from dataclasses import field, dataclass
from collections.abc import Iterable, Sequence
from typing import Union, Optional, overload

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from .utils import log, escape_tag
from .models import VariableSchema
from .exception import (
    StorageError,
    CellParseError,
    EmptyDataError,
    LabelValueError,
    MissingValueError,
    MissingColumnError,
    DataValidationError,
    SchemaMismatchError,
    InsufficientDataError,
)

PathLike = Union[str, Path]
_BLANKS = ("", "nan", "na", "null", "none")


def _readonly(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class SeriesFrame:
    schema: VariableSchema
    values: np.ndarray
    """T x L 的实数矩阵，列顺序即 schema 顺序"""
    labels: Optional[np.ndarray] = None
    """长度为 T 的 0/1 标签，1 表示异常时刻"""
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(self.schema):
            raise DataValidationError(f"values must be T x {len(self.schema)}, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise MissingValueError("frame contains missing or non-finite values")
        object.__setattr__(self, "values", _readonly(values))
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (values.shape[0],):
                raise DataValidationError(f"labels must have length {values.shape[0]}, got {labels.shape}")
            if not np.isin(labels, (0, 1)).all():
                bad = labels[~np.isin(labels, (0, 1))][0]
                raise LabelValueError(f"labels must be 0 or 1, found {bad!r}")
            object.__setattr__(self, "labels", _readonly(labels.astype(np.int64)))
        if self.timestamps is not None:
            timestamps = np.asarray(self.timestamps)
            if timestamps.shape != (values.shape[0],):
                raise DataValidationError(f"timestamps must have length {values.shape[0]}, got {timestamps.shape}")
            object.__setattr__(self, "timestamps", _readonly(timestamps.copy()))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def L(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "SeriesFrame":
        return SeriesFrame(
            schema=self.schema,
            values=self.values[start:stop],
            labels=None if self.labels is None else self.labels[start:stop],
            timestamps=None if self.timestamps is None else self.timestamps[start:stop],
        )

    def with_values(self, values: np.ndarray) -> "SeriesFrame":
        return SeriesFrame(schema=self.schema, values=values, labels=self.labels, timestamps=self.timestamps)


class CategoryEncoder(BaseModel):
    """把字符串类别按首次出现顺序编码为整数，空白单元格保持原样"""

    mapping: dict[str, dict[str, int]] = {}

    @classmethod
    def fit(cls, data: pd.DataFrame, columns: Iterable[str]) -> "CategoryEncoder":
        mapping: dict[str, dict[str, int]] = {}
        for column in columns:
            codes: dict[str, int] = {}
            for value in data[column].astype(str).str.strip():
                if value.lower() not in _BLANKS and value not in codes:
                    codes[value] = len(codes)
            mapping[column] = codes
        return cls(mapping=mapping)

    def transform(self, data: pd.DataFrame) -> pd.DataFrame:
        data = data.copy()
        for column, codes in self.mapping.items():
            if column not in data.columns:
                continue
            raw = data[column].astype(str).str.strip()
            blank = raw.str.lower().isin(_BLANKS)
            unknown = sorted(set(raw[~blank]) - set(codes))
            if unknown:
                raise DataValidationError(f"unknown categories in column {column!r}: {unknown}")
            data[column] = raw.map(lambda v: str(codes[v]) if v in codes else v)
        return data


def load_schema(path: PathLike) -> VariableSchema:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot read schema {path}: {e}") from e
    try:
        return VariableSchema.model_validate_json(text)
    except ValidationError as e:
        raise DataValidationError(f"invalid schema document {path}:\n{e}") from e


def save_schema(schema: VariableSchema, path: PathLike) -> None:
    Path(path).write_text(schema.model_dump_json(indent=2), encoding="utf-8")


def _parse_column(raw: pd.Series, name: str) -> np.ndarray:
    text = raw.astype(str).str.strip()
    blank = text.str.lower().isin(_BLANKS)
    parsed = pd.to_numeric(text.where(~blank), errors="coerce").to_numpy(dtype=np.float64)
    bad = ~blank.to_numpy() & ~np.isfinite(parsed)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise CellParseError(row, name, text.iloc[row])
    return parsed


def _read_table(path: Path) -> pd.DataFrame:
    if not path.is_file():
        raise StorageError(f"no such file: {path}")
    try:
        data = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise EmptyDataError(f"{path} is empty") from e
    except (OSError, UnicodeDecodeError) as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    data.columns = [str(c).strip() for c in data.columns]
    if data.empty:
        raise EmptyDataError(f"{path} has a header but no rows")
    return data


def fit_categories(path: PathLike, schema: VariableSchema) -> Optional[CategoryEncoder]:
    """为含非数字取值的离散列拟合类别编码，没有这样的列时返回 None"""
    path = Path(path)
    data = _read_table(path)
    columns = []
    for i in schema.discrete_index:
        name = schema.names[i]
        if name not in data.columns:
            continue
        text = data[name].astype(str).str.strip()
        blank = text.str.lower().isin(_BLANKS)
        if pd.to_numeric(text[~blank], errors="coerce").isna().any():
            columns.append(name)
    if not columns:
        return None
    encoder = CategoryEncoder.fit(data, columns)
    log("INFO", f"encoded categorical column(s) {escape_tag(str(columns))} of {escape_tag(str(path))}")
    return encoder


def load_csv(
    path: PathLike,
    schema: VariableSchema,
    label_column: Optional[str] = "label",
    *,
    timestamp_column: Optional[str] = None,
    forward_fill: bool = False,
    encoder: Optional[CategoryEncoder] = None,
) -> SeriesFrame:
    """读取一行一个时间戳、一列一个变量的 CSV

    参数:
        path: CSV 文件路径
        schema: 变量表，决定列的顺序与类型
        label_column: 标签列名，存在时被剥离为 labels
        timestamp_column: 时间戳列名
        forward_fill: 是否用前值填充缺失值
        encoder: 字符串类别编码器
    """
    path = Path(path)
    data = _read_table(path)

    missing = [name for name in schema.names if name not in data.columns]
    if timestamp_column and timestamp_column not in data.columns:
        missing.append(timestamp_column)
    if missing:
        raise MissingColumnError(missing, path)
    if encoder is not None:
        data = encoder.transform(data)

    values = np.column_stack([_parse_column(data[name], name) for name in schema.names])
    holes = np.isnan(values)
    if holes.any():
        if not forward_fill:
            row, col = map(int, np.argwhere(holes)[0])
            raise MissingValueError(f"missing value at row {row}, column {schema.names[col]!r} (forward_fill is off)")
        values = pd.DataFrame(values).ffill().to_numpy()
        if np.isnan(values).any():
            row, col = map(int, np.argwhere(np.isnan(values))[0])
            raise MissingValueError(f"cannot forward-fill leading gap at row {row}, column {schema.names[col]!r}")
        log("WARNING", f"forward-filled {int(holes.sum())} missing cell(s) in {escape_tag(str(path))}")

    labels = None
    if label_column and label_column in data.columns:
        parsed = _parse_column(data[label_column], label_column)
        if np.isnan(parsed).any() or not np.isin(parsed, (0.0, 1.0)).all():
            bad = parsed[np.isnan(parsed) | ~np.isin(parsed, (0.0, 1.0))][0]
            raise LabelValueError(f"label column {label_column!r} must contain only 0/1, found {bad}")
        labels = parsed.astype(np.int64)

    timestamps = None
    if timestamp_column:
        timestamps = data[timestamp_column].to_numpy()
        try:
            ordered = pd.to_datetime(pd.Series(timestamps)).is_monotonic_increasing
        except (ValueError, TypeError):
            ordered = pd.Series(pd.to_numeric(timestamps, errors="coerce")).is_monotonic_increasing
        if not ordered:
            raise DataValidationError(f"timestamp column {timestamp_column!r} is not monotone")

    log("DEBUG", f"loaded {escape_tag(str(path))}: T={values.shape[0]}, L={values.shape[1]}")
    return SeriesFrame(schema=schema, values=values, labels=labels, timestamps=timestamps)


def write_csv(frame: SeriesFrame, path: PathLike, label_column: str = "label") -> None:
    data = pd.DataFrame(frame.values, columns=frame.schema.names)
    if frame.timestamps is not None:
        data.insert(0, "timestamp", frame.timestamps)
    if frame.labels is not None:
        data[label_column] = frame.labels
    try:
        data.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


class Normalizer(BaseModel):
    names: list[str]
    minimum: list[float]
    maximum: list[float]

    @property
    def zero_range(self) -> np.ndarray:
        return np.asarray(self.maximum) == np.asarray(self.minimum)

    def _span(self) -> tuple[np.ndarray, np.ndarray]:
        low = np.asarray(self.minimum)
        span = np.asarray(self.maximum) - low
        return low, np.where(span == 0, 1.0, span)

    def transform(self, values: np.ndarray) -> np.ndarray:
        low, span = self._span()
        return np.where(self.zero_range, 0.0, (values - low) / span)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        low, span = self._span()
        return np.where(self.zero_range, low, values * span + low)


def fit_normalizer(train: SeriesFrame) -> Normalizer:
    if train.T < 2:
        raise InsufficientDataError(f"normalizer needs at least 2 rows, got {train.T}")
    norm = Normalizer(
        names=train.schema.names,
        minimum=train.values.min(axis=0).tolist(),
        maximum=train.values.max(axis=0).tolist(),
    )
    if norm.zero_range.any():
        flat = [n for n, z in zip(norm.names, norm.zero_range) if z]
        log("WARNING", f"zero-range column(s) normalize to 0: {escape_tag(', '.join(flat))}")
    return norm


def apply_normalizer(frame: SeriesFrame, norm: Normalizer) -> SeriesFrame:
    if frame.schema.names != norm.names:
        raise SchemaMismatchError(norm.names, frame.schema.names)
    return frame.with_values(norm.transform(frame.values))


@dataclass(frozen=True, eq=False)
class WindowSample:
    input: np.ndarray
    """L x ω，列为时间戳 t-ω+1 … t"""
    target: np.ndarray
    """长度 L，时间戳 t+1 的取值"""
    target_index: int


@dataclass(frozen=True, eq=False)
class WindowSet(Sequence):
    inputs: np.ndarray
    """N x L x ω"""
    targets: np.ndarray
    """N x L"""
    target_index: np.ndarray
    labels: Optional[np.ndarray] = field(default=None)
    """与 targets 对齐的标签，即丢弃前 ω 个时间戳"""

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @overload
    def __getitem__(self, item: int) -> WindowSample: ...

    @overload
    def __getitem__(self, item: slice) -> "WindowSet": ...

    def __getitem__(self, item):
        if isinstance(item, slice):
            return self.subset(np.arange(len(self))[item])
        return WindowSample(self.inputs[item], self.targets[item], int(self.target_index[item]))

    def subset(self, index: np.ndarray) -> "WindowSet":
        return WindowSet(
            inputs=self.inputs[index],
            targets=self.targets[index],
            target_index=self.target_index[index],
            labels=None if self.labels is None else self.labels[index],
        )

    @property
    def window(self) -> int:
        return self.inputs.shape[2]


def make_windows(frame: SeriesFrame, window: int) -> WindowSet:
    if window < 1:
        raise InsufficientDataError(f"window must be positive, got {window}")
    if frame.T <= window:
        raise InsufficientDataError(f"need more than {window} rows to build windows, got {frame.T}")
    n = frame.T - window
    view = np.lib.stride_tricks.sliding_window_view(frame.values, window, axis=0)[:n]
    return WindowSet(
        inputs=_readonly(np.ascontiguousarray(view)),
        targets=_readonly(frame.values[window:].copy()),
        target_index=_readonly(np.arange(window, frame.T)),
        labels=None if frame.labels is None else _readonly(frame.labels[window:].copy()),
    )


def split_validation(
    frame: SeriesFrame, fraction: float, window: Optional[int] = None
) -> tuple[SeriesFrame, SeriesFrame]:
    """按时间顺序切分，验证集取末尾的 fraction 部分"""
    if not 0.0 < fraction < 1.0:
        raise InsufficientDataError(f"validation fraction must lie in (0, 1), got {fraction}")
    n_valid = int(np.floor(frame.T * fraction + 0.5))
    n_train = frame.T - n_valid
    least = window + 2 if window is not None else 1
    if n_valid < least or n_train < least:
        raise InsufficientDataError(
            f"split of T={frame.T} at fraction {fraction} gives {n_train}/{n_valid} rows, each part needs >= {least}"
        )
    return frame.slice(0, n_train), frame.slice(n_train, frame.T)
