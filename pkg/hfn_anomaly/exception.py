from collections.abc import Sequence
from typing import Any, Optional


class HFNException(Exception):
    exit_code: int = 1

    def __init__(self, msg: Optional[str] = None):
        super().__init__(msg)
        self.msg: Optional[str] = msg
        """错误原因"""

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__} message={self.msg}>"

    def __str__(self):
        return self.msg or self.__class__.__name__


class UsageError(HFNException):
    exit_code = 2


class InvalidConfigError(UsageError):
    pass


class DataValidationError(HFNException):
    exit_code = 3


class MissingColumnError(DataValidationError):
    def __init__(self, columns: Sequence[str], path: Any = None):
        self.columns = list(columns)
        where = f" in {path}" if path is not None else ""
        super().__init__(f"missing column(s){where}: {', '.join(self.columns)}")


class CellParseError(DataValidationError):
    def __init__(self, row: int, column: str, value: Any):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"cannot parse {value!r} as a real number at row {row}, column {column!r}")


class EmptyDataError(DataValidationError):
    pass


class LabelValueError(DataValidationError):
    pass


class MissingValueError(DataValidationError):
    pass


class InsufficientDataError(DataValidationError):
    pass


class SchemaMismatchError(DataValidationError):
    def __init__(self, expected: Sequence[str], found: Sequence[str]):
        self.expected = list(expected)
        self.found = list(found)
        missing = [c for c in self.expected if c not in self.found]
        extra = [c for c in self.found if c not in self.expected]
        lines = [f"schema mismatch: expected {len(self.expected)} variables, found {len(self.found)}"]
        lines.extend(f"  - {c} (expected, not found)" for c in missing)
        lines.extend(f"  + {c} (found, not expected)" for c in extra)
        if not missing and not extra:
            lines.append(f"  order differs: expected {self.expected}, found {self.found}")
        super().__init__("\n".join(lines))


class NumericalError(HFNException):
    exit_code = 4


class DivergenceError(NumericalError):
    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}, step {step}: loss={loss}")


class DegenerateEmbeddingError(NumericalError):
    pass


class StorageError(HFNException):
    exit_code = 5


class AutodiffError(HFNException):
    pass


class DimensionError(AutodiffError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(tuple(s)) for s in shapes)}")


class DegenerateRowError(AutodiffError):
    pass


class StaleTapeError(AutodiffError):
    pass


class NotReadyError(AutodiffError):
    pass


class ContractViolation(AutodiffError):
    pass
