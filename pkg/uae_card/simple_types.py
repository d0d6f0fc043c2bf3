from __future__ import annotations
from dataclasses import dataclass
from enum import Enum

from .errors import ValidationError


class ColumnKind(Enum):
    CATEGORICAL = "categorical"
    NUMERIC = "numeric"


class InputStyle(Enum):
    BINARY = "binary"
    ONE_HOT = "one_hot"


class TrainingMode(Enum):
    DATA_ONLY = "data-only"    # UAE-D
    QUERY_ONLY = "query-only"  # UAE-Q
    HYBRID = "hybrid"


class Discrepancy(Enum):
    QERROR = "qerror"
    RMSE = "rmse"


class Operator(Enum):
    EQ = "="
    NE = "!="
    LT = "<"
    LE = "<="
    GT = ">"
    GE = ">="
    IN = "IN"

    @classmethod
    def parse(cls, text: str) -> Operator:
        aliases = {"==": "=", "<>": "!=", "≠": "!=", "≤": "<=", "≥": ">=", "in": "IN"}
        text = aliases.get(text.strip(), text.strip())
        for op in cls:
            if op.value == text:
                return op
        raise ValidationError(f"Unknown operator {text!r}")


@dataclass(frozen=True)
class StepRecord:
    """One optimizer step: total loss L = data_loss + lambda * query_loss."""
    step: int
    epoch: int
    loss: float
    data_loss: float
    query_loss: float
    wall_ms: float
