from __future__ import annotations

import math
from typing import Sequence

from .errors import ContractError, ValidationError


def qerror(true_sel: float, est_sel: float) -> float:
    """max(1, true/est, est/true) of two strictly positive selectivities."""
    if not (true_sel > 0.0 and est_sel > 0.0):
        raise ContractError(f"q-error needs positive selectivities, got {true_sel} and {est_sel}")
    return max(1.0, true_sel / est_sel, est_sel / true_sel)


def floored_qerror(cardinality: int, est_sel: float, row_count: int) -> float:
    """Q-error with the true count floored at one tuple and the estimate at 1/|T|."""
    if row_count < 1:
        raise ValidationError("q-error needs a non-empty table")
    floor = 1.0 / row_count
    return qerror(max(cardinality, 1) / row_count, max(est_sel, floor))


def nearest_rank(values: Sequence[float], percent: float) -> float:
    """Smallest value with at least `percent`% of the values at or below it."""
    if not values:
        raise ValidationError("percentile of an empty sample")
    if not 0.0 < percent <= 100.0:
        raise ValidationError(f"percent must lie in (0, 100], got {percent}")
    ordered = sorted(values)
    rank = max(1, math.ceil(percent * len(ordered) / 100.0))
    return ordered[rank - 1]
