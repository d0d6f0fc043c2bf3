"""
Conjunctive queries, their exact cardinality and the synthetic workload generator.

In-workload queries constrain a bounded column to a narrow window of codes
around a random center, plus n_f random filters whose literals come from a
tuple inside that window. Random queries draw every filter at random and
leave the bounded column alone.
"""
from __future__ import annotations

import bisect
import functools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np
import numpy.typing as npt

from .data import ColumnDictionary, EncodedTable, RawValue
from .errors import ParseError, ValidationError, WorkloadError
from .sampler import QueryRegion
from .simple_types import Operator

logger = logging.getLogger(__name__)

Mask = npt.NDArray[np.bool_]
SortKey = tuple[int, Union[float, str]]

# operators drawn for random filters
FILTER_OPERATORS = (Operator.EQ, Operator.LT, Operator.LE, Operator.GT, Operator.GE)


@dataclass(frozen=True)
class Predicate:
    column: str
    op: Operator
    values: tuple[RawValue, ...]

    def __post_init__(self) -> None:
        if self.op is Operator.IN:
            if not self.values:
                raise ValidationError(f"IN on {self.column!r} needs at least one literal")
        elif len(self.values) != 1:
            raise ValidationError(f"{self.op.value} on {self.column!r} takes exactly one literal")

    def to_json(self) -> dict[str, Any]:
        return {"col": self.column, "op": self.op.value, "vals": list(self.values)}

    @classmethod
    def from_json(cls, raw: dict[str, Any]) -> Predicate:
        try:
            vals = raw["vals"]
            if not isinstance(vals, list):
                vals = [vals]
            return cls(str(raw["col"]), Operator.parse(str(raw["op"])), tuple(vals))
        except KeyError as exc:
            raise ParseError(f"predicate without {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class Query:
    """Conjunction of predicates; columns without a predicate are wildcards."""
    predicates: tuple[Predicate, ...] = field(default_factory=tuple)

    @property
    def columns(self) -> set[str]:
        return {p.column for p in self.predicates}

    def to_json(self) -> dict[str, Any]:
        return {"predicates": [p.to_json() for p in self.predicates]}

    def key(self) -> str:
        """Canonical text used to recognise the same query twice."""
        preds = sorted(json.dumps(p.to_json(), sort_keys=True) for p in self.predicates)
        return "|".join(preds)


@dataclass(frozen=True)
class LabeledQuery:
    query: Query
    cardinality: int

    def __post_init__(self) -> None:
        if self.cardinality < 0:
            raise ValidationError(f"cardinality must be >= 0, got {self.cardinality}")

    def selectivity(self, row_count: int) -> float:
        if row_count < 1:
            raise ValidationError("selectivity needs a non-empty table")
        if self.cardinality > row_count:
            raise ValidationError(f"cardinality {self.cardinality} exceeds |T| = {row_count}")
        return self.cardinality / row_count


@dataclass(frozen=True)
class WorkloadSpec:
    bounded_column: str
    target_volume: float = 0.01
    n_filters_min: int = 5
    train_count: int = 20000
    test_count: int = 2000
    seed: int = 0
    center_range: tuple[float, float] = (0.1, 0.9)

    def __post_init__(self) -> None:
        if not 0.0 < self.target_volume <= 1.0:
            raise ValidationError(f"target volume must lie in (0, 1], got {self.target_volume}")
        if self.n_filters_min < 0:
            raise ValidationError("n_filters_min must be >= 0")
        if self.train_count < 0 or self.test_count < 0:
            raise ValidationError("query counts must be >= 0")
        lo, hi = self.center_range
        if not 0.0 <= lo < hi <= 1.0:
            raise ValidationError(f"center range {self.center_range} must satisfy 0 <= lo < hi <= 1")


class GeneratedWorkload(NamedTuple):
    train: list[LabeledQuery]
    test_in_workload: list[LabeledQuery]
    test_random: list[LabeledQuery]


# ----------------------------------------------------------------------
# Query regions and exact cardinalities
# ----------------------------------------------------------------------

@functools.lru_cache(maxsize=256)
def _sorted_keys(column: ColumnDictionary) -> tuple[int, list[SortKey]]:
    """(first non-NULL code, sort keys of the non-NULL values in code order)."""
    start = 1 if column.has_null else 0
    return start, [column.sort_key(v) for v in column.values[start:]]


def predicate_mask(column: ColumnDictionary, op: Operator, values: Sequence[RawValue]) -> Mask:
    """Allowed codes of one predicate. NULL satisfies no predicate."""
    size = column.domain_size
    mask = np.zeros(size, dtype=bool)
    literals = [column.normalize(v) for v in values]
    if any(v is None for v in literals):
        if op is not Operator.IN:
            return mask
        literals = [v for v in literals if v is not None]
    start, keys = _sorted_keys(column)
    codes = np.arange(size)
    for literal in literals:
        k = column.sort_key(literal)
        left = start + bisect.bisect_left(keys, k)
        right = start + bisect.bisect_right(keys, k)
        if op is Operator.EQ or op is Operator.IN:
            mask |= (codes >= left) & (codes < right)
        elif op is Operator.NE:
            mask |= (codes < left) | (codes >= right)
        elif op is Operator.LT:
            mask |= codes < left
        elif op is Operator.LE:
            mask |= codes < right
        elif op is Operator.GT:
            mask |= codes >= right
        else:
            mask |= codes >= left
    mask[:start] = False
    return mask


def to_region(query: Query, schema: Union[EncodedTable, Sequence[ColumnDictionary]]) -> QueryRegion:
    columns = schema.schema if isinstance(schema, EncodedTable) else tuple(schema)
    index = {c.name: i for i, c in enumerate(columns)}
    masks = [np.ones(c.domain_size, dtype=bool) for c in columns]
    for pred in query.predicates:
        i = index.get(pred.column)
        if i is None:
            raise ValidationError(f"unknown column {pred.column!r}")
        masks[i] &= predicate_mask(columns[i], pred.op, pred.values)
    return QueryRegion(masks)


def exact_cardinality(table: EncodedTable, query: Query) -> int:
    region = to_region(query, table)
    if region.is_empty:
        return 0
    return int(region.contains(table.rows).sum())


def label(table: EncodedTable, queries: Iterable[Query]) -> list[LabeledQuery]:
    return [LabeledQuery(q, exact_cardinality(table, q)) for q in queries]


# ----------------------------------------------------------------------
# Generation
# ----------------------------------------------------------------------

class _Generator:
    def __init__(self, table: EncodedTable, spec: WorkloadSpec, rng: np.random.Generator) -> None:
        self.table = table
        self.spec = spec
        self.rng = rng
        self.bounded = table.column_index(spec.bounded_column)
        column = table.schema[self.bounded]
        self.first = 1 if column.has_null else 0
        self.span = column.domain_size - self.first
        if self.span < 1 or self.span * spec.target_volume < 1.0 - 1e-9:
            raise WorkloadError(
                f"bounded column {column.name!r} has {self.span} non-NULL values, "
                f"fewer than 1/target_volume = {1.0 / spec.target_volume:g}"
            )
        self.half_width = round(spec.target_volume * self.span / 2.0)
        self.others = [i for i in range(table.column_count) if i != self.bounded]

    def window(self, center: int) -> tuple[int, int]:
        """Code window [lo, hi] of 2h+1 codes around the center, shifted inside the domain."""
        lo, hi = center - self.half_width, center + self.half_width
        top = self.first + self.span - 1
        if lo < self.first:
            hi, lo = hi + (self.first - lo), self.first
        if hi > top:
            lo, hi = max(self.first, lo - (hi - top)), top
        return lo, hi

    def centers(self, center_range: tuple[float, float]) -> tuple[int, int]:
        a = self.first + int(np.floor(center_range[0] * self.span))
        b = self.first + int(np.ceil(center_range[1] * self.span)) - 1
        return a, max(a, min(b, self.first + self.span - 1))

    def _filters(self, row: npt.NDArray[np.int32], candidates: list[int]) -> list[Predicate]:
        usable = [i for i in candidates if self.table.schema[i].value_of(int(row[i])) is not None]
        if not usable:
            return []
        low = min(self.spec.n_filters_min, len(usable))
        n_f = int(self.rng.integers(low, len(usable) + 1))
        picked = sorted(self.rng.choice(usable, size=n_f, replace=False).tolist())
        preds = []
        for i in picked:
            column = self.table.schema[i]
            op = FILTER_OPERATORS[int(self.rng.integers(len(FILTER_OPERATORS)))]
            preds.append(Predicate(column.name, op, (column.value_of(int(row[i])),)))
        return preds

    def in_workload(self, center_range: tuple[float, float]) -> Optional[Query]:
        a, b = self.centers(center_range)
        center = int(self.rng.integers(a, b + 1))
        lo, hi = self.window(center)
        codes = self.table.rows[:, self.bounded]
        inside = np.flatnonzero((codes >= lo) & (codes <= hi))
        if inside.size == 0:
            return None
        row = self.table.rows[int(inside[self.rng.integers(inside.size)])]
        column = self.table.schema[self.bounded]
        bounded = [
            Predicate(column.name, Operator.GE, (column.value_of(lo),)),
            Predicate(column.name, Operator.LE, (column.value_of(hi),)),
        ]
        return Query(tuple(bounded + self._filters(row, self.others)))

    def random(self) -> Query:
        row = self.table.rows[int(self.rng.integers(self.table.row_count))]
        return Query(tuple(self._filters(row, self.others)))


def _collect(make: Callable[[], Optional[Query]], count: int, table: EncodedTable, seen: set[str],
             keep_zero: bool, what: str) -> list[LabeledQuery]:
    out: list[LabeledQuery] = []
    attempts = 0
    budget = 50 * count + 1000
    while len(out) < count:
        attempts += 1
        if attempts > budget:
            raise WorkloadError(f"could not generate {count} distinct {what} queries "
                                f"after {budget} attempts ({len(out)} found)")
        query = make()
        if query is None:
            continue
        key = query.key()
        if key in seen:
            continue
        card = exact_cardinality(table, query)
        if card == 0 and not keep_zero:
            continue
        seen.add(key)
        out.append(LabeledQuery(query, card))
    return out


def _generate(table: EncodedTable, spec: WorkloadSpec, rng: np.random.Generator,
              center_range: tuple[float, float]) -> GeneratedWorkload:
    if table.row_count == 0:
        raise WorkloadError("cannot generate a workload on an empty table")
    gen = _Generator(table, spec, rng)
    seen: set[str] = set()
    train = _collect(lambda: gen.in_workload(center_range), spec.train_count, table, seen, False, "training")
    test_in = _collect(lambda: gen.in_workload(center_range), spec.test_count, table, seen, False, "in-workload")
    test_random = _collect(gen.random, spec.test_count, table, seen, True, "random")
    logger.info("generated %d training, %d in-workload and %d random queries on %r",
                len(train), len(test_in), len(test_random), spec.bounded_column)
    return GeneratedWorkload(train, test_in, test_random)


def generate_workload(table: EncodedTable, spec: WorkloadSpec) -> GeneratedWorkload:
    return _generate(table, spec, np.random.default_rng(spec.seed), spec.center_range)


def generate_partitions(table: EncodedTable, spec: WorkloadSpec, n_partitions: int) -> list[GeneratedWorkload]:
    """Workloads whose bounded-column centers move through consecutive slices of the center range."""
    if n_partitions < 1:
        raise ValidationError("n_partitions must be >= 1")
    lo, hi = spec.center_range
    edges = np.linspace(lo, hi, n_partitions + 1)
    seeds = np.random.SeedSequence(spec.seed).spawn(n_partitions)
    out = []
    for k in range(n_partitions):
        part = replace(spec, center_range=(float(edges[k]), float(edges[k + 1])))
        out.append(_generate(table, part, np.random.default_rng(seeds[k]), part.center_range))
    return out


# ----------------------------------------------------------------------
# JSON Lines
# ----------------------------------------------------------------------

def _parse_line(line: str, number: int, path: Union[str, Path]) -> dict[str, Any]:
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {number}: {exc.msg}") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("predicates"), list):
        raise ParseError(f"{path}: line {number}: expected an object with a predicates list")
    return raw


def _lines(path: Union[str, Path]) -> Iterable[tuple[int, dict[str, Any]]]:
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if line.strip():
                yield number, _parse_line(line, number, path)


def _query(raw: dict[str, Any], number: int, path: Union[str, Path]) -> Query:
    try:
        return Query(tuple(Predicate.from_json(p) for p in raw["predicates"]))
    except ValidationError as exc:
        raise ParseError(f"{path}: line {number}: {exc}") from exc


def read_queries(path: Union[str, Path]) -> list[Query]:
    """Queries of a JSON Lines file; "card" fields are ignored."""
    return [_query(raw, number, path) for number, raw in _lines(path)]


def read_workload(path: Union[str, Path]) -> list[LabeledQuery]:
    out = []
    for number, raw in _lines(path):
        card = raw.get("card")
        if not isinstance(card, int) or isinstance(card, bool):
            raise ParseError(f"{path}: line {number}: missing or non-integer card")
        out.append(LabeledQuery(_query(raw, number, path), card))
    return out


def write_workload(path: Union[str, Path], queries: Iterable[Union[LabeledQuery, Query]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for item in queries:
            if isinstance(item, LabeledQuery):
                record = {**item.query.to_json(), "card": item.cardinality}
            else:
                record = item.to_json()
            handle.write(json.dumps(record) + "\n")


def check_labels(table: EncodedTable, labeled: Sequence[LabeledQuery]) -> None:
    """Re-verifies labels by scan; raises on the first mismatch."""
    for n, item in enumerate(labeled, start=1):
        actual = exact_cardinality(table, item.query)
        if actual != item.cardinality:
            raise WorkloadError(f"query {n}: labeled {item.cardinality}, scan finds {actual}")
