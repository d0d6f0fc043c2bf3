import json
import operator
from pathlib import Path

import numpy as np
import pytest

from uae_card.data import ColumnDictionary, EncodedTable, RawValue
from uae_card.errors import ParseError, ValidationError, WorkloadError
from uae_card.simple_types import ColumnKind, Operator
from uae_card.workload import (
    LabeledQuery, Predicate, Query, WorkloadSpec, check_labels, exact_cardinality, generate_partitions,
    generate_workload, label, predicate_mask, read_queries, read_workload, to_region, write_workload,
)

_COMPARE = {
    Operator.EQ: operator.eq, Operator.NE: operator.ne, Operator.LT: operator.lt,
    Operator.LE: operator.le, Operator.GT: operator.gt, Operator.GE: operator.ge,
}


@pytest.fixture
def table() -> EncodedTable:
    rng = np.random.default_rng(0)
    a = ColumnDictionary("a", ColumnKind.NUMERIC, list(range(200)))
    b = ColumnDictionary("b", ColumnKind.NUMERIC, [None, 1, 2, 3, 4, 5])
    c = ColumnDictionary("c", ColumnKind.CATEGORICAL, ["apple", "kiwi", "pear", "plum"])
    rows = np.stack([
        rng.integers(0, 200, size=2000),
        rng.integers(0, 6, size=2000),
        rng.integers(0, 4, size=2000),
    ], axis=1)
    return EncodedTable([a, b, c], rows)


def _matches(column: ColumnDictionary, value: RawValue, pred: Predicate) -> bool:
    if value is None:
        return False
    key = column.sort_key(value)
    literals = [v for v in pred.values if column.normalize(v) is not None]
    if pred.op is Operator.IN:
        return any(key == column.sort_key(v) for v in literals)
    if not literals:
        return False
    return bool(_COMPARE[pred.op](key, column.sort_key(literals[0])))


def _scan(table: EncodedTable, query: Query) -> int:
    count = 0
    for row in table.rows:
        ok = True
        for pred in query.predicates:
            i = table.column_index(pred.column)
            column = table.schema[i]
            if not _matches(column, column.value_of(int(row[i])), pred):
                ok = False
                break
        count += ok
    return count


def _q(*preds: tuple[str, str, list[RawValue]]) -> Query:
    return Query(tuple(Predicate(col, Operator.parse(op), tuple(vals)) for col, op, vals in preds))


# ----------------------------------------------------------------------
# Predicates and regions
# ----------------------------------------------------------------------

def test_equality_mask() -> None:
    column = ColumnDictionary("A", ColumnKind.NUMERIC, [5, 6, 7])
    assert predicate_mask(column, Operator.EQ, [6]).tolist() == [False, True, False]


def test_conjunction_on_one_column_intersects() -> None:
    column = ColumnDictionary("A", ColumnKind.NUMERIC, [0, 1, 2, 3])
    region = to_region(_q(("A", ">", [1]), ("A", "<=", [2])), [column])
    assert region.masks[0].tolist() == [False, False, True, False]


def test_literal_between_dictionary_values() -> None:
    column = ColumnDictionary("A", ColumnKind.NUMERIC, [5, 6, 7])
    assert not predicate_mask(column, Operator.EQ, [6.5]).any()
    assert predicate_mask(column, Operator.LT, [6.5]).tolist() == [True, True, False]
    assert predicate_mask(column, Operator.GE, ["6"]).tolist() == [False, True, True]
    assert predicate_mask(column, Operator.NE, [6]).tolist() == [True, False, True]


def test_null_never_matches() -> None:
    column = ColumnDictionary("b", ColumnKind.NUMERIC, [None, 1, 2])
    assert predicate_mask(column, Operator.LE, [2]).tolist() == [False, True, True]
    assert predicate_mask(column, Operator.NE, [1]).tolist() == [False, False, True]
    assert not predicate_mask(column, Operator.EQ, [None]).any()
    assert predicate_mask(column, Operator.IN, [None, 2]).tolist() == [False, False, True]


def test_categorical_ordering_and_in() -> None:
    column = ColumnDictionary("c", ColumnKind.CATEGORICAL, ["apple", "kiwi", "pear"])
    assert predicate_mask(column, Operator.LT, ["kiwi"]).tolist() == [True, False, False]
    assert predicate_mask(column, Operator.IN, ["pear", "apple", "fig"]).tolist() == [True, False, True]


def test_unpredicated_columns_are_wildcards(table: EncodedTable) -> None:
    region = to_region(_q(("c", "=", ["kiwi"])), table)
    assert region.wildcard == (True, True, False)


def test_unknown_column_raises(table: EncodedTable) -> None:
    with pytest.raises(ValidationError, match="unknown column"):
        to_region(_q(("zzz", "=", [1])), table)


def test_exact_cardinality_matches_scan(table: EncodedTable) -> None:
    queries = [
        Query(),
        _q(("a", ">=", [50]), ("a", "<=", [60])),
        _q(("b", "<", [3]), ("c", "!=", ["pear"])),
        _q(("b", "IN", [1, 5, None])),
        _q(("a", "<", [-1])),
        _q(("c", ">", ["kiwi"]), ("b", ">=", [2]), ("a", "<", [100])),
    ]
    queries += generate_workload(table, WorkloadSpec("a", 0.05, 1, 30, 10, seed=3)).test_random
    for item in queries:
        query = item.query if isinstance(item, LabeledQuery) else item
        assert exact_cardinality(table, query) == _scan(table, query)
    assert exact_cardinality(table, Query()) == table.row_count


def test_label(table: EncodedTable) -> None:
    query = _q(("c", "=", ["plum"]))
    [labeled] = label(table, [query])
    assert labeled.cardinality == int((table.rows[:, 2] == 3).sum())


def test_predicate_and_label_validation() -> None:
    with pytest.raises(ValidationError):
        Predicate("a", Operator.EQ, (1, 2))
    with pytest.raises(ValidationError):
        Predicate("a", Operator.IN, ())
    with pytest.raises(ValidationError):
        LabeledQuery(Query(), -1)
    labeled = LabeledQuery(Query(), 5)
    assert labeled.selectivity(20) == 0.25
    with pytest.raises(ValidationError):
        labeled.selectivity(4)


def test_query_key_ignores_predicate_order() -> None:
    a = _q(("a", "<", [3]), ("b", "=", [1]))
    b = _q(("b", "=", [1]), ("a", "<", [3]))
    assert a.key() == b.key()
    assert a.columns == {"a", "b"}


# ----------------------------------------------------------------------
# Generation
# ----------------------------------------------------------------------

def _bounds(query: Query, column: ColumnDictionary) -> tuple[int, int]:
    lo = [p for p in query.predicates if p.column == column.name and p.op is Operator.GE]
    hi = [p for p in query.predicates if p.column == column.name and p.op is Operator.LE]
    assert len(lo) == 1 and len(hi) == 1
    return column.code_of(lo[0].values[0]), column.code_of(hi[0].values[0])


def test_generated_workload_shape(table: EncodedTable) -> None:
    spec = WorkloadSpec("a", target_volume=0.05, n_filters_min=1, train_count=200, test_count=50, seed=1)
    workload = generate_workload(table, spec)
    assert len(workload.train) == 200
    assert len(workload.test_in_workload) == 50
    assert len(workload.test_random) == 50

    a = table.schema[0]
    for item in workload.train + workload.test_in_workload:
        assert item.cardinality >= 1
        lo, hi = _bounds(item.query, a)
        # h = round(0.05 * 200 / 2) = 5
        assert hi - lo == 10
        assert 20 - 5 <= lo and hi <= 179 + 5
        others = item.query.columns - {"a"}
        assert others
    for item in workload.test_random:
        assert "a" not in item.query.columns
        assert item.cardinality == exact_cardinality(table, item.query)

    keys = [q.query.key() for q in workload.train + workload.test_in_workload + workload.test_random]
    assert len(set(keys)) == len(keys)


def test_filters_respect_minimum_count(table: EncodedTable) -> None:
    workload = generate_workload(table, WorkloadSpec("a", 0.05, 5, 40, 5, seed=2))
    for item in workload.train:
        filtered = item.query.columns - {"a"}
        # the tuple's b may be NULL, leaving only c usable
        assert filtered in ({"b", "c"}, {"c"})


def test_generation_is_deterministic(table: EncodedTable) -> None:
    spec = WorkloadSpec("a", 0.05, 1, 30, 10, seed=7)
    assert generate_workload(table, spec) == generate_workload(table, spec)
    other = generate_workload(table, WorkloadSpec("a", 0.05, 1, 30, 10, seed=8))
    assert other.train != generate_workload(table, spec).train


def test_full_target_volume_covers_the_bounded_column(table: EncodedTable) -> None:
    workload = generate_workload(table, WorkloadSpec("a", 1.0, 1, 5, 0, seed=0))
    for item in workload.train:
        assert to_region(item.query, table).masks[0].all()


def test_infeasible_target_volume_raises(table: EncodedTable) -> None:
    with pytest.raises(WorkloadError):
        generate_workload(table, WorkloadSpec("c", 0.01, 1, 5, 0))


def test_exhausted_attempt_budget_raises() -> None:
    a = ColumnDictionary("a", ColumnKind.NUMERIC, [0, 1, 2, 3])
    b = ColumnDictionary("b", ColumnKind.NUMERIC, [0, 1])
    small = EncodedTable([a, b], [[0, 0], [1, 1], [2, 0], [3, 1]])
    with pytest.raises(WorkloadError, match="distinct"):
        generate_workload(small, WorkloadSpec("a", 0.25, 1, 500, 0))


def test_workload_spec_validation() -> None:
    with pytest.raises(ValidationError):
        WorkloadSpec("a", target_volume=0.0)
    with pytest.raises(ValidationError):
        WorkloadSpec("a", center_range=(0.5, 0.5))
    with pytest.raises(ValidationError):
        WorkloadSpec("a", train_count=-1)


def test_partitions_move_through_the_center_range(table: EncodedTable) -> None:
    spec = WorkloadSpec("a", 0.05, 1, 30, 5, seed=4)
    parts = generate_partitions(table, spec, 3)
    assert len(parts) == 3
    a = table.schema[0]
    first = [_bounds(q.query, a) for q in parts[0].train]
    last = [_bounds(q.query, a) for q in parts[2].train]
    assert max(hi for _, hi in first) < min(lo for lo, _ in last)
    with pytest.raises(ValidationError):
        generate_partitions(table, spec, 0)


# ----------------------------------------------------------------------
# JSON Lines
# ----------------------------------------------------------------------

def test_workload_file_round_trip(table: EncodedTable, tmp_path: Path) -> None:
    workload = generate_workload(table, WorkloadSpec("a", 0.05, 1, 20, 0, seed=5))
    path = tmp_path / "train.jsonl"
    write_workload(path, workload.train)
    assert read_workload(path) == workload.train
    assert read_queries(path) == [q.query for q in workload.train]
    first = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
    assert list(first) == ["predicates", "card"]
    assert set(first["predicates"][0]) == {"col", "op", "vals"}


def test_unlabeled_queries_are_written_without_card(tmp_path: Path) -> None:
    path = tmp_path / "q.jsonl"
    write_workload(path, [_q(("a", "<=", [3]))])
    assert path.read_text(encoding="utf-8") == '{"predicates": [{"col": "a", "op": "<=", "vals": [3]}]}\n'
    with pytest.raises(ParseError, match="card"):
        read_workload(path)


def test_malformed_lines_report_their_number(tmp_path: Path) -> None:
    path = tmp_path / "bad.jsonl"
    path.write_text('{"predicates": [], "card": 1}\n\n{not json}\n', encoding="utf-8")
    with pytest.raises(ParseError, match="line 3"):
        read_workload(path)
    path.write_text('{"predicates": [{"col": "a", "op": "~", "vals": [1]}]}\n', encoding="utf-8")
    with pytest.raises(ParseError, match="line 1"):
        read_queries(path)
    path.write_text('{"predicates": [{"col": "a", "vals": [1]}]}\n', encoding="utf-8")
    with pytest.raises(ParseError):
        read_queries(path)


def test_check_labels_flags_wrong_cardinality(table: EncodedTable) -> None:
    query = _q(("c", "=", ["apple"]))
    [good] = label(table, [query])
    check_labels(table, [good])
    with pytest.raises(WorkloadError, match="query 1"):
        check_labels(table, [LabeledQuery(query, good.cardinality + 1)])
