"""
Column dictionaries, the dictionary-encoded table and the model input encoding.

Every column is dictionary encoded: distinct raw values are sorted in their
natural order and numbered 0..|A_i|-1. Numeric columns sort numerically,
everything else sorts by string. NULL (an empty CSV field) is stored as None
and sorts before every other value.
"""
from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import numpy.typing as npt

from .autodiff import Tensor, constant, matmul, reshape
from .errors import DictionaryError, ParseError, ShapeError, ValidationError
from .simple_types import ColumnKind, InputStyle

logger = logging.getLogger(__name__)

RawValue = Union[None, str, int, float]
Codes = npt.NDArray[np.int32]

_INT_RE = re.compile(r"^[+-]?\d+$")


def parse_numeric(text: str) -> Union[int, float]:
    """Integer or float literal. NaN and infinities are refused: a range cannot bound them."""
    text = text.strip()
    if _INT_RE.match(text):
        return int(text)
    value = float(text)
    if not math.isfinite(value):
        raise DictionaryError(f"{text!r} is not a finite number")
    return value


def _sort_key(kind: ColumnKind, value: RawValue) -> tuple[int, Union[float, str]]:
    if value is None:
        return (0, 0.0)
    if kind is ColumnKind.NUMERIC:
        if isinstance(value, str):
            return (1, float(parse_numeric(value)))
        return (1, float(value))
    return (1, str(value))


class ColumnDictionary:
    """Bijection between the distinct raw values of one column and [0, |A_i|)."""

    def __init__(self, name: str, kind: ColumnKind, values: Sequence[RawValue]) -> None:
        self._name = name
        self._kind = kind
        self._values: tuple[RawValue, ...] = tuple(values)
        self._code_of: dict[RawValue, int] = {}
        for code, value in enumerate(self._values):
            if value in self._code_of:
                raise DictionaryError(f"column {name!r}: duplicate dictionary value {value!r}")
            self._code_of[value] = code
        if not self._values:
            raise DictionaryError(f"column {name!r}: empty dictionary")

    @classmethod
    def from_values(cls, name: str, kind: ColumnKind, raw: Iterable[RawValue]) -> ColumnDictionary:
        distinct = set(raw)
        ordered = sorted(distinct, key=lambda v: _sort_key(kind, v))
        return cls(name, kind, ordered)

    @property
    def name(self) -> str:
        return self._name

    @property
    def kind(self) -> ColumnKind:
        return self._kind

    @property
    def values(self) -> tuple[RawValue, ...]:
        return self._values

    @property
    def domain_size(self) -> int:
        return len(self._values)

    @property
    def has_null(self) -> bool:
        return self._values[0] is None

    def normalize(self, value: RawValue) -> RawValue:
        """Brings a literal into the column's value universe (numbers for numeric columns)."""
        if value is None or value == "":
            return None
        if self._kind is ColumnKind.NUMERIC:
            if isinstance(value, str):
                try:
                    return parse_numeric(value)
                except ValueError as exc:
                    raise DictionaryError(f"column {self._name!r}: {value!r} is not numeric") from exc
            if isinstance(value, float) and not math.isfinite(value):
                raise DictionaryError(f"column {self._name!r}: {value!r} is not a finite number")
            if isinstance(value, float) and value.is_integer():
                return int(value)
            return value
        return str(value)

    def code_of(self, value: RawValue) -> int:
        key = self.normalize(value)
        code = self._code_of.get(key)
        if code is None:
            raise DictionaryError(f"column {self._name!r}: value {value!r} is not in the dictionary")
        return code

    def value_of(self, code: int) -> RawValue:
        if not 0 <= code < len(self._values):
            raise DictionaryError(f"column {self._name!r}: code {code} out of [0, {len(self._values)})")
        return self._values[code]

    def sort_key(self, value: RawValue) -> tuple[int, Union[float, str]]:
        return _sort_key(self._kind, self.normalize(value))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ColumnDictionary):
            return False
        return (self._name, self._kind, self._values) == (other._name, other._kind, other._values)

    def __hash__(self) -> int:
        return hash((self._name, self._kind, self._values))

    def __repr__(self) -> str:
        return f"ColumnDictionary({self._name!r}, {self._kind.value}, |A|={self.domain_size})"


def bit_width(domain_size: int) -> int:
    """ceil(log2(domain_size)), at least 1."""
    if domain_size < 1:
        raise ValidationError(f"domain size must be positive, got {domain_size}")
    return max(1, (domain_size - 1).bit_length())


class EncodedTable:
    def __init__(self, schema: Sequence[ColumnDictionary], codes: npt.ArrayLike) -> None:
        matrix = np.array(codes, dtype=np.int32)
        if matrix.ndim != 2 or matrix.shape[1] != len(schema):
            raise ShapeError(f"code matrix shape {matrix.shape} does not match {len(schema)} columns")
        for i, column in enumerate(schema):
            col = matrix[:, i]
            if col.size and (col.min() < 0 or col.max() >= column.domain_size):
                raise DictionaryError(f"column {column.name!r}: code outside [0, {column.domain_size})")
        matrix.setflags(write=False)
        self._schema: tuple[ColumnDictionary, ...] = tuple(schema)
        self._codes = matrix
        self._index = {c.name: i for i, c in enumerate(self._schema)}

    @property
    def schema(self) -> tuple[ColumnDictionary, ...]:
        return self._schema

    @property
    def rows(self) -> Codes:
        return self._codes

    @property
    def row_count(self) -> int:
        return int(self._codes.shape[0])

    @property
    def column_count(self) -> int:
        return len(self._schema)

    @property
    def domain_sizes(self) -> list[int]:
        return [c.domain_size for c in self._schema]

    def column_index(self, name: str) -> int:
        idx = self._index.get(name)
        if idx is None:
            raise ValidationError(f"unknown column {name!r}")
        return idx

    def column(self, name: str) -> ColumnDictionary:
        return self._schema[self.column_index(name)]

    def encode_rows(self, raw_rows: Sequence[Sequence[RawValue]]) -> Codes:
        """Encodes new tuples against the existing dictionaries (no dictionary growth)."""
        out = np.zeros((len(raw_rows), self.column_count), dtype=np.int32)
        for r, row in enumerate(raw_rows):
            if len(row) != self.column_count:
                raise ParseError(f"row {r + 1}: expected {self.column_count} fields, got {len(row)}")
            for i, value in enumerate(row):
                out[r, i] = self._schema[i].code_of(value)
        return out

    def with_rows(self, new_codes: npt.ArrayLike) -> EncodedTable:
        extra = np.asarray(new_codes, dtype=np.int32).reshape(-1, self.column_count)
        return EncodedTable(self._schema, np.concatenate([self._codes, extra], axis=0))

    def schema_summary(self) -> list[dict[str, object]]:
        return [
            {
                "name": c.name,
                "kind": c.kind.value,
                "domain_size": c.domain_size,
                "bit_width": bit_width(c.domain_size),
            }
            for c in self._schema
        ]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EncodedTable):
            return False
        return self._schema == other._schema and np.array_equal(self._codes, other._codes)

    def __repr__(self) -> str:
        return f"EncodedTable({self.row_count} rows, {self.column_count} columns)"


@dataclass(frozen=True)
class CsvOptions:
    header: bool = True
    delimiter: str = ","
    numeric_columns: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if len(self.delimiter) != 1:
            raise ValidationError(f"delimiter must be one character, got {self.delimiter!r}")


def read_csv_records(path: Union[str, Path],
                     options: Optional[CsvOptions] = None) -> tuple[list[str], list[list[str]], int]:
    """(column names, rectangular body rows, file row number of the first body row)."""
    options = options or CsvOptions()
    with open(path, newline="", encoding="utf-8") as handle:
        records = list(csv.reader(handle, delimiter=options.delimiter))

    names: list[str]
    if options.header:
        if not records:
            raise ParseError(f"{path}: empty file")
        names = [n.strip() for n in records[0]]
        body = records[1:]
        first_row_number = 2
    else:
        body = records
        names = [f"col{i}" for i in range(len(body[0]))] if body else []
        first_row_number = 1
    width = len(names)
    for offset, row in enumerate(body):
        if row and len(row) != width:
            raise ParseError(
                f"{path}: row {first_row_number + offset}: expected {width} fields, got {len(row)}"
            )
    body = [r for r in body if r]  # blank lines
    if not body:
        raise ParseError(f"{path}: table has no rows")
    return names, body, first_row_number


def ingest_csv(path: Union[str, Path], options: Optional[CsvOptions] = None) -> EncodedTable:
    """Reads a rectangular CSV file and dictionary-encodes every column."""
    options = options or CsvOptions()
    names, body, first_row_number = read_csv_records(path, options)
    width = len(names)
    unknown = set(options.numeric_columns) - set(names)
    if unknown:
        raise ValidationError(f"numeric columns not in header: {sorted(unknown)}")

    schema: list[ColumnDictionary] = []
    columns: list[list[RawValue]] = []
    for i, name in enumerate(names):
        kind = ColumnKind.NUMERIC if name in options.numeric_columns else ColumnKind.CATEGORICAL
        raw: list[RawValue] = []
        for offset, row in enumerate(body):
            text = row[i]
            if text == "":
                raw.append(None)
            elif kind is ColumnKind.NUMERIC:
                try:
                    raw.append(parse_numeric(text))
                except DictionaryError as exc:
                    raise ParseError(f"{path}: row {first_row_number + offset}: column {name!r}: {exc}") from exc
                except ValueError as exc:
                    raise ParseError(
                        f"{path}: row {first_row_number + offset}: column {name!r}: {text!r} is not numeric"
                    ) from exc
            else:
                raw.append(text)
        columns.append(raw)
        schema.append(ColumnDictionary.from_values(name, kind, raw))

    codes = np.empty((len(body), width), dtype=np.int32)
    for i, (column, raw) in enumerate(zip(schema, columns)):
        lookup = {v: c for c, v in enumerate(column.values)}
        codes[:, i] = [lookup[v] for v in raw]

    table = EncodedTable(schema, codes)
    logger.info("ingested %s: %d rows, domain sizes %s", path, table.row_count, table.domain_sizes)
    return table


# ----------------------------------------------------------------------
# Input encoding for the network
# ----------------------------------------------------------------------

WILDCARD_VALUE = -1.0


def binary_encode(code: int, width: int) -> npt.NDArray[np.float64]:
    """Fixed-width big-endian bit vector of 0.0/1.0."""
    if width < 1 or not 0 <= code < (1 << width):
        raise DictionaryError(f"code {code} does not fit in {width} bits")
    return np.array([(code >> (width - 1 - b)) & 1 for b in range(width)], dtype=np.float64)


def binary_decode(bits: npt.ArrayLike) -> int:
    out = 0
    for b in np.asarray(bits, dtype=np.float64):
        out = (out << 1) | int(b > 0.5)
    return out


def expected_encoding(dist: Union[Tensor, npt.ArrayLike], width: int) -> Tensor:
    """Probability-weighted sum of the binary codes of a column's domain."""
    if isinstance(dist, Tensor):
        probs = dist
    else:
        arr = np.asarray(dist, dtype=np.float64)
        if (arr < 0).any() or abs(arr.sum(axis=-1) - 1.0).max() > 1e-9:
            raise ValidationError("expected_encoding needs a probability vector")
        probs = constant(arr)
    k = probs.shape[-1]
    if k > (1 << width):
        raise ShapeError(f"domain of size {k} does not fit in {width} bits")
    bits = np.stack([binary_encode(c, width) for c in range(k)])
    if probs.data.ndim == 1:
        return reshape(matmul(reshape(probs, (1, k)), constant(bits)), (width,))
    return matmul(probs, constant(bits))


class InputEncoding:
    """Per-column input blocks of the network: widths, bit matrices and wildcard tokens."""

    def __init__(self, names: Sequence[str], domain_sizes: Sequence[int],
                 style: InputStyle = InputStyle.BINARY) -> None:
        if len(names) != len(domain_sizes):
            raise ShapeError("one domain size per column is required")
        self._names = tuple(names)
        self._domain_sizes = tuple(int(d) for d in domain_sizes)
        self._style = style
        if style is InputStyle.BINARY:
            self._widths = tuple(bit_width(d) for d in self._domain_sizes)
            self._bits = [
                np.stack([binary_encode(c, w) for c in range(d)])
                for d, w in zip(self._domain_sizes, self._widths)
            ]
        else:
            self._widths = tuple(self._domain_sizes)
            self._bits = [np.eye(d) for d in self._domain_sizes]
        for b in self._bits:
            b.setflags(write=False)
        self._offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(self._widths)]))

    @classmethod
    def for_table(cls, table: EncodedTable, style: InputStyle = InputStyle.BINARY) -> InputEncoding:
        return cls([c.name for c in table.schema], table.domain_sizes, style)

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def domain_sizes(self) -> tuple[int, ...]:
        return self._domain_sizes

    @property
    def style(self) -> InputStyle:
        return self._style

    @property
    def widths(self) -> tuple[int, ...]:
        return self._widths

    @property
    def column_count(self) -> int:
        return len(self._widths)

    @property
    def total_width(self) -> int:
        return self._offsets[-1]

    def block(self, column: int) -> tuple[int, int]:
        return self._offsets[column], self._offsets[column + 1]

    def bit_matrix(self, column: int) -> npt.NDArray[np.float64]:
        """Row c is the encoding of code c."""
        return self._bits[column]

    def encode(self, column: int, code: int) -> npt.NDArray[np.float64]:
        if not 0 <= code < self._domain_sizes[column]:
            raise DictionaryError(f"code {code} outside domain of column {self._names[column]!r}")
        return self._bits[column][code].copy()

    def wildcard_vector(self, column: int) -> npt.NDArray[np.float64]:
        return np.full(self._widths[column], WILDCARD_VALUE)

    def expected_encoding(self, column: int, dist: Union[Tensor, npt.ArrayLike]) -> Tensor:
        probs = dist if isinstance(dist, Tensor) else constant(np.asarray(dist, dtype=np.float64))
        if probs.shape[-1] != self._domain_sizes[column]:
            raise ShapeError(
                f"distribution of length {probs.shape[-1]} for column {self._names[column]!r} "
                f"with domain size {self._domain_sizes[column]}"
            )
        if self._style is InputStyle.BINARY:
            return expected_encoding(dist, self._widths[column])
        if probs.data.ndim == 1:
            return reshape(matmul(reshape(probs, (1, -1)), constant(self._bits[column])), (-1,))
        return matmul(probs, constant(self._bits[column]))

    def encode_batch(self, codes: npt.ArrayLike,
                     wildcard: Optional[npt.ArrayLike] = None) -> npt.NDArray[np.float64]:
        """[B, n] codes (with optional [B, n] wildcard mask) -> [B, total_width] inputs."""
        matrix = np.asarray(codes, dtype=np.int64)
        if matrix.ndim != 2 or matrix.shape[1] != self.column_count:
            raise ShapeError(f"codes of shape {matrix.shape} for {self.column_count} columns")
        skip = None if wildcard is None else np.asarray(wildcard, dtype=bool)
        out = np.empty((matrix.shape[0], self.total_width))
        for i in range(self.column_count):
            lo, hi = self.block(i)
            col = matrix[:, i]
            if skip is not None:
                col = np.where(skip[:, i], 0, col)
            if col.size and (col.min() < 0 or col.max() >= self._domain_sizes[i]):
                raise DictionaryError(f"code outside domain of column {self._names[i]!r}")
            out[:, lo:hi] = self._bits[i][col]
            if skip is not None:
                out[skip[:, i], lo:hi] = WILDCARD_VALUE
        return out

    def wildcard_batch(self, batch: int) -> npt.NDArray[np.float64]:
        return np.full((batch, self.total_width), WILDCARD_VALUE)

    def describe(self) -> dict[str, object]:
        return {
            "names": list(self._names),
            "domain_sizes": list(self._domain_sizes),
            "bit_widths": list(self._widths),
            "style": self._style.value,
        }
