"""
Binary file formats.

Table ("UAET"): magic, u32 header length, UTF-8 JSON header with the
dictionaries, u64 row count, u32 column count, int32 code matrix.

Model ("UAE1"): magic, u32-length JSON schema block (column names, domain
sizes, bit widths, ordering, input style), u32-length JSON config block,
u32 parameter count, then every parameter as little-endian float64 in
declaration order. All integers are little-endian.
"""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any, BinaryIO, Union

import numpy as np

from .data import ColumnDictionary, EncodedTable, InputEncoding
from .errors import ParseError
from .model import ModelConfig, ResMadeModel
from .simple_types import ColumnKind, InputStyle

logger = logging.getLogger(__name__)

TABLE_MAGIC = b"UAET"
MODEL_MAGIC = b"UAE1"

PathLike = Union[str, Path]


def _write_block(handle: BinaryIO, payload: Any) -> None:
    raw = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    handle.write(struct.pack("<I", len(raw)))
    handle.write(raw)


def _read_exact(handle: BinaryIO, size: int, what: str) -> bytes:
    raw = handle.read(size)
    if len(raw) != size:
        raise ParseError(f"truncated file while reading {what}")
    return raw


def _read_block(handle: BinaryIO, what: str) -> Any:
    (size,) = struct.unpack("<I", _read_exact(handle, 4, what))
    try:
        return json.loads(_read_exact(handle, size, what).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt {what}") from exc


def _check_magic(handle: BinaryIO, magic: bytes, path: PathLike) -> None:
    if handle.read(len(magic)) != magic:
        raise ParseError(f"{path}: not a {magic.decode()} file")


# ----------------------------------------------------------------------
# Tables
# ----------------------------------------------------------------------

def save_table(table: EncodedTable, path: PathLike) -> None:
    header = {
        "columns": [
            {"name": c.name, "kind": c.kind.value, "values": list(c.values)}
            for c in table.schema
        ]
    }
    with open(path, "wb") as handle:
        handle.write(TABLE_MAGIC)
        _write_block(handle, header)
        handle.write(struct.pack("<QI", table.row_count, table.column_count))
        handle.write(np.ascontiguousarray(table.rows, dtype="<i4").tobytes())
    logger.info("saved table %s (%d rows)", path, table.row_count)


def load_table(path: PathLike) -> EncodedTable:
    with open(path, "rb") as handle:
        _check_magic(handle, TABLE_MAGIC, path)
        header = _read_block(handle, "table header")
        rows, cols = struct.unpack("<QI", _read_exact(handle, 12, "table shape"))
        raw = _read_exact(handle, rows * cols * 4, "code matrix")
    schema = [
        ColumnDictionary(c["name"], ColumnKind(c["kind"]), c["values"])
        for c in header["columns"]
    ]
    if len(schema) != cols:
        raise ParseError(f"{path}: header has {len(schema)} columns, matrix has {cols}")
    codes = np.frombuffer(raw, dtype="<i4").reshape(rows, cols)
    return EncodedTable(schema, codes)


# ----------------------------------------------------------------------
# Models
# ----------------------------------------------------------------------

def save_model(model: ResMadeModel, path: PathLike) -> None:
    schema = dict(model.encoding.describe())
    schema["ordering"] = list(model.ordering)
    with open(path, "wb") as handle:
        handle.write(MODEL_MAGIC)
        _write_block(handle, schema)
        _write_block(handle, model.config.to_dict())
        handle.write(struct.pack("<I", len(model.parameters)))
        for array in model.parameters.values():
            handle.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    logger.debug("saved model %s (%d parameters)", path, model.num_parameters())


def load_model(path: PathLike) -> ResMadeModel:
    with open(path, "rb") as handle:
        _check_magic(handle, MODEL_MAGIC, path)
        schema = _read_block(handle, "schema block")
        config = ModelConfig.from_dict(_read_block(handle, "config block"))
        encoding = InputEncoding(schema["names"], schema["domain_sizes"], InputStyle(schema["style"]))
        if list(encoding.widths) != list(schema["bit_widths"]):
            raise ParseError(f"{path}: bit widths do not match the domain sizes")
        skeleton = ResMadeModel(config, encoding)
        (count,) = struct.unpack("<I", _read_exact(handle, 4, "parameter count"))
        if count != len(skeleton.parameters):
            raise ParseError(f"{path}: {count} parameters stored, {len(skeleton.parameters)} expected")
        params = {}
        for name, template in skeleton.parameters.items():
            raw = _read_exact(handle, template.size * 8, f"parameter {name}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(template.shape).astype(np.float64)
        if handle.read(1):
            raise ParseError(f"{path}: trailing bytes after the parameters")
    return ResMadeModel(config, encoding, params)
