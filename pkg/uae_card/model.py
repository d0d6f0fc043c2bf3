"""
ResMADE: a masked residual MLP whose connectivity makes the logits of every
column depend only on the columns placed before it in the ordering.

Degrees: input bits of the column at ordering position j carry degree j,
hidden unit k carries degree k mod (n-1), the head of the column at position
i reads hidden units of degree < i. Residual blocks keep degrees unchanged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np
import numpy.typing as npt

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import InputEncoding
from .errors import DictionaryError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]
Mask = npt.NDArray[np.bool_]

DEFAULT_WILDCARD_RATE = 0.25


@dataclass(frozen=True)
class ModelConfig:
    hidden_layers: int = 2
    hidden_units: int = 128
    ordering: Optional[tuple[int, ...]] = None  # ordering[k] = column sampled at step k
    residual: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden_layers < 1:
            raise ValidationError("hidden_layers must be >= 1")
        if self.hidden_units < 1:
            raise ValidationError("hidden_units must be >= 1")
        if self.ordering is not None and sorted(self.ordering) != list(range(len(self.ordering))):
            raise ValidationError(f"ordering {self.ordering} is not a permutation")

    def resolve_ordering(self, n: int) -> tuple[int, ...]:
        if self.ordering is None:
            return tuple(range(n))
        if len(self.ordering) != n:
            raise ValidationError(f"ordering has {len(self.ordering)} entries for {n} columns")
        return self.ordering

    def to_dict(self) -> dict[str, object]:
        return {
            "hidden_layers": self.hidden_layers,
            "hidden_units": self.hidden_units,
            "ordering": None if self.ordering is None else list(self.ordering),
            "residual": self.residual,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ModelConfig:
        ordering = raw.get("ordering")
        return cls(
            hidden_layers=int(raw["hidden_layers"]),
            hidden_units=int(raw["hidden_units"]),
            ordering=None if ordering is None else tuple(int(x) for x in ordering),
            residual=bool(raw["residual"]),
            seed=int(raw["seed"]),
        )


class ResMadeModel:
    """
    Parameters live in `parameters` (name -> float64 array, declaration order).
    Their arrays are updated in place by the optimizer, so a Tape watching them
    always sees the current values.
    """

    def __init__(self, config: ModelConfig, encoding: InputEncoding,
                 parameters: Optional[dict[str, Array]] = None) -> None:
        self.config = config
        self.encoding = encoding
        n = encoding.column_count
        self.ordering = config.resolve_ordering(n)
        self.position = [0] * n
        for step, column in enumerate(self.ordering):
            self.position[column] = step
        self.head_sizes = tuple(encoding.domain_sizes)
        self.head_offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.head_sizes)]))
        self.masks = self._build_masks()
        fresh = self._init_parameters()
        if parameters is None:
            self.parameters = fresh
        else:
            self.parameters = {}
            for name, init in fresh.items():
                given = parameters.get(name)
                if given is None or given.shape != init.shape:
                    raise ShapeError(f"parameter {name!r} missing or of wrong shape")
                self.parameters[name] = np.array(given, dtype=np.float64)

    @classmethod
    def build(cls, config: ModelConfig, encoding: InputEncoding) -> ResMadeModel:
        model = cls(config, encoding)
        logger.debug("built ResMADE with %d parameters", model.num_parameters())
        return model

    # ------------------------------------------------------------------
    # Structure
    # ------------------------------------------------------------------

    def _layer_shapes(self) -> list[tuple[str, int, int]]:
        h = self.config.hidden_units
        shapes = [("input", self.encoding.total_width, h)]
        for b in range(self.config.hidden_layers - 1):
            if self.config.residual:
                shapes.append((f"block{b}.0", h, h))
                shapes.append((f"block{b}.1", h, h))
            else:
                shapes.append((f"hidden{b}", h, h))
        shapes.append(("output", h, self.head_offsets[-1]))
        return shapes

    def _build_masks(self) -> dict[str, Mask]:
        n = self.encoding.column_count
        h = self.config.hidden_units
        in_degree = np.concatenate([
            np.full(w, self.position[i]) for i, w in enumerate(self.encoding.widths)
        ])
        if n > 1:
            hidden_degree = np.arange(h) % (n - 1)
        else:
            hidden_degree = np.full(h, -1)
        out_degree = np.concatenate([
            np.full(size, self.position[i]) for i, size in enumerate(self.head_sizes)
        ])
        masks: dict[str, Mask] = {}
        for name, _, _ in self._layer_shapes():
            if name == "input":
                masks[name] = in_degree[:, None] <= hidden_degree[None, :]
            elif name == "output":
                masks[name] = hidden_degree[:, None] < out_degree[None, :]
            else:
                masks[name] = hidden_degree[:, None] <= hidden_degree[None, :]
        return masks

    def _init_parameters(self) -> dict[str, Array]:
        rng = np.random.default_rng(self.config.seed)
        params: dict[str, Array] = {}
        for name, fan_in, fan_out in self._layer_shapes():
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"{name}.bias"] = rng.uniform(-bound, bound, size=fan_out)
        return params

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters.values()))

    def size_bytes(self, bytes_per_value: int = 4) -> int:
        return self.num_parameters() * bytes_per_value

    # ------------------------------------------------------------------
    # Forward pass
    # ------------------------------------------------------------------

    def _param(self, name: str, tape: Optional[Tape]) -> Tensor:
        array = self.parameters[name]
        return tape.watch(array) if tape is not None else Tensor(array)

    def _linear(self, name: str, x: Tensor, tape: Optional[Tape],
                columns: Optional[tuple[int, int]] = None) -> Tensor:
        weight = self._param(f"{name}.weight", tape)
        bias = self._param(f"{name}.bias", tape)
        mask = self.masks[name]
        if columns is not None:
            lo, hi = columns
            weight = ad.slice_last(weight, lo, hi)
            bias = ad.slice_last(bias, lo, hi)
            mask = mask[:, lo:hi]
        return ad.add(ad.matmul(x, ad.multiply(weight, ad.constant(mask))), bias)

    def hidden(self, batch: Tensor, tape: Optional[Tape] = None) -> Tensor:
        if batch.data.ndim != 2 or batch.shape[1] != self.encoding.total_width:
            raise ShapeError(f"batch of shape {batch.shape}, expected [B, {self.encoding.total_width}]")
        h = self._linear("input", batch, tape)
        for b in range(self.config.hidden_layers - 1):
            if self.config.residual:
                inner = self._linear(f"block{b}.0", ad.relu(h), tape)
                inner = self._linear(f"block{b}.1", ad.relu(inner), tape)
                h = ad.add(h, inner)
            else:
                h = self._linear(f"hidden{b}", ad.relu(h), tape)
        return ad.relu(h)

    def head(self, hidden: Tensor, column: int, tape: Optional[Tape] = None) -> Tensor:
        """Logits [B, |A_column|] of one column from the hidden representation."""
        lo, hi = self.head_offsets[column], self.head_offsets[column + 1]
        return self._linear("output", hidden, tape, columns=(lo, hi))

    def forward(self, batch: Tensor, tape: Optional[Tape] = None) -> list[Tensor]:
        """Per-column logits, indexed by natural column number."""
        h = self.hidden(batch, tape)
        out = self._linear("output", h, tape)
        return [ad.slice_last(out, self.head_offsets[i], self.head_offsets[i + 1])
                for i in range(self.encoding.column_count)]

    def __call__(self, batch: npt.ArrayLike) -> list[Tensor]:
        return self.forward(Tensor(batch))

    # ------------------------------------------------------------------
    # Losses and densities
    # ------------------------------------------------------------------

    def nll_loss(self, codes: npt.ArrayLike, tape: Optional[Tape] = None,
                 rng: Optional[np.random.Generator] = None,
                 wildcard_rate: float = 0.0) -> Tensor:
        """
        Mean over the batch of -sum_i log P(x_i | x_<i), natural log.
        With wildcard_rate > 0 each cell is replaced by its column's wildcard
        token with that probability and left out of the sum.
        """
        matrix = np.asarray(codes, dtype=np.int64)
        batch, n = matrix.shape
        if wildcard_rate > 0.0:
            if rng is None:
                raise ValidationError("wildcard skipping needs a random generator")
            skip = rng.random((batch, n)) < wildcard_rate
        else:
            skip = np.zeros((batch, n), dtype=bool)
        inputs = Tensor(self.encoding.encode_batch(matrix, skip))
        logits = self.forward(inputs, tape)
        total: Optional[Tensor] = None
        for i in range(n):
            keep = ~skip[:, i]
            if not keep.any():
                continue
            picked = ad.gather(ad.log_softmax(logits[i]), matrix[:, i])
            term = ad.multiply(picked, ad.constant(keep.astype(np.float64)))
            total = term if total is None else ad.add(total, term)
        if total is None:
            return ad.constant(0.0)
        return ad.scale(ad.reduce_mean(total), -1.0)

    def log_density_batch(self, codes: npt.ArrayLike,
                          active: Optional[Sequence[int]] = None) -> npt.NDArray[np.float64]:
        """
        Log P of every row with its own values as inputs, summed over the `active` columns
        (all columns by default). Columns outside `active` that come after
        every active column in the ordering must be marginalized, so their
        input is the wildcard token.
        """
        matrix = np.asarray(codes, dtype=np.int64)
        n = self.encoding.column_count
        cols = list(range(n)) if active is None else list(active)
        last = max((self.position[c] for c in cols), default=-1)
        wildcard = np.zeros(matrix.shape, dtype=bool)
        for c in range(n):
            if self.position[c] > last:
                wildcard[:, c] = True
        for c in cols:
            if matrix.size and (matrix[:, c].min() < 0 or matrix[:, c].max() >= self.head_sizes[c]):
                raise DictionaryError(f"code outside domain of column {self.encoding.names[c]!r}")
        logits = self.forward(Tensor(self.encoding.encode_batch(matrix, wildcard)))
        total = np.zeros(matrix.shape[0])
        rows = np.arange(matrix.shape[0])
        for c in cols:
            total += ad.log_softmax(logits[c]).data[rows, matrix[:, c]]
        return total

    def density(self, codes: Sequence[int]) -> float:
        """P(x) of one fully specified tuple."""
        row = np.asarray(codes, dtype=np.int64).reshape(1, -1)
        if row.shape[1] != self.encoding.column_count:
            raise ShapeError(f"tuple of {row.shape[1]} codes for {self.encoding.column_count} columns")
        return float(np.exp(self.log_density_batch(row)[0]))

    def copy(self) -> ResMadeModel:
        return ResMadeModel(self.config, self.encoding, {k: v.copy() for k, v in self.parameters.items()})


def build(config: ModelConfig, encoding: InputEncoding) -> ResMadeModel:
    return ResMadeModel.build(config, encoding)
