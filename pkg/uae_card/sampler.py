"""
Range-query selectivity estimation on a ResMADE model.

Inference: exhaustive enumeration (the exact oracle under the model),
uniform sampling and progressive sampling. Training: Gumbel-Softmax sampling
and differentiable progressive sampling (DPS), whose estimate carries
gradients back to the model parameters.
"""
from __future__ import annotations

import itertools
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import numpy.typing as npt

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import WILDCARD_VALUE
from .errors import RegionTooLargeError, ShapeError, ValidationError
from .interfaces import InterfaceDensityModel

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]
Mask = npt.NDArray[np.bool_]

DEFAULT_ENUMERATION_CAP = 10**6
ZERO_MASS = 1e-300
U_CLAMP = 1e-12
_CHUNK = 1 << 16


class QueryRegion:
    """R^q = R^q_1 x ... x R^q_n as one boolean mask per column."""

    def __init__(self, masks: Sequence[npt.ArrayLike], wildcard: Optional[Sequence[bool]] = None) -> None:
        self._masks: tuple[Mask, ...] = tuple(np.array(m, dtype=bool) for m in masks)
        for m in self._masks:
            if m.ndim != 1 or m.size == 0:
                raise ShapeError("every column mask must be a non-empty vector")
            m.setflags(write=False)
        if wildcard is None:
            self._wildcard = tuple(bool(m.all()) for m in self._masks)
        else:
            if len(wildcard) != len(self._masks):
                raise ShapeError("one wildcard flag per column is required")
            self._wildcard = tuple(bool(w) for w in wildcard)
            for m, w in zip(self._masks, self._wildcard):
                if w and not m.all():
                    raise ValidationError("a wildcard column must allow its whole domain")

    @classmethod
    def full(cls, domain_sizes: Sequence[int]) -> QueryRegion:
        return cls([np.ones(d, dtype=bool) for d in domain_sizes])

    @classmethod
    def point(cls, codes: Sequence[int], domain_sizes: Sequence[int]) -> QueryRegion:
        masks = []
        for c, d in zip(codes, domain_sizes):
            m = np.zeros(d, dtype=bool)
            m[c] = True
            masks.append(m)
        return cls(masks, [False] * len(masks))

    @property
    def masks(self) -> tuple[Mask, ...]:
        return self._masks

    @property
    def wildcard(self) -> tuple[bool, ...]:
        return self._wildcard

    @property
    def column_count(self) -> int:
        return len(self._masks)

    @property
    def is_empty(self) -> bool:
        return any(not m.any() for m in self._masks)

    @property
    def size(self) -> int:
        out = 1
        for m in self._masks:
            out *= int(m.sum())
        return out

    def allowed(self, column: int) -> npt.NDArray[np.int64]:
        return np.flatnonzero(self._masks[column])

    def contains(self, codes: npt.ArrayLike) -> npt.NDArray[np.bool_]:
        """Row-wise membership of a [B, n] code matrix."""
        matrix = np.asarray(codes, dtype=np.int64)
        hit = np.ones(matrix.shape[0], dtype=bool)
        for i, m in enumerate(self._masks):
            if not self._wildcard[i]:
                hit &= m[matrix[:, i]]
        return hit

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QueryRegion):
            return False
        return self._wildcard == other._wildcard and all(
            np.array_equal(a, b) for a, b in zip(self._masks, other._masks)
        ) and len(self._masks) == len(other._masks)

    def __repr__(self) -> str:
        parts = ["*" if w else str(int(m.sum())) for m, w in zip(self._masks, self._wildcard)]
        return f"QueryRegion({' x '.join(parts)})"


@dataclass(frozen=True)
class SamplerConfig:
    tau: float = 1.0
    samples: int = 200
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValidationError(f"temperature must be positive, got {self.tau}")
        if self.samples < 1:
            raise ValidationError(f"sample count must be >= 1, got {self.samples}")


# ----------------------------------------------------------------------
# Gumbel noise
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class GumbelDraw:
    u: Array
    g: Array

    @classmethod
    def from_uniform(cls, u: npt.ArrayLike) -> GumbelDraw:
        clamped = np.clip(np.asarray(u, dtype=np.float64), U_CLAMP, 1.0 - U_CLAMP)
        return cls(clamped, -np.log(-np.log(clamped)))


class InterfaceGumbelSource(ABC):
    @abstractmethod
    def draw(self, shape: tuple[int, ...]) -> GumbelDraw:
        pass


class RandomGumbelSource(InterfaceGumbelSource):
    """Fresh noise from a generator; every draw is kept in `history` for replay."""

    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.history: list[GumbelDraw] = []

    def draw(self, shape: tuple[int, ...]) -> GumbelDraw:
        result = GumbelDraw.from_uniform(self.rng.random(shape))
        self.history.append(result)
        return result


class ReplayGumbelSource(InterfaceGumbelSource):
    """Replays recorded draws in order, so perturbed evaluations see frozen noise."""

    def __init__(self, draws: Sequence[GumbelDraw]) -> None:
        self._draws = list(draws)
        self._next = 0

    def draw(self, shape: tuple[int, ...]) -> GumbelDraw:
        if self._next >= len(self._draws):
            raise ValidationError("replay source exhausted")
        result = self._draws[self._next]
        if result.g.shape != shape:
            raise ShapeError(f"recorded draw of shape {result.g.shape}, requested {shape}")
        self._next += 1
        return result


def gs_sample(tau: float, logpi: Tensor, source: InterfaceGumbelSource) -> Tensor:
    """y = softmax((log pi + g) / tau); masked entries of log pi get exactly 0."""
    if not tau > 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    noise = source.draw(logpi.shape)
    with np.errstate(over="ignore"):
        z = ad.scale(ad.add(logpi, ad.constant(noise.g)), 1.0 / tau)
    return ad.softmax(z)


# ----------------------------------------------------------------------
# Inference estimators
# ----------------------------------------------------------------------

def _last_step(model: InterfaceDensityModel, region: QueryRegion) -> int:
    """Ordering position of the last column that has to be visited (-1 if none)."""
    steps = [model.position[c] for c in range(region.column_count) if not region.wildcard[c]]
    return max(steps, default=-1)


def _prefix(model: InterfaceDensityModel, region: QueryRegion) -> list[int]:
    last = _last_step(model, region)
    return [model.ordering[s] for s in range(last + 1)]


def _check(model: InterfaceDensityModel, region: QueryRegion) -> None:
    if tuple(len(m) for m in region.masks) != model.head_sizes:
        raise ShapeError(f"{region!r} does not match the model's domain sizes {model.head_sizes}")


def exhaustive_estimate(model: InterfaceDensityModel, region: QueryRegion,
                        cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    """Sum of P(x) over every x in the region; trailing wildcard columns sum to 1."""
    _check(model, region)
    if region.is_empty:
        return 0.0
    prefix = _prefix(model, region)
    if not prefix:
        return 1.0
    allowed = [region.allowed(c) for c in prefix]
    size = 1
    for a in allowed:
        size *= len(a)
    if size > cap:
        raise RegionTooLargeError(f"region has {size} tuples, cap is {cap}")
    n = region.column_count
    total = 0.0
    combos = itertools.product(*allowed)
    while True:
        chunk = list(itertools.islice(combos, _CHUNK))
        if not chunk:
            break
        codes = np.zeros((len(chunk), n), dtype=np.int64)
        codes[:, prefix] = np.asarray(chunk, dtype=np.int64)
        total += float(np.exp(model.log_density_batch(codes, prefix)).sum())
    return total


def uniform_sample_estimate(model: InterfaceDensityModel, region: QueryRegion, samples: int,
                            rng: np.random.Generator) -> float:
    """(|R|/S) * sum_s P(x^s) with x^s uniform over the region."""
    _check(model, region)
    if samples < 1:
        raise ValidationError("sample count must be >= 1")
    if region.is_empty:
        return 0.0
    prefix = _prefix(model, region)
    if not prefix:
        return 1.0
    codes = np.zeros((samples, region.column_count), dtype=np.int64)
    size = 1.0
    for c in prefix:
        allowed = region.allowed(c)
        size *= len(allowed)
        codes[:, c] = allowed[rng.integers(0, len(allowed), size=samples)]
    return size * float(np.exp(model.log_density_batch(codes, prefix)).mean())


def _sample_categorical(weights: Array, rng: np.random.Generator) -> npt.NDArray[np.int64]:
    """One draw per row, proportional to non-negative weights with a positive sum."""
    cdf = np.cumsum(weights, axis=1)
    u = rng.random(weights.shape[0])[:, None] * cdf[:, -1:]
    idx = (cdf <= u).sum(axis=1)
    last_positive = weights.shape[1] - 1 - np.argmax(weights[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last_positive).astype(np.int64)


def progressive_sample_estimate(model: InterfaceDensityModel, region: QueryRegion, samples: int,
                                rng: np.random.Generator, skip_wildcards: bool = True) -> float:
    """
    Average over S samples of prod_i P(X_i in R_i | z_<i), each z_i drawn from
    the conditional truncated to R_i. Wildcard columns are skipped (factor 1,
    wildcard token as input) unless skip_wildcards is False, in which case
    they are sampled from their full conditional.
    """
    _check(model, region)
    if samples < 1:
        raise ValidationError("sample count must be >= 1")
    if region.is_empty:
        return 0.0
    prefix = _prefix(model, region)
    if not prefix:
        return 1.0
    enc = model.encoding
    inputs = enc.wildcard_batch(samples)
    prob = np.ones(samples)
    for step, col in enumerate(prefix):
        if region.wildcard[col] and skip_wildcards:
            continue
        logits = model.head(model.hidden(Tensor(inputs)), col)
        probs = ad.softmax(logits).data
        weights = probs * region.masks[col]
        mass = weights.sum(axis=1)
        prob *= np.where(mass < ZERO_MASS, 0.0, mass)
        if step == len(prefix) - 1:
            break
        dead = mass < ZERO_MASS
        if dead.any():
            logger.debug("column %d: %d of %d samples left the region, drawing uniformly",
                         col, int(dead.sum()), samples)
            weights[dead] = region.masks[col]
        codes = _sample_categorical(weights, rng)
        lo, hi = enc.block(col)
        inputs[:, lo:hi] = enc.bit_matrix(col)[codes]
    return float(prob.mean())


# ----------------------------------------------------------------------
# Differentiable progressive sampling
# ----------------------------------------------------------------------

def dps_estimate_batch(model: InterfaceDensityModel, regions: Sequence[QueryRegion], config: SamplerConfig,
                       tape: Optional[Tape], source: InterfaceGumbelSource,
                       skip_wildcards: bool = True) -> Tensor:
    """
    DPS for Q regions at once with S samples each; returns the [Q] vector of
    estimates. Row q*S + s of every intermediate belongs to sample s of query q.
    """
    if not regions:
        raise ValidationError("no regions to estimate")
    for region in regions:
        _check(model, region)
    enc = model.encoding
    n = enc.column_count
    q_count, s_count = len(regions), config.samples
    rows = q_count * s_count

    # per query: ordering position of the last visited column, -1 when nothing to do
    lasts = []
    for region in regions:
        if region.is_empty:
            lasts.append(-1)
            continue
        steps = [model.position[c] for c in range(n) if not region.wildcard[c]]
        lasts.append(max(steps, default=-1))
    last_step = max(lasts)

    blocks: list[Tensor] = [ad.constant(np.full((rows, w), WILDCARD_VALUE)) for w in enc.widths]
    p_hat = ad.constant(np.ones(rows))
    for step in range(last_step + 1):
        col = model.ordering[step]
        active_q = np.array([
            not region.is_empty and step <= last
            and not (region.wildcard[col] and skip_wildcards)
            for region, last in zip(regions, lasts)
        ])
        if not active_q.any():
            continue
        k = model.head_sizes[col]
        active = np.repeat(active_q, s_count)
        mask_rows = np.ones((rows, k), dtype=bool)
        for q, region in enumerate(regions):
            if active_q[q]:
                mask_rows[q * s_count:(q + 1) * s_count] = region.masks[col]
        keep = active.astype(np.float64)

        # conditional of this column given the soft samples so far
        hidden = model.hidden(ad.concat(blocks, axis=-1), tape)
        logp = ad.log_softmax(model.head(hidden, col, tape))
        # in-region mass; a row whose mass vanished contributes 0 from here on
        mass = ad.reduce_sum(ad.multiply(ad.exp(logp), ad.constant(mask_rows)), axis=-1)
        alive = (mass.data >= ZERO_MASS) | ~active
        if not alive.all():
            logger.debug("column %d: %d sample rows have no mass in the region", col, int((~alive).sum()))
        factor = ad.add(ad.multiply(mass, ad.constant(keep * alive)), ad.constant(1.0 - keep))
        p_hat = ad.multiply(p_hat, factor)

        needs_sample = np.array([active_q[q] and step < lasts[q] for q in range(q_count)])
        if not needs_sample.any():
            continue
        # restrict to the region, renormalize, then draw a relaxed one-hot sample
        truncated = ad.log_softmax(ad.masked_fill(logp, ~mask_rows, -np.inf))
        y = gs_sample(config.tau, truncated, source)
        soft = ad.matmul(y, ad.constant(enc.bit_matrix(col)))
        keep_block = np.repeat(keep[:, None], enc.widths[col], axis=1)
        blocks[col] = ad.add(
            ad.multiply(soft, ad.constant(keep_block)),
            ad.constant(WILDCARD_VALUE * (1.0 - keep_block)),
        )

    per_query = ad.reduce_mean(ad.reshape(p_hat, (q_count, s_count)), axis=-1)
    nonempty = np.array([0.0 if r.is_empty else 1.0 for r in regions])
    return ad.multiply(per_query, ad.constant(nonempty))


def dps_estimate(model: InterfaceDensityModel, region: QueryRegion, config: SamplerConfig,
                 tape: Optional[Tape] = None, source: Optional[InterfaceGumbelSource] = None,
                 skip_wildcards: bool = True) -> Tensor:
    """Differentiable selectivity estimate of one region (scalar Tensor)."""
    if source is None:
        source = RandomGumbelSource(np.random.default_rng(config.rng_seed))
    batch = dps_estimate_batch(model, [region], config, tape, source, skip_wildcards)
    return ad.reshape(batch, ())
