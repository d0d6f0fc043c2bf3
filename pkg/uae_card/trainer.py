"""
Hybrid training: L = L_data + lambda * L_query over one parameter set.

L_data is the wildcard-skipping negative log-likelihood of a row batch.
L_query is the mean discrepancy between the true selectivity of a labeled
query batch and its differentiable progressive-sampling estimate.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import numpy.typing as npt

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import EncodedTable
from .errors import ShapeError, ValidationError, WorkloadError
from .metrics import floored_qerror, qerror
from .model import DEFAULT_WILDCARD_RATE, ResMadeModel
from .interfaces import InterfaceOptimizer
from .optimizer import Adam
from .persistence import save_model
from .report import evaluate
from .sampler import InterfaceGumbelSource, QueryRegion, RandomGumbelSource, SamplerConfig, dps_estimate_batch
from .simple_types import Discrepancy, StepRecord, TrainingMode
from .training_observer import TrainingObserver
from .workload import LabeledQuery, to_region

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]

DEFAULT_REFINE_EPOCHS = 15

__all__ = [
    "TrainingConfig", "HybridTrainer", "qerror", "floored_qerror", "qerror_loss", "rmse_loss",
    "query_loss", "hybrid_train", "incremental_ingest_data", "incremental_ingest_workload",
]


@dataclass(frozen=True)
class TrainingConfig:
    lam: float = 1e-4
    data_batch: int = 512
    query_batch: int = 64
    epochs: int = 20
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    mode: TrainingMode = TrainingMode.HYBRID
    discrepancy: Discrepancy = Discrepancy.QERROR
    wildcard_rate: float = DEFAULT_WILDCARD_RATE
    seed: int = 0
    eval_queries: tuple[LabeledQuery, ...] = ()
    eval_samples: int = 200

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if self.data_batch < 1 or self.query_batch < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if not 0.0 <= self.wildcard_rate < 1.0:
            raise ValidationError(f"wildcard rate must lie in [0, 1), got {self.wildcard_rate}")


# ----------------------------------------------------------------------
# Query loss
# ----------------------------------------------------------------------

def qerror_loss(estimates: Tensor, true_sel: npt.ArrayLike, row_count: int) -> Tensor:
    """
    Mean q-error of a [Q] estimate vector. Estimates are floored at 1/|T|,
    true selectivities at one tuple. Ties at every max go to the constant
    side, so est == true has gradient 0.
    """
    floor = 1.0 / row_count
    truth = np.maximum(np.asarray(true_sel, dtype=np.float64), floor)
    if truth.shape != estimates.shape:
        raise ShapeError(f"labels of shape {truth.shape} for estimates of shape {estimates.shape}")
    est = ad.maximum(estimates, floor)
    ratio = ad.divide(est, ad.constant(truth))
    q = ad.maximum(ad.maximum(ratio, ad.reciprocal(ratio)), 1.0)
    return ad.reduce_mean(q)


def rmse_loss(estimates: Tensor, true_sel: npt.ArrayLike) -> Tensor:
    truth = ad.constant(np.asarray(true_sel, dtype=np.float64))
    diff = ad.subtract(estimates, truth)
    return ad.sqrt(ad.reduce_mean(ad.multiply(diff, diff)))


def _discrepancy(kind: Discrepancy, estimates: Tensor, true_sel: Array, row_count: int) -> Tensor:
    if kind is Discrepancy.RMSE:
        return rmse_loss(estimates, true_sel)
    return qerror_loss(estimates, true_sel, row_count)


def query_loss(model: ResMadeModel, batch: Sequence[LabeledQuery], table: EncodedTable,
               sampler: SamplerConfig, tape: Optional[Tape] = None,
               source: Optional[InterfaceGumbelSource] = None,
               discrepancy: Discrepancy = Discrepancy.QERROR) -> Tensor:
    """Mean discrepancy between true selectivities and DPS estimates of a query batch."""
    if not batch:
        raise WorkloadError("empty query batch")
    regions = [to_region(q.query, table) for q in batch]
    sels = np.array([q.selectivity(table.row_count) for q in batch])
    return _query_loss(model, regions, sels, table.row_count, sampler, tape, source, discrepancy)


def _query_loss(model: ResMadeModel, regions: Sequence[QueryRegion], sels: Array, row_count: int,
                sampler: SamplerConfig, tape: Optional[Tape],
                source: Optional[InterfaceGumbelSource], discrepancy: Discrepancy) -> Tensor:
    if source is None:
        source = RandomGumbelSource(np.random.default_rng(sampler.rng_seed))
    estimates = dps_estimate_batch(model, regions, sampler, tape, source)
    return _discrepancy(discrepancy, estimates, sels, row_count)


# ----------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------

def _gradients(model: ResMadeModel, tape: Tape, loss: Tensor) -> Optional[dict[str, Array]]:
    if not loss.requires_grad:
        return None
    tape.backward(loss)
    return {name: tape.gradient(array) for name, array in model.parameters.items()}


class HybridTrainer:
    """
    One optimizer step per data batch (hybrid, data-only) or per query batch
    (query-only). The data path, the query-batch order and the Gumbel noise
    draw from three independent streams of `config.seed`, so the data path
    is the same in every mode.
    """

    def __init__(self, model: ResMadeModel, table: EncodedTable,
                 workload: Sequence[LabeledQuery], config: TrainingConfig,
                 observer: Optional[TrainingObserver] = None,
                 checkpoint_dir: Optional[Union[str, Path]] = None) -> None:
        if table.column_count != model.encoding.column_count or \
                tuple(table.domain_sizes) != model.encoding.domain_sizes:
            raise ValidationError("table schema does not match the model")
        if table.row_count == 0:
            raise ValidationError("training needs a non-empty table")
        if config.mode is not TrainingMode.DATA_ONLY and not workload:
            raise WorkloadError(f"{config.mode.value} training needs a non-empty workload")
        self.model = model
        self.table = table
        self.workload = list(workload) if config.mode is not TrainingMode.DATA_ONLY else []
        self.config = config
        self.observer = observer or TrainingObserver()
        self.checkpoint_dir = None if checkpoint_dir is None else Path(checkpoint_dir)
        self.optimizer: InterfaceOptimizer = Adam(config.lr, config.beta1, config.beta2, config.epsilon)
        data_seq, query_seq, noise_seq = np.random.SeedSequence(config.seed).spawn(3)
        self.data_rng = np.random.default_rng(data_seq)
        self.query_rng = np.random.default_rng(query_seq)
        self.noise_rng = np.random.default_rng(noise_seq)
        self.regions = [to_region(q.query, table) for q in self.workload]
        self.sels = np.array([q.selectivity(table.row_count) for q in self.workload])
        self.step_count = 0
        self._query_order: npt.NDArray[np.int64] = np.zeros(0, dtype=np.int64)
        self._query_cursor = 0

    def _next_query_batch(self) -> npt.NDArray[np.int64]:
        """Walks a permutation of the workload, reshuffling after each pass."""
        picked: list[int] = []
        while len(picked) < min(self.config.query_batch, len(self.workload)):
            if self._query_cursor >= len(self._query_order):
                self._query_order = self.query_rng.permutation(len(self.workload))
                self._query_cursor = 0
            take = min(self.config.query_batch - len(picked), len(self._query_order) - self._query_cursor)
            picked.extend(self._query_order[self._query_cursor:self._query_cursor + take].tolist())
            self._query_cursor += take
        return np.asarray(picked, dtype=np.int64)

    def _data_part(self, rows: npt.NDArray[np.int32]) -> tuple[float, Optional[dict[str, Array]]]:
        tape = Tape()
        loss = self.model.nll_loss(rows, tape, self.data_rng, self.config.wildcard_rate)
        return loss.item(), _gradients(self.model, tape, loss)

    def _query_part(self, idx: npt.NDArray[np.int64]) -> tuple[float, Optional[dict[str, Array]]]:
        tape = Tape()
        source = RandomGumbelSource(self.noise_rng)
        loss = _query_loss(
            self.model, [self.regions[i] for i in idx], self.sels[idx], self.table.row_count,
            self.config.sampler, tape, source, self.config.discrepancy,
        )
        return loss.item(), _gradients(self.model, tape, loss)

    def step(self, rows: Optional[npt.NDArray[np.int32]], epoch: int) -> StepRecord:
        start = time.perf_counter()
        mode = self.config.mode
        data_loss, query_loss_value = 0.0, 0.0
        grads: Optional[dict[str, Array]] = None
        if mode is not TrainingMode.QUERY_ONLY:
            if rows is None:
                raise ValidationError(f"{mode.value} steps need a row batch")
            data_loss, grads = self._data_part(rows)
        if mode is not TrainingMode.DATA_ONLY:
            query_loss_value, query_grads = self._query_part(self._next_query_batch())
            if mode is TrainingMode.QUERY_ONLY:
                grads = query_grads
            elif query_grads is not None and self.config.lam != 0.0:
                if grads is None:
                    grads = {k: self.config.lam * g for k, g in query_grads.items()}
                else:
                    grads = {k: grads[k] + self.config.lam * query_grads[k] for k in grads}
        if mode is TrainingMode.QUERY_ONLY:
            total = query_loss_value
        else:
            total = data_loss + self.config.lam * query_loss_value
        if not math.isfinite(total):
            logger.warning("step %d: non-finite loss %r", self.step_count, total)
        if grads is not None:
            self.optimizer.step(self.model.parameters, grads)
        self.step_count += 1
        record = StepRecord(self.step_count, epoch, total, data_loss, query_loss_value,
                            (time.perf_counter() - start) * 1000.0)
        self.observer.notify_all(record)
        return record

    def run_epoch(self, epoch: int) -> list[StepRecord]:
        records = []
        if self.config.mode is TrainingMode.QUERY_ONLY:
            steps = math.ceil(len(self.workload) / self.config.query_batch)
            for _ in range(steps):
                records.append(self.step(None, epoch))
        else:
            order = self.data_rng.permutation(self.table.row_count)
            for lo in range(0, len(order), self.config.data_batch):
                rows = self.table.rows[order[lo:lo + self.config.data_batch]]
                records.append(self.step(rows, epoch))
        return records

    def _epoch_summary(self, records: Sequence[StepRecord]) -> dict[str, float]:
        summary = {
            "loss": float(np.mean([r.loss for r in records])) if records else 0.0,
            "data_loss": float(np.mean([r.data_loss for r in records])) if records else 0.0,
            "query_loss": float(np.mean([r.query_loss for r in records])) if records else 0.0,
        }
        if self.config.eval_queries:
            _, report = evaluate(self.model, self.table, self.config.eval_queries,
                                 self.config.eval_samples, self.config.seed)
            summary["max_qerror"] = report.max
            summary["mean_qerror"] = report.mean
        return summary

    def train(self) -> ResMadeModel:
        if self.checkpoint_dir is not None:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        logger.info("%s training: %d epochs, %d rows, %d queries",
                    self.config.mode.value, self.config.epochs, self.table.row_count, len(self.workload))
        for epoch in range(1, self.config.epochs + 1):
            records = self.run_epoch(epoch)
            self.observer.epoch_end_all(epoch, self._epoch_summary(records))
            if self.checkpoint_dir is not None:
                save_model(self.model, self.checkpoint_dir / f"epoch{epoch:03d}.uae")
        return self.model


def hybrid_train(model: ResMadeModel, table: EncodedTable, workload: Sequence[LabeledQuery],
                 config: TrainingConfig, observer: Optional[TrainingObserver] = None,
                 checkpoint_dir: Optional[Union[str, Path]] = None) -> ResMadeModel:
    """Trains `model` in place and returns it."""
    return HybridTrainer(model, table, workload, config, observer, checkpoint_dir).train()


# ----------------------------------------------------------------------
# Incremental refinement
# ----------------------------------------------------------------------

def incremental_ingest_data(model: ResMadeModel, table: EncodedTable, new_rows: npt.ArrayLike,
                            epochs: int, config: Optional[TrainingConfig] = None,
                            observer: Optional[TrainingObserver] = None) -> ResMadeModel:
    """
    Continues data-only training on the new rows alone. Rows are codes under
    the dictionaries of `table`; raw values go through `table.encode_rows`
    first, which refuses values outside the dictionaries.
    """
    codes = np.asarray(new_rows, dtype=np.int32).reshape(-1, table.column_count)
    if codes.shape[0] == 0 or epochs == 0:
        return model
    fresh = EncodedTable(table.schema, codes)
    base = config or TrainingConfig()
    cfg = TrainingConfig(
        lam=0.0, data_batch=base.data_batch, epochs=epochs, lr=base.lr, beta1=base.beta1,
        beta2=base.beta2, epsilon=base.epsilon, mode=TrainingMode.DATA_ONLY,
        wildcard_rate=base.wildcard_rate, seed=base.seed,
    )
    logger.info("refining on %d new rows for %d epochs", fresh.row_count, epochs)
    return hybrid_train(model, fresh, [], cfg, observer)


def incremental_ingest_workload(model: ResMadeModel, table: EncodedTable,
                                new_queries: Sequence[LabeledQuery],
                                epochs: int = DEFAULT_REFINE_EPOCHS,
                                config: Optional[TrainingConfig] = None,
                                observer: Optional[TrainingObserver] = None) -> ResMadeModel:
    """Query-only refinement on a new labeled workload."""
    if not new_queries:
        raise WorkloadError("refinement needs a non-empty workload")
    if epochs == 0:
        return model
    base = config or TrainingConfig()
    cfg = TrainingConfig(
        lam=base.lam, query_batch=base.query_batch, epochs=epochs, lr=base.lr, beta1=base.beta1,
        beta2=base.beta2, epsilon=base.epsilon, sampler=base.sampler, mode=TrainingMode.QUERY_ONLY,
        discrepancy=base.discrepancy, seed=base.seed,
    )
    logger.info("refining on %d new queries for %d epochs", len(new_queries), epochs)
    return hybrid_train(model, table, new_queries, cfg, observer)
