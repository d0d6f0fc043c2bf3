from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import IO, Mapping, Optional, Sequence, Union

from .interfaces import TrainingObserverInterface
from .simple_types import StepRecord

logger = logging.getLogger(__name__)

LOG_HEADER = ("step", "loss", "data_loss", "query_loss", "wall_ms")


class TrainingObserver:
    def __init__(self, observers: Sequence[TrainingObserverInterface] = ()) -> None:
        self._observers = list(observers)

    @property
    def observers(self) -> list[TrainingObserverInterface]:
        return self._observers.copy()

    def attach(self, observer: TrainingObserverInterface) -> None:
        self._observers.append(observer)

    def notify_all(self, record: StepRecord) -> None:
        for observer in self._observers:
            observer.notify(record)

    def epoch_end_all(self, epoch: int, summary: Mapping[str, float]) -> None:
        for observer in self._observers:
            observer.epoch_end(epoch, summary)


class CsvStepLog(TrainingObserverInterface):
    """Per-step CSV: step, loss, data_loss, query_loss, wall_ms."""

    def __init__(self, path: Union[str, Path]) -> None:
        self._path = Path(path)
        self._handle: Optional[IO[str]] = open(self._path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._handle)
        self._writer.writerow(LOG_HEADER)

    def notify(self, record: StepRecord) -> None:
        if self._handle is None:
            return
        self._writer.writerow([
            record.step, repr(record.loss), repr(record.data_loss),
            repr(record.query_loss), f"{record.wall_ms:.3f}",
        ])

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> CsvStepLog:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


class MemoryStepLog(TrainingObserverInterface):
    """Keeps every record and epoch summary; used by evaluation curves and tests."""

    def __init__(self) -> None:
        self.records: list[StepRecord] = []
        self.epochs: list[tuple[int, dict[str, float]]] = []

    def notify(self, record: StepRecord) -> None:
        self.records.append(record)

    def epoch_end(self, epoch: int, summary: Mapping[str, float]) -> None:
        self.epochs.append((epoch, dict(summary)))


class LoggingObserver(TrainingObserverInterface):
    """Reports epoch summaries through the module logger."""

    def notify(self, record: StepRecord) -> None:
        logger.debug("step %d: loss %.6g (data %.6g, query %.6g)",
                     record.step, record.loss, record.data_loss, record.query_loss)

    def epoch_end(self, epoch: int, summary: Mapping[str, float]) -> None:
        parts = ", ".join(f"{k} {v:.6g}" for k, v in sorted(summary.items()))
        logger.info("epoch %d: %s", epoch, parts)
