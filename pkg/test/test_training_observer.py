import csv
import logging
from pathlib import Path
from unittest.mock import Mock

import pytest

from uae_card.interfaces import TrainingObserverInterface
from uae_card.simple_types import StepRecord
from uae_card.training_observer import CsvStepLog, LoggingObserver, MemoryStepLog, TrainingObserver


def _make_observer() -> Mock:
    return Mock(spec=TrainingObserverInterface)


def _record(step: int = 1, loss: float = 0.5) -> StepRecord:
    return StepRecord(step=step, epoch=1, loss=loss, data_loss=0.25, query_loss=2.5, wall_ms=1.0)


def test_notify_all_forwards_record_to_every_observer() -> None:
    observer1 = _make_observer()
    observer2 = _make_observer()
    training_observer = TrainingObserver([observer1, observer2])

    record = _record()
    training_observer.notify_all(record)

    observer1.notify.assert_called_once_with(record)
    observer2.notify.assert_called_once_with(record)


def test_epoch_end_all_forwards_summary() -> None:
    observer1 = _make_observer()
    training_observer = TrainingObserver([observer1])

    training_observer.epoch_end_all(3, {"loss": 1.0})

    observer1.epoch_end.assert_called_once_with(3, {"loss": 1.0})
    observer1.notify.assert_not_called()


def test_without_observers_nothing_happens() -> None:
    TrainingObserver().notify_all(_record())


def test_observers_property_returns_copy() -> None:
    observer1 = _make_observer()
    training_observer = TrainingObserver([observer1])

    external = training_observer.observers
    assert external == [observer1]
    external.append(_make_observer())

    # accessing _observers is OK in a test
    assert len(training_observer._observers) == 1
    training_observer.attach(_make_observer())
    assert len(training_observer.observers) == 2


def test_default_epoch_end_is_a_no_op() -> None:
    class StepsOnly(TrainingObserverInterface):
        def __init__(self) -> None:
            self.steps: list[int] = []

        def notify(self, record: StepRecord) -> None:
            self.steps.append(record.step)

    observer = StepsOnly()
    training_observer = TrainingObserver([observer])
    training_observer.notify_all(_record(step=7))
    training_observer.epoch_end_all(1, {})
    assert observer.steps == [7]


def test_csv_step_log_writes_header_and_rows(tmp_path: Path) -> None:
    path = tmp_path / "log.csv"
    with CsvStepLog(path) as log:
        log.notify(_record(step=1, loss=0.1))
        log.notify(_record(step=2, loss=1 / 3))
    log.notify(_record(step=3))  # closed logs ignore records

    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["step", "loss", "data_loss", "query_loss", "wall_ms"]
    assert len(rows) == 3
    assert rows[2][0] == "2"
    assert float(rows[2][1]) == 1 / 3
    assert rows[1][4] == "1.000"


def test_memory_step_log_keeps_everything() -> None:
    log = MemoryStepLog()
    log.notify(_record(step=1))
    log.epoch_end(1, {"loss": 0.5})
    assert [r.step for r in log.records] == [1]
    assert log.epochs == [(1, {"loss": 0.5})]


def test_logging_observer_reports_epochs(caplog: pytest.LogCaptureFixture) -> None:
    with caplog.at_level(logging.INFO, logger="uae_card.training_observer"):
        LoggingObserver().epoch_end(2, {"loss": 0.125})
    assert "epoch 2" in caplog.text
    assert "loss 0.125" in caplog.text
