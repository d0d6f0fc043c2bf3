from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np
import numpy.typing as npt

from .autodiff import Tape, Tensor
from .data import InputEncoding
from .simple_types import StepRecord


class InterfaceDensityModel(Protocol):
    """What the samplers need from an autoregressive model."""

    encoding: InputEncoding
    ordering: tuple[int, ...]
    position: list[int]
    head_sizes: tuple[int, ...]

    def hidden(self, batch: Tensor, tape: Optional[Tape] = None) -> Tensor:
        ...

    def head(self, hidden: Tensor, column: int, tape: Optional[Tape] = None) -> Tensor:
        ...

    def log_density_batch(self, codes: npt.ArrayLike,
                          active: Optional[Sequence[int]] = None) -> npt.NDArray[np.float64]:
        ...


class InterfaceOptimizer(Protocol):
    def step(self, parameters: Mapping[str, npt.NDArray[np.float64]],
             gradients: Mapping[str, npt.NDArray[np.float64]]) -> None:
        ...


# Training observer interface
class TrainingObserverInterface(ABC):
    """
    Observer interface for training runs.
    - notify(record): called after every optimizer step
    - epoch_end(epoch, summary): called once per finished epoch
    """

    @abstractmethod
    def notify(self, record: StepRecord) -> None:
        pass

    def epoch_end(self, epoch: int, summary: Mapping[str, float]) -> None:
        """Optional; ignored by default."""
