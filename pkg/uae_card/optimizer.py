from __future__ import annotations

from typing import Mapping

import numpy as np
import numpy.typing as npt

from .errors import ShapeError, ValidationError

Array = npt.NDArray[np.float64]


class Adam:
    """
    Adam without weight decay. Parameters are updated in place, so tapes that
    watch the same arrays keep seeing current values.
    """

    def __init__(self, lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8) -> None:
        if not lr > 0:
            raise ValidationError(f"learning rate must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValidationError("betas must lie in [0, 1)")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}
        self.t = 0

    def step(self, parameters: Mapping[str, Array], gradients: Mapping[str, Array]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, param in parameters.items():
            g = gradients[name]
            if g.shape != param.shape:
                raise ShapeError(f"gradient of {name!r} has shape {g.shape}, parameter {param.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(param)
                self.v[name] = np.zeros_like(param)
            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * g
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(self.v[name] / bc2) + self.epsilon
            param -= (self.lr / bc1) * self.m[name] / denom
