"""AdamW with decoupled weight decay.

Decay multiplies the parameter by ``1 - lr * weight_decay`` before the
adaptive-moment update, so with zero gradients the parameters shrink by
exactly that factor and nothing else moves. Updates are deterministic:
parameters are visited in registration order and all state lives in
float32 like the parameters themselves.
"""

from __future__ import annotations

import numpy as np

from ._kernels import adamw_update
from .autodiff import Parameter
from .errors import ConfigError, NumericalError


class AdamW:
    def __init__(self, params: list[Parameter], lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 5e-4):
        if lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {betas}")
        if eps <= 0:
            raise ConfigError(f"eps must be > 0, got {eps}")
        if weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """Apply one update from the gradients currently on the parameters.

        Missing gradients count as zero. Non-finite gradients abort the
        step with every parameter and moment left untouched.
        """
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericalError(
                    f"non-finite gradient on parameter {getattr(p, 'name', '?')!r}"
                )
            grads.append(g)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        decay = 1.0 - self.lr * self.weight_decay
        step_size = self.lr / bc1
        sqrt_bc2 = float(np.sqrt(bc2))
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            data = np.ascontiguousarray(p.data)
            adamw_update(data, np.ascontiguousarray(g), m, v, self.beta1,
                         self.beta2, step_size, decay, self.eps, sqrt_bc2)
            p.data = data
