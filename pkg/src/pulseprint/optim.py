"""Adam optimizer over named parameter dicts, plus the step LR schedule.

Parameters are engine tensors updated in place through their .data buffers,
so every module holding a reference sees the update. Gradients are read
from the tensors' .grad fields populated by a backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ValueError("Adam eps must be positive")


class Adam:
    """Standard Adam with bias correction and no weight decay."""

    def __init__(self, params: dict[str, Tensor], config: AdamConfig | None = None):
        config = config or AdamConfig()
        config.validate()
        self.config = config
        self.params = dict(params)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        """One update from the .grad fields, which are consumed: each step
        needs a fresh backward pass, and stale gradients cannot leak into
        the next update."""
        self.t += 1
        b1, b2, eps = self.config.beta1, self.config.beta2, self.config.eps
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise ValueError(f"parameter {name!r} has no gradient; run backward first")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
            p.data -= update.astype(p.data.dtype)
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.params:
            for store, prefix in ((self.m, "adam.m."), (self.v, "adam.v.")):
                key = prefix + name
                if key not in arrays:
                    raise ValueError(f"missing optimizer state {key!r}")
                if arrays[key].shape != store[name].shape:
                    raise ValueError(f"optimizer state shape mismatch for {key!r}")
                store[name][...] = arrays[key]


def lr_schedule(epoch: int, base_lr: float, step_epochs: int, factor: float) -> float:
    """Stepwise decay: base_lr * factor^floor(epoch / step_epochs)."""
    if step_epochs < 1:
        raise ValueError("step_epochs must be at least 1")
    return base_lr * factor ** (epoch // step_epochs)
