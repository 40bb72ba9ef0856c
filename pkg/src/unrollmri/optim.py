"""First-order optimizers over Parameter lists.

State is kept per parameter name so it can round-trip through checkpoints.
A parameter whose grad is None contributes a zero gradient for that step.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter


class Optimizer:
    def __init__(self, params: list[Parameter], lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params = list(params)
        self.lr = float(lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grad(self, p: Parameter) -> np.ndarray:
        if p.grad is None:
            return np.zeros_like(p.value)
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
        return p.grad

    def step(self) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict:
        raise NotImplementedError

    def load_state_dict(self, state: dict) -> None:
        raise NotImplementedError


class RmsProp(Optimizer):
    """RMSProp with a running mean of squared gradients:

        ms   <- decay * ms + (1 - decay) * g^2
        p    <- p - lr * g / sqrt(ms + eps)
    """

    def __init__(self, params: list[Parameter], lr: float = 1e-4,
                 decay: float = 0.99, eps: float = 1e-8):
        super().__init__(params, lr)
        self.decay = decay
        self.eps = eps
        self.ms = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self) -> None:
        for p in self.params:
            g = self._grad(p)
            ms = self.ms[p.name]
            ms *= self.decay
            ms += (1.0 - self.decay) * g * g
            p.value -= self.lr * g / np.sqrt(ms + self.eps)

    def state_dict(self) -> dict:
        return {"kind": "rmsprop", "lr": self.lr, "decay": self.decay, "eps": self.eps,
                "ms": {k: v.copy() for k, v in self.ms.items()}}

    def load_state_dict(self, state: dict) -> None:
        if state.get("kind") != "rmsprop":
            raise ValueError("optimizer state kind mismatch")
        self.lr, self.decay, self.eps = state["lr"], state["decay"], state["eps"]
        for k, v in state["ms"].items():
            self.ms[k] = np.array(v, dtype=np.float64).reshape(self.ms[k].shape)


class Adam(Optimizer):
    """Adam with bias correction; eps sits outside the square root, so the
    first step with a constant gradient moves each coordinate by about lr."""

    def __init__(self, params: list[Parameter], lr: float = 5e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p in self.params:
            g = self._grad(p)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "t": self.t,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        if state.get("kind") != "adam":
            raise ValueError("optimizer state kind mismatch")
        self.lr, self.beta1, self.beta2 = state["lr"], state["beta1"], state["beta2"]
        self.eps, self.t = state["eps"], state["t"]
        for k in state["m"]:
            self.m[k] = np.array(state["m"][k], dtype=np.float64).reshape(self.m[k].shape)
            self.v[k] = np.array(state["v"][k], dtype=np.float64).reshape(self.v[k].shape)
