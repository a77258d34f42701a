"""Adam with explicit, serialisable state."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, named_params, lr: float = 2e-4, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr == 0.0:
                continue
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)

    def grad_norms(self) -> dict:
        return {k: float(np.sqrt((p.grad.astype(np.float64) ** 2).sum())) for k, p in self.params.items() if p.grad is not None}

    def state(self) -> dict:
        out = {"t": np.array([self.t], dtype=np.float32)}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"][0])
        for k, p in self.params.items():
            self.m[k] = np.array(state[f"m/{k}"], dtype=p.dtype)
            self.v[k] = np.array(state[f"v/{k}"], dtype=p.dtype)
