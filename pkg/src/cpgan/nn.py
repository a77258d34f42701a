"""Parameter containers and the handful of layers the models are built from."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameters are discovered from attributes in definition order.

    Attributes holding a parameter tensor (see :func:`param`), a ``Module`` or
    a list of modules are walked; dotted names make checkpoints stable.
    Frozen parameters are still listed, with ``requires_grad`` off.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.name == "param":
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def cast(self, mode: str) -> None:
        """Convert every parameter to ``mode`` precision in place."""
        dtype = np.dtype(mode)
        for value in self._all_tensors():
            value.data = value.data.astype(dtype)

    def _all_tensors(self):
        for value in vars(self).values():
            if isinstance(value, Tensor):
                yield value
            elif isinstance(value, Module):
                yield from value._all_tensors()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item._all_tensors()


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True, name="param")


def _init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    return param(rng.standard_normal(shape) * (gain / math.sqrt(fan_in)))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, gain: float = 1.0):
        self.weight = _init(rng, (n_out, n_in), n_in, gain)
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: Optional[int] = None, gain: float = 1.0):
        self.weight = _init(rng, (c_out, c_in, k, k), c_in * k * k, gain)
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LSTM(Module):
    """Single-direction LSTM; gate order (input, forget, cell, output)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.w_ih = _init(rng, (4 * hidden, n_in), n_in)
        self.w_hh = _init(rng, (4 * hidden, hidden), hidden)
        self.bias = param(np.zeros(4 * hidden))

    def step(self, x_t: Tensor, h: Tensor, c: Tensor) -> tuple:
        H = self.hidden
        gates = T.linear(x_t, self.w_ih, self.bias) + T.linear(h, self.w_hh)
        i = T.sigmoid(gates[:, 0:H])
        f = T.sigmoid(gates[:, H : 2 * H])
        g = T.tanh(gates[:, 2 * H : 3 * H])
        o = T.sigmoid(gates[:, 3 * H : 4 * H])
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        return h_new, c_new

    def run(self, xs: list, mask: np.ndarray, reverse: bool = False) -> list:
        """Run over a list of (B, n_in) steps; padded steps (mask 0) hold state at its
        previous value, so a reversed pass over right-padded input starts fresh at
        each sequence's true last token."""
        B = xs[0].shape[0]
        h = T.zeros((B, self.hidden))
        c = T.zeros((B, self.hidden))
        order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
        outs = [None] * len(xs)
        for t in order:
            h_new, c_new = self.step(xs[t], h, c)
            keep = mask[:, t : t + 1]
            if keep.all():
                h, c = h_new, c_new
            else:
                m = T.Tensor(np.broadcast_to(keep, h.shape))
                h = h_new * m + h * (1.0 - m)
                c = c_new * m + c * (1.0 - m)
            outs[t] = h
        return outs
