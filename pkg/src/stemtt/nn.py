"""Parameter containers and the two layer types everything here is built from."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor, matmul, pad_last, unfold_last


class Module:
    """Tracks Tensor parameters and sub-modules through attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = set(own) ^ set(state)
            raise KeyError(f"parameter name mismatch: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_in, n_out), dtype=np.float32)
        else:
            w = rng.normal(0.0, n_in ** -0.5, (n_in, n_out)).astype(np.float32)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class Conv1d(Module):
    """Conv over the last axis of [..., C_in, T]; 'same'-style auto padding."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = True):
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        w = rng.normal(0.0, (c_in * kernel) ** -0.5, (c_in * kernel, c_out)).astype(np.float32)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True) if bias else None

    def out_len(self, t: int) -> int:
        return -(-t // self.stride)

    def __call__(self, x: Tensor) -> Tensor:
        *lead, c, t = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {c}")
        t_out = self.out_len(t)
        pad_total = max((t_out - 1) * self.stride + self.kernel - t, 0)
        left = pad_total // 2
        if pad_total:
            x = pad_last(x, left, pad_total - left)
        win = unfold_last(x, self.kernel, self.stride)              # [..., T_out, C, k]
        win = win.reshape(*lead, t_out, self.c_in * self.kernel)
        y = matmul(win, self.weight)                                # [..., T_out, C_out]
        if self.bias is not None:
            y = y + self.bias
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
        return y.transpose(axes)                                    # [..., C_out, T_out]
