"""AdamW with decoupled weight decay, bias-corrected."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    """Moment accumulators and hyperparameters for one parameter group."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def init_moments(self, params: list[np.ndarray]) -> None:
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adamw_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """One update, in place on ``params``. Moments update even when lr=0."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/moments length mismatch")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p -= state.lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p)


class AdamW:
    """Optimizer over named Tensor parameters; reads grads off the tensors."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1],
                                    eps=eps, weight_decay=weight_decay)
        self.state.init_moments([p.data for p in self.params])

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(self.state, [p.data for p in self.params], grads)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, m, v in zip(self.names, self.state.m, self.state.v):
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.state.step_count = int(step_count)
        for i, name in enumerate(self.names):
            self.state.m[i][...] = arrays[f"m.{name}"]
            self.state.v[i][...] = arrays[f"v.{name}"]
