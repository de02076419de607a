"""Timbre encoding and the three disentanglement objectives: the adversarial
timbre-from-content regression, the cross-stem orthogonality penalty, and the
batch-variance collapse guard."""

from __future__ import annotations

import numpy as np

from .nn import Conv1d, Linear, Module
from .tensor import Tensor, gelu, mean, relu, sqrt

N_PAIRS_4 = 6  # unordered stem pairs for 4 voices


class TimbreEncoder(Module):
    """1-D conv stack over time with global average pooling -> tau [d_tau]."""

    def __init__(self, rng, d_z: int = 16, ch: int = 32, d_tau: int = 16,
                 kernel: int = 5):
        self.conv1 = Conv1d(d_z, ch, kernel, rng, stride=2)
        self.conv2 = Conv1d(ch, ch, kernel, rng, stride=2)
        self.conv3 = Conv1d(ch, ch, 3, rng)
        self.out = Linear(ch, d_tau, rng)
        # stacked receptive field in latent frames
        self.receptive_field = 1 + (kernel - 1) + (kernel - 1) * 2 + (3 - 1) * 4

    def __call__(self, z: Tensor) -> Tensor:
        """[B, L_ref, d_z] -> [B, d_tau]; reference length is arbitrary."""
        if z.ndim != 3:
            raise ValueError("expected [B, L_ref, d_z]")
        if z.shape[1] < self.receptive_field:
            raise ValueError(f"reference shorter than the receptive field "
                             f"({z.shape[1]} < {self.receptive_field} frames)")
        h = z.transpose(0, 2, 1)
        h = gelu(self.conv1(h))
        h = gelu(self.conv2(h))
        h = gelu(self.conv3(h))
        pooled = h.mean(axis=2)
        return self.out(pooled)


class TimbreClassifier(Module):
    """Adversary predicting tau from a content embedding (time-pooled MLP)."""

    def __init__(self, rng, d_c: int = 16, hidden: int = 32, d_tau: int = 16):
        self.fc1 = Linear(d_c, hidden, rng)
        self.fc2 = Linear(hidden, d_tau, rng)

    def __call__(self, c: Tensor) -> Tensor:
        """[B, L, d_c] -> [B, d_tau]."""
        pooled = c.mean(axis=1)
        return self.fc2(gelu(self.fc1(pooled)))


def loss_cls(c_list: list[Tensor], tau_list: list[Tensor], classifier: TimbreClassifier) -> Tensor:
    """Mean over stems of ||C(c_i) - sg(tau_i)||^2; gradients reach the
    classifier and the content path, never the timbre encoder."""
    if len(c_list) != len(tau_list):
        raise ValueError("need one timbre embedding per content embedding")
    terms = []
    for c, tau in zip(c_list, tau_list):
        resid = classifier(c) - tau.detach()
        terms.append(mean((resid * resid).sum(axis=-1)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def loss_div_cross(tau_list: list[Tensor]) -> Tensor:
    """Mean squared cosine similarity over all unordered stem pairs."""
    n = len(tau_list)
    norms = []
    for tau in tau_list:
        sq = (tau * tau).sum(axis=-1)
        if np.any(sq.data <= 0):
            raise ValueError("zero-norm timbre embedding: cosine undefined")
        norms.append(sqrt(sq))
    terms = []
    for i in range(n):
        for j in range(i + 1, n):
            dot = (tau_list[i] * tau_list[j]).sum(axis=-1)
            cos = dot / (norms[i] * norms[j])
            terms.append(mean(cos * cos))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def loss_div_var(tau_batch: Tensor, delta: float) -> Tensor:
    """Hinge on the batch std of each stem's tau: mean_i max(0, delta - std_i),
    std per dimension then averaged over dimensions. Needs batch >= 2."""
    if tau_batch.ndim != 3:
        raise ValueError("expected [B, n_stems, d_tau]")
    b = tau_batch.shape[0]
    if b < 2:
        raise ValueError("batch-variance penalty needs at least 2 examples")
    centered = tau_batch - tau_batch.mean(axis=0, keepdims=True)
    var = (centered * centered).mean(axis=0)          # [n_stems, d_tau]
    std = sqrt(var + 1e-12)
    std_per_stem = std.mean(axis=-1)                  # [n_stems]
    return mean(relu(float(delta) - std_per_stem))


def total_diversity(tau_list: list[Tensor], tau_batch: Tensor, delta: float,
                    lambda_var: float) -> Tensor:
    return loss_div_cross(tau_list) + lambda_var * loss_div_var(tau_batch, delta)
