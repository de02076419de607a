"""Per-stem content from the mixture: a frozen two-branch frontend (log
spectrogram + seeded strided conv features) and the trainable dual-branch
adapter with four stem heads and the learned content sentinel.

Nothing on this path ever materializes a stem waveform; the ops return
features and embeddings only, and the frontend holds plain numpy constants
that no tape ever sees.
"""

from __future__ import annotations

import numpy as np

from .nn import Conv1d, Linear, Module
from .tensor import Tensor, concat, gelu, make_rng, tanh

FRONTEND_SEED = 0xF207  # frozen features are domain constants, not run config


def _np_conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    """Frozen conv for the frontend: x [B, C, T], w [C_out, C_in, k]."""
    bsz, c, t = x.shape
    k = w.shape[-1]
    t_out = -(-t // stride)
    pad = max((t_out - 1) * stride + k - t, 0)
    xp = np.pad(x, ((0, 0), (0, 0), (pad // 2, pad - pad // 2)))
    s = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(bsz, t_out, c, k), strides=(s[0], s[2] * stride, s[1], s[2]))
    return np.einsum("btck,ock->bot", win, w, optimize=True) + b[None, :, None]


def _np_conv2d_3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x [B, F, T] single channel -> [B, C_out, F, T], 'same' padding, no bias."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    s = xp.strides
    bsz, f, t = x.shape
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(bsz, f, t, 3, 3), strides=(s[0], s[1], s[2], s[1], s[2]))
    return np.einsum("bftij,cij->bcft", win, w, optimize=True)


class Frontend:
    """Frozen feature extractor; deterministic function of the mixture."""

    def __init__(self, n_samples: int, window: int = 64, hop: int = 32,
                 c_f: int = 8, c_t: int = 16):
        if n_samples % hop != 0:
            raise ValueError("n_samples must be divisible by the hop")
        self.n_samples = n_samples
        self.window = window
        self.hop = hop
        self.c_f = c_f
        self.c_t = c_t
        self.n_bins = window // 2 + 1
        self.n_frames = n_samples // hop
        self._hann = np.hanning(window).astype(np.float64)
        rng = make_rng(FRONTEND_SEED)
        # bias-free spectrogram filters: silence maps to exactly zero
        self._freq_w = rng.normal(0.0, 1.0 / 3.0, (c_f - 1, 3, 3))
        # strided waveform stack at overall stride hop (4*4*2 = 32)
        ch = c_t
        self._time_layers = []
        for c_in, c_out, k, s in ((1, ch, 9, 4), (ch, ch, 9, 4), (ch, c_t, 5, 2)):
            w = rng.normal(0.0, (c_in * k) ** -0.5, (c_out, c_in, k))
            b = rng.uniform(-0.1, 0.1, c_out)
            self._time_layers.append((w, b, s))

    def spectrogram(self, mixture: np.ndarray) -> np.ndarray:
        """log(1+|STFT|): [B, T] -> [B, F, T_f] with T_f = T/hop."""
        x = np.atleast_2d(np.asarray(mixture, dtype=np.float64))
        if x.shape[-1] != self.n_samples:
            raise ValueError(f"expected length {self.n_samples}, got {x.shape[-1]}")
        xp = np.pad(x, ((0, 0), (0, self.window - self.hop)))
        s = xp.strides
        frames = np.lib.stride_tricks.as_strided(
            xp, shape=(x.shape[0], self.n_frames, self.window),
            strides=(s[0], s[1] * self.hop, s[1]))
        mags = np.abs(np.fft.rfft(frames * self._hann, axis=-1))
        return np.log1p(mags).transpose(0, 2, 1)

    def __call__(self, mixture: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """[B, T] (or [T]) -> freq [B, c_f, F, T_f], time [B, c_t, T_f]."""
        squeeze = np.ndim(mixture) == 1
        spec = self.spectrogram(mixture)                       # [B, F, Tf]
        extra = np.tanh(_np_conv2d_3x3(spec, self._freq_w))    # [B, c_f-1, F, Tf]
        freq = np.concatenate([spec[:, None], extra], axis=1)
        x = np.atleast_2d(np.asarray(mixture, dtype=np.float64))[:, None, :]
        for w, b, s in self._time_layers:
            x = np.tanh(_np_conv1d(x, w, b, s))
        freq = freq.astype(np.float32)
        time = x.astype(np.float32)
        if squeeze:
            return freq[0], time[0]
        return freq, time


class _ResBlock1d(Module):
    def __init__(self, ch: int, kernel: int, rng):
        self.conv1 = Conv1d(ch, ch, kernel, rng)
        self.conv2 = Conv1d(ch, ch, kernel, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(gelu(self.conv1(x)))


def pool_to(x: Tensor, out_len: int) -> Tensor:
    """Average-pool [B, T, C] to exactly [B, out_len, C]; T must divide evenly."""
    b, t, c = x.shape
    if t == out_len:
        return x
    if t % out_len != 0:
        raise ValueError(f"cannot pool length {t} to {out_len}")
    return x.reshape(b, out_len, t // out_len, c).mean(axis=2)


class ContentAdapter(Module):
    """Trainable dual-branch adapter with four per-stem projection heads and
    the learned content sentinel (also the null token for guidance)."""

    def __init__(self, rng, c_f: int = 8, c_t: int = 16, n_bins: int = 33,
                 latent_len: int = 128, d_c: int = 16, ch: int = 32,
                 fused_dim: int = 32, n_stems: int = 4):
        self.latent_len = latent_len
        self.d_c = d_c
        # frequency branch: convs stride along the frequency axis
        self.freq_conv1 = Conv1d(c_f, ch // 2, 3, rng, stride=2)
        self.freq_conv2 = Conv1d(ch // 2, ch, 3, rng, stride=2)
        self.freq_res = [_ResBlock1d(ch, 3, rng) for _ in range(2)]
        f_out = self.freq_conv2.out_len(self.freq_conv1.out_len(n_bins))
        self.freq_proj = Linear(ch * f_out, ch, rng)
        # time branch: frontend already at the latent rate, stride 1
        self.time_conv1 = Conv1d(c_t, ch, 5, rng)
        self.time_conv2 = Conv1d(ch, ch, 5, rng)
        self.time_res = [_ResBlock1d(ch, 3, rng) for _ in range(2)]
        # fusion: channel concat then one-hidden-layer MLP
        self.fuse1 = Linear(2 * ch, 2 * ch, rng)
        self.fuse2 = Linear(2 * ch, fused_dim, rng)
        self.heads = [Linear(fused_dim, d_c, rng) for _ in range(n_stems)]
        self.sentinel = Tensor(np.zeros((1, d_c), dtype=np.float32), requires_grad=True)

    def backbone(self, freq: Tensor, time: Tensor) -> Tensor:
        """Fused mixture-level features [B, L, fused_dim]."""
        b, c_f, f, t = freq.shape
        h = freq.transpose(0, 3, 1, 2)            # [B, T, C_f, F]
        h = gelu(self.freq_conv1(h))
        h = gelu(self.freq_conv2(h))
        for blk in self.freq_res:
            h = blk(h)
        h = h.reshape(b, t, -1)
        h_freq = self.freq_proj(h)                # [B, T, ch]

        g = gelu(self.time_conv1(time))
        g = gelu(self.time_conv2(g))
        for blk in self.time_res:
            g = blk(g)
        h_time = g.transpose(0, 2, 1)             # [B, T_t, ch]

        h_freq = pool_to(h_freq, self.latent_len)
        h_time = pool_to(h_time, self.latent_len)
        fused = concat([h_freq, h_time], axis=2)  # channel-axis concatenation
        return self.fuse2(gelu(self.fuse1(fused)))

    def __call__(self, freq: Tensor, time: Tensor) -> list[Tensor]:
        # tanh-bounded content space: the adversarial objective maximizes the
        # classifier's regression error, which is only well-posed (finite
        # equilibrium) on a compact embedding set
        fused = self.backbone(freq, time)
        return [tanh(head(fused)) for head in self.heads]

    def sentinel_like(self, batch: int) -> Tensor:
        """Sentinel broadcast to [B, L, d_c]; gradient flows back to it."""
        zeros = Tensor(np.zeros((batch, self.latent_len, self.d_c), dtype=np.float32))
        return zeros + self.sentinel


def apply_content_dropout(c_list: list[Tensor], drop_mask, sentinel_full: Tensor) -> list[Tensor]:
    """Replace flagged stems' content with the (expanded) sentinel."""
    if len(drop_mask) != len(c_list):
        raise ValueError("mask length must match the stem count")
    return [sentinel_full if dropped else c for c, dropped in zip(c_list, drop_mask)]
