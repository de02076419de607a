"""Frozen waveform <-> latent transform: orthonormal DCT-II per non-overlapping
frame, truncated to the first d_z coefficients, with fixed per-channel scaling
fitted once on the training corpus."""

from __future__ import annotations

import numpy as np


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II analysis matrix; rows are basis functions."""
    k = np.arange(n)[:, None]
    t = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * t + 1) * k / (2 * n))
    mat[0] *= np.sqrt(1.0 / n)
    mat[1:] *= np.sqrt(2.0 / n)
    return mat


class Codec:
    """Deterministic, parameter-free codec; only the channel scales are data-fit."""

    def __init__(self, frame: int = 32, d_z: int = 16, scale: np.ndarray | None = None):
        if d_z > frame:
            raise ValueError("d_z cannot exceed the frame length")
        self.frame = frame
        self.d_z = d_z
        self._dct = dct_matrix(frame)
        self.scale = (np.ones(d_z, dtype=np.float64) if scale is None
                      else np.asarray(scale, dtype=np.float64).copy())
        if self.scale.shape != (d_z,):
            raise ValueError(f"scale must have shape ({d_z},)")

    def _coeffs(self, waveform: np.ndarray) -> np.ndarray:
        x = np.asarray(waveform, dtype=np.float64)
        if x.shape[-1] % self.frame != 0:
            raise ValueError(f"length {x.shape[-1]} not divisible by frame {self.frame}")
        frames = x.reshape(x.shape[:-1] + (-1, self.frame))
        return frames @ self._dct.T[:, : self.d_z]

    def encode(self, waveform: np.ndarray) -> np.ndarray:
        """[..., T] -> [..., L, d_z] with L = T // frame."""
        return (self._coeffs(waveform) / self.scale).astype(np.float32)

    def decode(self, z: np.ndarray) -> np.ndarray:
        """[..., L, d_z] -> [..., T]; zero-pads the truncated coefficients."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.d_z:
            raise ValueError(f"expected {self.d_z} latent channels, got {z.shape[-1]}")
        full = np.zeros(z.shape[:-1] + (self.frame,), dtype=np.float64)
        full[..., : self.d_z] = z * self.scale
        frames = full @ self._dct
        return frames.reshape(frames.shape[:-2] + (-1,)).astype(np.float32)

    def fit_scale(self, waveforms) -> None:
        """Per-channel std of raw truncated coefficients over the given clips.
        Quantized to float32 so checkpoints round-trip the codec exactly."""
        coeffs = np.concatenate([self._coeffs(w).reshape(-1, self.d_z) for w in waveforms], axis=0)
        self.scale = np.maximum(coeffs.std(axis=0), 1e-6).astype(np.float32).astype(np.float64)

    def latent_std(self, waveforms) -> float:
        """Global std of encoded latents (the sigma_data estimate)."""
        zs = np.concatenate([self.encode(w).reshape(-1) for w in waveforms])
        return float(zs.std())
