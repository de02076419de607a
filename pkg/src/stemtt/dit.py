"""Joint multi-stem denoising transformer: time-patchified stem tokens, random
stem permutation, three attention stages (intra -> cross -> intra) that share
one block design and differ only in the mask, triple decoupled FiLM
conditioning, and zero-initialized noise-derived residual gates."""

from __future__ import annotations

import numpy as np

from .nn import Linear, Module
from .tensor import (
    Tensor,
    concat,
    gelu,
    index_select,
    layer_norm,
    masked_softmax,
    matmul,
    slice_axis,
)


def build_stage_mask(kind: str, n_stems: int, tokens_per_stem: int) -> np.ndarray:
    """Additive attention mask over {0, -inf}: block-diagonal for 'intra'
    (token i attends j iff stem(i) == stem(j)), all-zero for 'cross'."""
    n = n_stems * tokens_per_stem
    if kind == "cross":
        return np.zeros((n, n), dtype=np.float32)
    if kind != "intra":
        raise ValueError(f"unknown mask kind {kind!r}")
    stem_of = np.arange(n) // tokens_per_stem
    mask = np.where(stem_of[:, None] == stem_of[None, :], 0.0, -np.inf)
    return mask.astype(np.float32)


def film_modulate(h: Tensor, g_sigma, b_sigma, g_c, b_c, g_tau, b_tau) -> Tensor:
    """(1+g_tau) * [(1+g_c) * ((1+g_sigma) * h + b_sigma) + b_c] + b_tau,
    exactly this nesting: noise innermost, timbre outermost."""
    inner = (g_sigma + 1.0) * h + b_sigma
    mid = (g_c + 1.0) * inner + b_c
    return (g_tau + 1.0) * mid + b_tau


def sigma_features(c_noise: float, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the preconditioned noise coordinate."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = c_noise * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)]).astype(np.float32)[None, :]


class _FilmHeads(Module):
    """One (gamma, beta) projection per conditioning signal; zero-initialized
    so modulation starts as identity. The three pathways share no parameters."""

    def __init__(self, d_model: int, d_c: int, d_tau: int, rng):
        self.sigma = Linear(d_model, 2 * d_model, rng, zero_init=True)
        self.content = Linear(d_c, 2 * d_model, rng, zero_init=True)
        self.timbre = Linear(d_tau, 2 * d_model, rng, zero_init=True)

    def __call__(self, sig_act: Tensor, c_act: Tensor, tau_act: Tensor):
        d = self.sigma.weight.shape[0]
        gb_s = self.sigma(sig_act).reshape(1, 1, 2 * d)
        gb_c = self.content(c_act)
        gb_t = self.timbre(tau_act)
        last = gb_c.ndim - 1
        return (
            slice_axis(gb_s, 2, 0, d), slice_axis(gb_s, 2, d, 2 * d),
            slice_axis(gb_c, last, 0, d), slice_axis(gb_c, last, d, 2 * d),
            slice_axis(gb_t, last, 0, d), slice_axis(gb_t, last, d, 2 * d),
        )


class Block(Module):
    """Pre-norm attention + FFN, each FiLM-modulated and residual-gated by a
    zero-initialized scalar derived from the noise embedding."""

    def __init__(self, d_model: int, heads: int, ffn_mult: int, d_c: int, d_tau: int, rng):
        self.d_model = d_model
        self.heads = heads
        self.qkv = Linear(d_model, 3 * d_model, rng)
        self.proj = Linear(d_model, d_model, rng)
        self.ffn1 = Linear(d_model, ffn_mult * d_model, rng)
        self.ffn2 = Linear(ffn_mult * d_model, d_model, rng)
        self.film_attn = _FilmHeads(d_model, d_c, d_tau, rng)
        self.film_ffn = _FilmHeads(d_model, d_c, d_tau, rng)
        self.gate_attn = Linear(d_model, 1, rng, zero_init=True)
        self.gate_ffn = Linear(d_model, 1, rng, zero_init=True)

    def _attention(self, h: Tensor, mask) -> Tensor:
        b, t, d = h.shape
        hd = d // self.heads
        qkv = self.qkv(h).reshape(b, t, 3, self.heads, hd).transpose(2, 0, 3, 1, 4)
        q = slice_axis(qkv, 0, 0, 1).reshape(b, self.heads, t, hd)
        k = slice_axis(qkv, 0, 1, 2).reshape(b, self.heads, t, hd)
        v = slice_axis(qkv, 0, 2, 3).reshape(b, self.heads, t, hd)
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (hd ** -0.5)
        att = masked_softmax(scores, mask)
        out = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.proj(out)

    def __call__(self, h: Tensor, mask, sig_act: Tensor, c_act: Tensor, tau_act: Tensor) -> Tensor:
        g_attn = self.gate_attn(sig_act).reshape(1, 1, 1)
        g_ffn = self.gate_ffn(sig_act).reshape(1, 1, 1)
        t = film_modulate(layer_norm(h), *self.film_attn(sig_act, c_act, tau_act))
        h = h + g_attn * self._attention(t, mask)
        t = film_modulate(layer_norm(h), *self.film_ffn(sig_act, c_act, tau_act))
        return h + g_ffn * self.ffn2(gelu(self.ffn1(t)))


class JointStemDiT(Module):
    """Denoises all stem latents in one pass; cost independent of stem count."""

    def __init__(self, rng, n_stems: int = 4, latent_len: int = 128, d_z: int = 16,
                 patch: int = 8, d_model: int = 128, heads: int = 4,
                 n_a: int = 2, n_b: int = 2, n_c: int = 2, ffn_mult: int = 2,
                 d_c: int = 16, d_tau: int = 16):
        if latent_len % patch != 0:
            raise ValueError("patch must divide the latent length")
        self.n_stems = n_stems
        self.latent_len = latent_len
        self.d_z = d_z
        self.patch = patch
        self.d_model = d_model
        self.tokens_per_stem = latent_len // patch
        self.n_tokens = n_stems * self.tokens_per_stem
        self.patch_proj = Linear(patch * d_z, d_model, rng)
        self.pos_emb = Tensor(
            (rng.normal(0, 0.02, (self.tokens_per_stem, d_model))).astype(np.float32),
            requires_grad=True)
        self.sigma_mlp1 = Linear(d_model, d_model, rng)
        self.sigma_mlp2 = Linear(d_model, d_model, rng)
        self.blocks_a = [Block(d_model, heads, ffn_mult, d_c, d_tau, rng) for _ in range(n_a)]
        self.blocks_b = [Block(d_model, heads, ffn_mult, d_c, d_tau, rng) for _ in range(n_b)]
        self.blocks_c = [Block(d_model, heads, ffn_mult, d_c, d_tau, rng) for _ in range(n_c)]
        self.out_proj = Linear(d_model, patch * d_z, rng, zero_init=True)
        self.mask_intra = build_stage_mask("intra", n_stems, self.tokens_per_stem)
        self.mask_cross = build_stage_mask("cross", n_stems, self.tokens_per_stem)
        self.call_count = 0

    # -- tokenization ---------------------------------------------------------
    def patchify(self, z: Tensor) -> Tensor:
        """[B, N_s, L, D_z] -> [B, N_s*L', D] with shared positional table."""
        b = z.shape[0]
        patches = z.reshape(b, self.n_stems, self.tokens_per_stem, self.patch * self.d_z)
        tokens = self.patch_proj(patches) + self.pos_emb
        return tokens.reshape(b, self.n_tokens, self.d_model)

    def unpatchify(self, tokens: Tensor) -> Tensor:
        b = tokens.shape[0]
        out = self.out_proj(tokens)
        return out.reshape(b, self.n_stems, self.latent_len, self.d_z)

    def sigma_embedding(self, c_noise: float) -> Tensor:
        feats = Tensor(sigma_features(c_noise, self.d_model))
        return self.sigma_mlp2(gelu(self.sigma_mlp1(feats)))

    # -- full forward -----------------------------------------------------------
    def __call__(self, z: Tensor, c_noise: float, c: Tensor, tau: Tensor,
                 perm=None, bypass_cross: bool = False) -> Tensor:
        """Raw network output, same shape as z.

        z [B, N_s, L, D_z]; c [B, N_s, L, D_c]; tau [B, N_s, D_tau]; c_noise is
        the preconditioned scalar noise coordinate. `perm` permutes the stem
        axis of inputs and conditioning together and is inverted at the output.
        """
        self.call_count += 1
        b = z.shape[0]
        if perm is not None:
            perm = np.asarray(perm, dtype=np.int64)
            inv = np.argsort(perm)
            z = index_select(z, perm, axis=1)
            c = index_select(c, perm, axis=1)
            tau = index_select(tau, perm, axis=1)
        h = self.patchify(z)
        # per-token conditioning: content pooled per patch, timbre broadcast
        c_tok = c.reshape(b, self.n_stems, self.tokens_per_stem, self.patch, -1).mean(axis=3)
        c_tok = c_tok.reshape(b, self.n_tokens, c.shape[-1])
        tau_tok = tau.reshape(b, self.n_stems, 1, tau.shape[-1]) + Tensor(
            np.zeros((b, self.n_stems, self.tokens_per_stem, tau.shape[-1]), dtype=np.float32))
        tau_tok = tau_tok.reshape(b, self.n_tokens, tau.shape[-1])

        sig_act = gelu(self.sigma_embedding(c_noise))
        c_act = gelu(c_tok)
        tau_act = gelu(tau_tok)

        for blk in self.blocks_a:
            h = blk(h, self.mask_intra, sig_act, c_act, tau_act)
        if not bypass_cross:
            for blk in self.blocks_b:
                h = blk(h, self.mask_cross, sig_act, c_act, tau_act)
        for blk in self.blocks_c:
            h = blk(h, self.mask_intra, sig_act, c_act, tau_act)

        out = self.unpatchify(layer_norm(h))
        if perm is not None:
            out = index_select(out, inv, axis=1)
        return out
