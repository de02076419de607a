"""Bundle of every trainable and frozen piece: codec, frontend, content
adapter, timbre encoder, adversarial classifier, and the joint denoising
transformer, with named-parameter views for the two optimizers."""

from __future__ import annotations

import numpy as np

from .codec import Codec
from .config import Config
from .content import ContentAdapter, Frontend
from .diffusion import Denoiser
from .dit import JointStemDiT
from .tensor import Tensor, concat, make_rng
from .timbre import TimbreClassifier, TimbreEncoder


class TransferModel:
    """Everything the trainer, sampler, and evaluator need, in one place."""

    def __init__(self, cfg: Config, codec: Codec, sigma_data: float, init_seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.codec = codec
        self.sigma_data = float(sigma_data)
        self.frontend = Frontend(n_samples=cfg.n_samples, window=cfg.freq_window,
                                 hop=cfg.freq_hop, c_f=cfg.c_f, c_t=cfg.c_t)
        rng = make_rng(init_seed, 0x1817)
        self.adapter = ContentAdapter(rng, c_f=cfg.c_f, c_t=cfg.c_t,
                                      n_bins=self.frontend.n_bins,
                                      latent_len=cfg.latent_len, d_c=cfg.d_c,
                                      ch=cfg.adapter_ch, fused_dim=cfg.fused_dim,
                                      n_stems=cfg.n_stems)
        self.timbre_enc = TimbreEncoder(rng, d_z=cfg.d_z, ch=cfg.timbre_ch,
                                        d_tau=cfg.d_tau, kernel=cfg.timbre_kernel)
        self.dit = JointStemDiT(rng, n_stems=cfg.n_stems, latent_len=cfg.latent_len,
                                d_z=cfg.d_z, patch=cfg.patch, d_model=cfg.d_model,
                                heads=cfg.heads, n_a=cfg.n_a, n_b=cfg.n_b, n_c=cfg.n_c,
                                ffn_mult=cfg.ffn_mult, d_c=cfg.d_c, d_tau=cfg.d_tau)
        self.classifier = TimbreClassifier(rng, d_c=cfg.d_c, hidden=2 * cfg.d_c,
                                           d_tau=cfg.d_tau)

    # -- parameter views ------------------------------------------------------
    def generator_named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, module in (("adapter", self.adapter), ("timbre", self.timbre_enc),
                               ("dit", self.dit)):
            out.extend((f"{prefix}.{n}", p) for n, p in module.named_parameters())
        return out

    def classifier_named_params(self) -> list[tuple[str, Tensor]]:
        return [(f"cls.{n}", p) for n, p in self.classifier.named_parameters()]

    def zero_all_grads(self) -> None:
        for _, p in self.generator_named_params():
            p.zero_grad()
        for _, p in self.classifier_named_params():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param/{n}": p.data for n, p in self.generator_named_params()}
        arrays.update({f"param/{n}": p.data for n, p in self.classifier_named_params()})
        arrays["codec/scale"] = self.codec.scale.astype(np.float32)
        arrays["edm/sigma_data"] = np.array([self.sigma_data], dtype=np.float32)
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = dict(self.generator_named_params())
        named.update(self.classifier_named_params())
        for name, p in named.items():
            arr = arrays[f"param/{name}"]
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr
        self.codec.scale = arrays["codec/scale"].astype(np.float64)
        self.sigma_data = float(arrays["edm/sigma_data"][0])

    # -- forward helpers ---------------------------------------------------------
    def content_from_mixtures(self, mixtures: np.ndarray) -> list[Tensor]:
        """[B, T] waveforms -> 4 content embeddings [B, L, d_c] (tracked)."""
        freq, time = self.frontend(np.atleast_2d(mixtures))
        return self.adapter(Tensor(freq), Tensor(time))

    def timbre_from_refs(self, ref_latents: np.ndarray) -> Tensor:
        """[B, N_s, L_ref, d_z] reference latents -> [B, N_s, d_tau]."""
        b, ns, l, dz = ref_latents.shape
        flat = Tensor(ref_latents.reshape(b * ns, l, dz))
        tau = self.timbre_enc(flat)
        return tau.reshape(b, ns, self.cfg.d_tau)

    def stack_content(self, c_list: list[Tensor]) -> Tensor:
        """4 x [B, L, d_c] -> [B, N_s, L, d_c]."""
        b, l, dc = c_list[0].shape
        return concat([c.reshape(b, 1, l, dc) for c in c_list], axis=1)

    def null_content(self, batch: int) -> Tensor:
        """Sentinel broadcast to [B, N_s, L, d_c] (the CFG null-content token)."""
        sent = self.adapter.sentinel_like(batch)  # [B, L, d_c]
        b, l, dc = sent.shape
        zeros = Tensor(np.zeros((b, self.cfg.n_stems, l, dc), dtype=np.float32))
        return zeros + sent.reshape(b, 1, l, dc)

    def null_timbre(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.cfg.n_stems, self.cfg.d_tau), dtype=np.float32))

    def denoiser(self) -> Denoiser:
        return Denoiser(self.dit, self.sigma_data)
