"""End-to-end gradient integrity check: the full training objective on a tiny
two-stem configuration, autodiff against central finite differences over
randomly sampled parameter coordinates."""

from __future__ import annotations

import time

import numpy as np

from .config import Config
from .diffusion import sample_sigma
from .tensor import Tape, make_rng
from .train import Trainer


def tiny_config(seed: int = 0) -> Config:
    """Two stems, 16 latent frames, 32-wide blocks; full loss in milliseconds."""
    return Config(
        seed=seed, n_samples=512, n_train=8, n_val=2, n_test=2,
        codec_fit_examples=4, d_z=4, n_stems=2, patch=4, d_model=32, heads=2,
        n_a=1, n_b=1, n_c=1, ffn_mult=2, d_c=8, d_tau=8, c_f=4, c_t=8,
        adapter_ch=8, fused_dim=8, timbre_ch=8, timbre_kernel=3,
        batch_size=2, warmup_steps=2, fade_steps=2, total_steps=8,
        n_events=2, evalcls_steps=10, eval_n=2,
    )


def full_loss_grad_check(n_coords: int = 50, seed: int = 0, eps: float = 1e-2,
                         sigma: float | None = None) -> dict:
    """Returns max relative error over n_coords random parameter coordinates.

    The objective is the complete generator loss (diffusion + adversarial +
    diversity terms) in the joint phase with a random stem permutation.
    """
    t0 = time.time()
    cfg = tiny_config(seed)
    trainer = Trainer(cfg)
    trainer.state.step = cfg.warmup_steps + cfg.fade_steps + 1  # joint phase

    rng = make_rng(seed, 0x6C)
    indices = rng.integers(0, trainer.corpus.n, cfg.batch_size)
    z0 = np.stack([trainer.corpus.targets(int(i)) for i in indices])
    refs = np.stack([trainer.corpus.references(int(i)) for i in indices])
    mixes = trainer.corpus.mixtures(indices)
    if sigma is None:
        sigma = sample_sigma(rng, trainer.edm)
    eps_noise = rng.standard_normal(z0.shape).astype(np.float32)
    perm = rng.permutation(cfg.n_stems)
    no_drop = np.zeros(cfg.batch_size, dtype=bool)

    def loss_value():
        c_list, tau, tau_list = trainer.conditioning(mixes, refs)
        loss, _ = trainer.generator_objective(c_list, tau, tau_list, z0, sigma,
                                              eps_noise, perm, no_drop, no_drop)
        return loss

    named = trainer.model.generator_named_params()
    trainer.model.zero_all_grads()
    with Tape() as tape:
        tape.backward(loss_value())
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
             for _, p in named]
    trainer.model.zero_all_grads()

    sizes = np.array([p.size for _, p in named])
    cum = np.cumsum(sizes)
    total = int(cum[-1])
    coord_rng = make_rng(seed, 0xC0)
    flat_ids = coord_rng.choice(total, size=min(n_coords, total), replace=False)

    worst = 0.0
    worst_name = ""
    for fid in flat_ids:
        pi = int(np.searchsorted(cum, fid, side="right"))
        local = int(fid - (cum[pi - 1] if pi else 0))
        name, p = named[pi]
        flat = p.data.reshape(-1)
        orig = flat[local]
        h = np.float32(2.0 ** round(np.log2(eps * max(1.0, abs(float(orig))))))
        hi, lo = np.float32(orig + h), np.float32(orig - h)
        flat[local] = hi
        y_hi = loss_value().item()
        flat[local] = lo
        y_lo = loss_value().item()
        flat[local] = orig
        fd = (y_hi - y_lo) / (float(hi) - float(lo))
        err = abs(float(grads[pi].reshape(-1)[local]) - fd) / max(1.0, abs(fd))
        if err > worst:
            worst, worst_name = err, name
    return {"max_rel_err": worst, "worst_param": worst_name,
            "coords_checked": len(flat_ids), "seconds": time.time() - t0}
