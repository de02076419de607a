"""Training: timbre warmup -> linear content fade -> joint phase, alternating
classifier/generator updates with one shared noise level per step, condition
dropout for guidance, and a supervised/pseudo-label target switch for the
supervision-ratio harness."""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import Codec
from .config import Config, config_from_text, config_to_text
from .corpus import make_pseudo_stems, render_reference, sample_example
from .diffusion import EDMParams, diffusion_loss, sample_sigma, total_loss
from .model import TransferModel
from .optim import AdamW
from .tensor import NonFiniteError, Tape, Tensor, make_rng, slice_axis
from .timbre import loss_cls, loss_div_cross, loss_div_var


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PseudoSettings:
    """Supervision mix for the scaling harness: pseudo_pct of the training
    examples use corrupted pseudo-stems as targets (and references)."""

    pseudo_pct: int = 0
    leakage: float = 0.1
    noise_snr_db: float = 20.0

    def is_pseudo(self, idx: int) -> bool:
        return (idx % 100) < self.pseudo_pct


class CorpusCache:
    """Deterministic in-memory training corpus; counts every read of a
    ground-truth stem target so pseudo-only runs can prove they never look."""

    def __init__(self, cfg: Config, codec: Codec, split: str = "train",
                 pseudo: PseudoSettings | None = None):
        self.cfg = cfg
        self.codec = codec
        self.split = split
        self.pseudo = pseudo or PseudoSettings()
        self.n = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}[split]
        self._cache: dict[int, dict] = {}
        self.gt_target_reads = 0

    def _sample(self, idx: int):
        cfg = self.cfg
        return sample_example(idx, self.split, sr=cfg.sr, n_samples=cfg.n_samples,
                              n_events=cfg.n_events, gain_min=cfg.gain_min,
                              gain_max=cfg.gain_max, vibrato_hz=cfg.vibrato_hz)

    def _build(self, idx: int) -> dict:
        cfg = self.cfg
        ex = self._sample(idx)
        ns = cfg.n_stems
        if ns < len(ex.specs):  # reduced-stem configs use the leading voices
            ex = type(ex)(stems=ex.stems[:ns], mixture=ex.stems[:ns].sum(axis=0),
                          specs=ex.specs[:ns], seed=ex.seed, split=ex.split)
        refs = np.stack([
            render_reference(ex.specs[v], cfg.sr, cfg.n_samples,
                             seed=idx * 7 + v, vibrato_hz=cfg.vibrato_hz)
            for v in range(ns)])
        entry = {
            "mixture": ex.mixture,
            "specs": ex.specs,
            "class_ids": np.array([s.timbre.id for s in ex.specs]),
            "stem_latents": self.codec.encode(ex.stems),
            "ref_latents": self.codec.encode(refs),
        }
        if self.pseudo.is_pseudo(idx):
            ps = make_pseudo_stems(ex, self.pseudo.leakage, self.pseudo.noise_snr_db,
                                   seed=idx)
            ref_ex = type(ex)(stems=refs, mixture=refs.sum(axis=0), specs=ex.specs,
                              seed=ex.seed, split=ex.split)
            pref = make_pseudo_stems(ref_ex, self.pseudo.leakage,
                                     self.pseudo.noise_snr_db, seed=idx + 1_000_003)
            entry["pseudo_latents"] = self.codec.encode(ps)
            entry["pseudo_ref_latents"] = self.codec.encode(pref)
        return entry

    def get(self, idx: int) -> dict:
        if idx not in self._cache:
            self._cache[idx] = self._build(idx)
        return self._cache[idx]

    def targets(self, idx: int) -> np.ndarray:
        """Diffusion targets for one example; ground-truth reads are counted."""
        entry = self.get(idx)
        if self.pseudo.is_pseudo(idx):
            return entry["pseudo_latents"]
        self.gt_target_reads += 1
        return entry["stem_latents"]

    def references(self, idx: int) -> np.ndarray:
        entry = self.get(idx)
        if self.pseudo.is_pseudo(idx):
            return entry["pseudo_ref_latents"]
        return entry["ref_latents"]

    def mixtures(self, indices) -> np.ndarray:
        return np.stack([self.get(int(i))["mixture"] for i in indices])


def fit_codec(cfg: Config) -> Codec:
    """Frozen codec; per-channel scales fitted once, on training mixtures."""
    codec = Codec(frame=cfg.codec_frame, d_z=cfg.d_z)
    mixes = [sample_example(i, "train", sr=cfg.sr, n_samples=cfg.n_samples,
                            n_events=cfg.n_events, gain_min=cfg.gain_min,
                            gain_max=cfg.gain_max, vibrato_hz=cfg.vibrato_hz).mixture
             for i in range(cfg.codec_fit_examples)]
    codec.fit_scale(mixes)
    return codec


@dataclass
class TrainState:
    step: int = 0
    warmup_steps: int = 2000
    fade_steps: int = 500

    @property
    def phase(self) -> str:
        if self.step < self.warmup_steps:
            return "warmup"
        if self.step < self.warmup_steps + self.fade_steps:
            return "fade"
        return "joint"

    @property
    def fade_factor(self) -> float:
        if self.step < self.warmup_steps:
            return 0.0
        return min((self.step - self.warmup_steps) / max(self.fade_steps, 1), 1.0)


class Trainer:
    """Single-writer training loop; every random draw is keyed on (seed, step)."""

    def __init__(self, cfg: Config, pseudo: PseudoSettings | None = None,
                 codec: Codec | None = None):
        self.cfg = cfg.validate()
        self.codec = codec or fit_codec(cfg)
        self.corpus = CorpusCache(cfg, self.codec, "train", pseudo)
        sigma_data = self._estimate_sigma_data()
        self.model = TransferModel(cfg, self.codec, sigma_data, init_seed=cfg.seed)
        self.gen_opt = AdamW(self.model.generator_named_params(), lr=cfg.lr,
                             weight_decay=cfg.weight_decay)
        self.cls_opt = AdamW(self.model.classifier_named_params(), lr=cfg.cls_lr,
                             weight_decay=cfg.cls_weight_decay)
        self.state = TrainState(warmup_steps=cfg.warmup_steps, fade_steps=cfg.fade_steps)
        self.edm = EDMParams(sigma_data=sigma_data, p_mean=cfg.p_mean, p_std=cfg.p_std,
                             sigma_min=cfg.sigma_min, sigma_max=cfg.sigma_max,
                             rho=cfg.rho, steps=cfg.sample_steps).validate()

    def _estimate_sigma_data(self) -> float:
        if self.cfg.sigma_data != "auto":
            return float(self.cfg.sigma_data)
        zs = np.stack([self.corpus.targets(i) for i in range(min(32, self.corpus.n))])
        self.corpus.gt_target_reads = 0  # estimation is bookkeeping, not a target read
        return float(np.float32(zs.std()))  # f32 so checkpoints round-trip exactly

    # -- one optimization step ---------------------------------------------------
    def train_step(self, indices=None) -> dict:
        cfg = self.cfg
        rng = make_rng(cfg.seed, 0x57E9, self.state.step)
        drawn = rng.integers(0, self.corpus.n, cfg.batch_size)
        indices = np.asarray(drawn if indices is None else indices)
        b = len(indices)

        z0 = np.stack([self.corpus.targets(int(i)) for i in indices])
        refs = np.stack([self.corpus.references(int(i)) for i in indices])
        mixes = self.corpus.mixtures(indices)

        sigma = sample_sigma(rng, self.edm)  # one noise level shared by all stems
        eps = rng.standard_normal(z0.shape).astype(np.float32)
        perm = rng.permutation(cfg.n_stems)
        drop_shape = (b, cfg.n_stems) if cfg.drop_per_stem else (b,)
        drop_c = rng.uniform(size=drop_shape) < cfg.drop_content
        drop_t = rng.uniform(size=drop_shape) < cfg.drop_timbre

        try:
            return self._optimize(z0, refs, mixes, sigma, eps, perm, drop_c, drop_t)
        except (NonFiniteError, FloatingPointError) as exc:
            dump = {"step": self.state.step, "sigma": sigma, "phase": self.state.phase,
                    "indices": indices.tolist(), "error": str(exc)}
            print(f"training diverged: {json.dumps(dump)}", file=sys.stderr)
            raise TrainingDiverged(json.dumps(dump)) from exc

    def _drop_mask(self, flags: np.ndarray, b: int) -> np.ndarray:
        """{0,1} float mask [B, N_s, 1, 1]; per-mixture flags drop all stems."""
        if flags.ndim == 1:
            m = flags.astype(np.float32)[:, None, None, None]
        else:
            m = flags.astype(np.float32)[:, :, None, None]
        return np.ascontiguousarray(np.broadcast_to(m, (b, self.cfg.n_stems, 1, 1)))

    def conditioning(self, mixes: np.ndarray, refs: np.ndarray):
        """Content and timbre embeddings for a batch (tracked when on a tape)."""
        b = mixes.shape[0]
        c_list = self.model.content_from_mixtures(mixes)         # 4 x [B, L, d_c]
        tau = self.model.timbre_from_refs(refs)                  # [B, N_s, d_tau]
        tau_list = [slice_axis(tau, 1, i, i + 1).reshape(b, self.cfg.d_tau)
                    for i in range(self.cfg.n_stems)]
        return c_list, tau, tau_list

    def generator_objective(self, c_list, tau, tau_list, z0, sigma, eps, perm,
                            drop_c, drop_t):
        """Full training objective (diffusion - adversary + diversity) with the
        warmup/fade content schedule and condition dropout applied."""
        cfg = self.cfg
        state = self.state
        b = z0.shape[0]
        sent_full = self.model.null_content(b)                   # [B, N_s, L, d_c]
        c_stack = self.model.stack_content(c_list)
        if state.phase == "warmup":
            c_sched = sent_full
        elif state.phase == "fade":
            f = state.fade_factor
            c_sched = sent_full * (1.0 - f) + c_stack * f
        else:
            c_sched = c_stack
        mc = self._drop_mask(drop_c, b)
        mt = self._drop_mask(drop_t, b)[:, :, :, 0]              # [B, N_s, 1]
        c_dit = c_sched * Tensor(1.0 - mc) + sent_full * Tensor(mc)
        tau_dit = tau * Tensor(1.0 - mt)                         # dropped stems -> null (zero)

        bypass = state.phase == "warmup"
        l_diff = diffusion_loss(self.model.denoiser(), z0, sigma, eps, c_dit, tau_dit,
                                perm=perm, bypass_cross=bypass)
        l_cls = loss_cls(c_list, tau_list, self.model.classifier)
        l_cross = loss_div_cross(tau_list)
        l_var = loss_div_var(tau, cfg.delta_var)
        l_div = l_cross + cfg.lambda_var * l_var
        loss = total_loss(l_diff, l_cls, l_div, cfg.lambda_cls, cfg.lambda_div)
        parts = {"l_diff": l_diff.item(), "l_cls": l_cls.item(),
                 "l_div_cross": l_cross.item(), "l_div_var": l_var.item(),
                 "l_total": loss.item()}
        return loss, parts

    def _optimize(self, z0, refs, mixes, sigma, eps, perm, drop_c, drop_t) -> dict:
        state = self.state
        logs: dict = {"step": state.step, "phase": state.phase,
                      "fade": state.fade_factor, "sigma": sigma}

        with Tape() as gen_tape:
            c_list, tau, tau_list = self.conditioning(mixes, refs)

            # (1) classifier update on a nested tape, content and tau detached
            c_det = [c.detach() for c in c_list]
            tau_det = [t.detach() for t in tau_list]
            with Tape() as cls_tape:
                adv_loss = loss_cls(c_det, tau_det, self.model.classifier)
                cls_tape.backward(adv_loss)
            self.cls_opt.step()
            self.cls_opt.zero_grad()
            logs["l_cls_adv"] = adv_loss.item()

            # (2) generator update against the freshly updated classifier
            loss, parts = self.generator_objective(c_list, tau, tau_list, z0, sigma,
                                                   eps, perm, drop_c, drop_t)
            if not np.isfinite(loss.data).all():
                raise NonFiniteError("non-finite total loss")
            gen_tape.backward(loss)

        self.gen_opt.step()
        self.model.zero_all_grads()
        logs.update(parts)
        state.step += 1
        return logs

    # -- persistence ---------------------------------------------------------------
    def save(self, path) -> None:
        arrays = dict(self.model.state_arrays())
        arrays.update({f"opt/gen/{k}": v for k, v in self.gen_opt.state_arrays().items()})
        arrays.update({f"opt/cls/{k}": v for k, v in self.cls_opt.state_arrays().items()})
        arrays["state/step"] = np.array([self.state.step], dtype=np.float32)
        arrays["state/gen_opt_steps"] = np.array([self.gen_opt.state.step_count], dtype=np.float32)
        arrays["state/cls_opt_steps"] = np.array([self.cls_opt.state.step_count], dtype=np.float32)
        save_checkpoint(path, config_to_text(self.cfg), arrays)

    @classmethod
    def load(cls, path, pseudo: PseudoSettings | None = None) -> "Trainer":
        cfg_text, arrays = load_checkpoint(path)
        cfg = config_from_text(cfg_text)
        codec = Codec(frame=cfg.codec_frame, d_z=cfg.d_z,
                      scale=arrays["codec/scale"].astype(np.float64))
        trainer = cls.__new__(cls)
        trainer.cfg = cfg
        trainer.codec = codec
        trainer.corpus = CorpusCache(cfg, codec, "train", pseudo)
        trainer.model = TransferModel(cfg, codec, float(arrays["edm/sigma_data"][0]),
                                      init_seed=cfg.seed)
        trainer.model.load_state_arrays(arrays)
        trainer.gen_opt = AdamW(trainer.model.generator_named_params(), lr=cfg.lr,
                                weight_decay=cfg.weight_decay)
        trainer.cls_opt = AdamW(trainer.model.classifier_named_params(), lr=cfg.cls_lr,
                                weight_decay=cfg.cls_weight_decay)
        trainer.gen_opt.load_state_arrays(
            {k[len("opt/gen/"):]: v for k, v in arrays.items() if k.startswith("opt/gen/")},
            int(arrays["state/gen_opt_steps"][0]))
        trainer.cls_opt.load_state_arrays(
            {k[len("opt/cls/"):]: v for k, v in arrays.items() if k.startswith("opt/cls/")},
            int(arrays["state/cls_opt_steps"][0]))
        trainer.state = TrainState(step=int(arrays["state/step"][0]),
                                   warmup_steps=cfg.warmup_steps,
                                   fade_steps=cfg.fade_steps)
        trainer.edm = EDMParams(sigma_data=trainer.model.sigma_data, p_mean=cfg.p_mean,
                                p_std=cfg.p_std, sigma_min=cfg.sigma_min,
                                sigma_max=cfg.sigma_max, rho=cfg.rho,
                                steps=cfg.sample_steps).validate()
        return trainer


def train_loop(trainer: Trainer, total_steps: int, out_dir, log_every: int = 50,
               ckpt_every: int = 0, quiet: bool = False) -> Path:
    """Run to total_steps, logging line-delimited records; returns the final
    checkpoint path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    final = out / "model.sttc"
    t0 = time.time()
    with open(log_path, "a") as logf:
        while trainer.state.step < total_steps:
            logs = trainer.train_step()
            step = logs["step"]
            if step % log_every == 0 or step == total_steps - 1:
                logf.write(json.dumps(logs) + "\n")
                logf.flush()
                if not quiet:
                    rate = (step + 1) / max(time.time() - t0, 1e-9)
                    print(f"step {step} phase={logs['phase']} l_diff={logs['l_diff']:.4f} "
                          f"l_cls={logs['l_cls']:.4f} l_div={logs['l_div_cross']:.4f} "
                          f"({rate:.1f} it/s)", flush=True)
            if ckpt_every and (step + 1) % ckpt_every == 0:
                trainer.save(out / "model_last.sttc")
    trainer.save(final)
    return final
