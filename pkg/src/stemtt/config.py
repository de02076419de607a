"""Flat key = value configuration covering every tunable constant."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


@dataclass
class Config:
    # corpus
    sr: int = 8000
    n_samples: int = 4096
    n_events: int = 4
    n_train: int = 2048
    n_val: int = 256
    n_test: int = 256
    gain_min: float = 0.4
    gain_max: float = 1.0
    vibrato_hz: float = 5.0
    # codec
    codec_frame: int = 32
    d_z: int = 16
    codec_fit_examples: int = 64
    # content adapter
    d_c: int = 16
    freq_window: int = 64
    freq_hop: int = 32
    c_f: int = 8
    c_t: int = 16
    adapter_ch: int = 32
    fused_dim: int = 32
    # timbre encoder
    d_tau: int = 16
    timbre_ch: int = 32
    timbre_kernel: int = 5
    # joint stem transformer
    n_stems: int = 4
    patch: int = 8
    d_model: int = 128
    heads: int = 4
    n_a: int = 2
    n_b: int = 2
    n_c: int = 2
    ffn_mult: int = 2
    # diffusion
    sigma_data: str = "auto"
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sample_steps: int = 50
    # training
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 8
    total_steps: int = 20000
    warmup_steps: int = 2000
    fade_steps: int = 500
    drop_content: float = 0.1
    drop_timbre: float = 0.1
    drop_per_stem: bool = False
    lambda_cls: float = 0.1
    lambda_div: float = 0.1
    lambda_var: float = 1.0
    delta_var: float = 0.1
    cls_lr: float = 1e-3
    cls_weight_decay: float = 1e-2
    log_every: int = 50
    ckpt_every: int = 5000
    # evaluation
    eval_seed: int = 1234
    eval_n: int = 64
    w_content: float = 1.0
    w_timbre: float = 1.0
    f0_frame: int = 512
    f0_hop: int = 256
    f0_threshold: float = 0.3
    chroma_frame: int = 1024
    chroma_hop: int = 512
    evalcls_steps: int = 1500
    evalcls_lr: float = 1e-3
    evalcls_batch: int = 128

    # -- derived ------------------------------------------------------------
    @property
    def latent_len(self) -> int:
        return self.n_samples // self.codec_frame

    @property
    def tokens_per_stem(self) -> int:
        return self.latent_len // self.patch

    @property
    def n_tokens(self) -> int:
        return self.n_stems * self.tokens_per_stem

    def sigma_data_value(self, estimated: float | None = None) -> float:
        if self.sigma_data == "auto":
            return float(estimated) if estimated is not None else 0.5
        return float(self.sigma_data)

    def validate(self) -> "Config":
        if self.n_samples % self.codec_frame != 0:
            raise ValueError("n_samples must be divisible by codec_frame")
        if self.d_z > self.codec_frame:
            raise ValueError("d_z cannot exceed codec_frame")
        if self.latent_len % self.patch != 0:
            raise ValueError("latent_len must be divisible by patch")
        if self.d_model % self.heads != 0:
            raise ValueError("heads must divide d_model")
        if self.sigma_min >= self.sigma_max:
            raise ValueError("sigma_min must be below sigma_max")
        if self.sigma_data != "auto":
            try:
                v = float(self.sigma_data)
            except ValueError:
                raise ValueError(f"sigma_data must be a float or 'auto', got {self.sigma_data!r}")
            if v <= 0:
                raise ValueError("sigma_data must be positive")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _parse_value(field: dataclasses.Field, raw: str):
    if field.type in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{field.name}: expected a boolean, got {raw!r}")
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    return raw


def config_from_text(text: str) -> Config:
    """Parse 'key = value' lines; '#' comments; unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(_FIELDS[key], raw)
    return Config(**values).validate()


def config_to_text(cfg: Config) -> str:
    lines = []
    for f in dataclasses.fields(Config):
        val = getattr(cfg, f.name)
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"


def load_config(path) -> Config:
    return config_from_text(Path(path).read_text())


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(config_to_text(cfg))
