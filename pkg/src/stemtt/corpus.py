"""Synthetic four-voice corpus: additive-synthesis stems with known pitch and
timbre, their mixtures, pseudo-stem corruption, and WAV/manifest I/O."""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import make_rng

VOICES = ("soprano", "alto", "tenor", "bass")
# inclusive MIDI registers per voice
REGISTERS = ((60, 79), (55, 74), (48, 67), (40, 59))
N_VOICES = 4
MAX_VIBRATO_CENTS = 30.0

# disjoint seed bases per split
SPLIT_BASE = {"train": 0, "val": 1 << 20, "test": 1 << 21}


def midi_to_hz(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69.0) / 12.0)


@dataclass(frozen=True)
class TimbreClass:
    """Parametric instrument identity: harmonic envelope, onset, vibrato."""

    id: int
    harmonic_amps: tuple
    attack_ms: float
    vibrato_cents: float

    def __post_init__(self):
        amps = np.asarray(self.harmonic_amps, dtype=np.float64)
        if np.any(amps < 0) or not np.any(amps > 0):
            raise ValueError("harmonic amplitudes must be non-negative with at least one positive")
        if self.vibrato_cents < 0 or self.vibrato_cents > MAX_VIBRATO_CENTS:
            raise ValueError("vibrato depth out of range")
        # normalize to unit energy
        object.__setattr__(self, "harmonic_amps", tuple(amps / np.sqrt((amps * amps).sum())))

    @property
    def n_harmonics(self) -> int:
        return len(self.harmonic_amps)


def _mk(id, amps, attack, vib):
    return TimbreClass(id=id, harmonic_amps=tuple(amps), attack_ms=attack, vibrato_cents=vib)


# Two ensemble families of four voice-matched classes each. Harmonic counts
# respect the per-voice registers: h_max * f0_max * 2^(vib/1200) < SR/2.
# Envelopes are pairwise distinct across every register-overlapping class pair
# so the metrics classifier has a clean oracle to learn.
FAMILY_A = (
    _mk(0, (1.0, 0.20), 8.0, 8.0),                 # pure, fundamental-heavy
    _mk(1, (1.0, 0.90, 0.15), 10.0, 10.0),         # strong 2nd
    _mk(2, (1.0, 0.55, 0.50, 0.45), 6.0, 6.0),     # rich, flat decay
    _mk(3, (1.0, 1.60, 0.30, 0.90), 9.0, 7.0),     # uneven, 2nd-dominant
)
FAMILY_B = (
    _mk(4, (0.40, 1.0), 22.0, 22.0),               # 2nd-harmonic dominant
    _mk(5, (1.0, 0.08, 1.50), 26.0, 20.0),         # hollow, huge 3rd
    _mk(6, (1.0, 0.05, 0.45, 0.55), 20.0, 24.0),   # hollow, strong 4th
    _mk(7, (1.0, 0.25, 0.08, 0.03), 28.0, 18.0),   # dark, fast decay
)
ALL_CLASSES = FAMILY_A + FAMILY_B
N_CLASSES = len(ALL_CLASSES)


def class_by_id(cid: int) -> TimbreClass:
    return ALL_CLASSES[cid]


def other_family_class(cid: int) -> TimbreClass:
    """Voice-matched class from the other ensemble family."""
    return ALL_CLASSES[(cid + 4) % 8]


@dataclass(frozen=True)
class StemSpec:
    """Ground truth for one stem: voice, note events, timbre class, gain."""

    voice: int
    note_events: tuple  # ((onset, duration, midi), ...) in samples
    timbre: TimbreClass
    gain: float

    def __post_init__(self):
        lo, hi = REGISTERS[self.voice]
        last_end = 0
        for onset, dur, midi in self.note_events:
            if not (lo <= midi <= hi):
                raise ValueError(f"{VOICES[self.voice]} register violation: MIDI {midi} not in [{lo},{hi}]")
            if onset < last_end:
                raise ValueError("note events overlap")
            last_end = onset + dur


@dataclass
class RenderedExample:
    stems: np.ndarray    # [4, T] float32
    mixture: np.ndarray  # [T] float32
    specs: tuple         # 4 StemSpec
    seed: int
    split: str


def render_stem(spec: StemSpec, sr: int, n_samples: int, seed: int,
                vibrato_hz: float = 5.0) -> np.ndarray:
    """Additive synthesis of one stem; deterministic given the seed.

    Per event: sum of phase-locked harmonics with per-harmonic random phase,
    sinusoidal vibrato, and a linear attack ramp. Errors on register or
    Nyquist violations.
    """
    nyq = sr / 2.0
    rng = make_rng(seed, spec.voice, 0x5E)
    out = np.zeros(n_samples, dtype=np.float64)
    amps = np.asarray(spec.timbre.harmonic_amps)
    n_h = len(amps)
    for onset, dur, midi in spec.note_events:
        lo, hi = REGISTERS[spec.voice]
        if not (lo <= midi <= hi):
            raise ValueError("register violation")
        f0 = midi_to_hz(midi)
        vib_factor = 2.0 ** (spec.timbre.vibrato_cents / 1200.0)
        if n_h * f0 * vib_factor >= nyq:
            raise ValueError(f"harmonic {n_h} of f0={f0:.1f} Hz exceeds Nyquist {nyq:.0f} Hz")
        stop = min(onset + dur, n_samples)
        if stop <= onset:
            continue
        n = stop - onset
        t = np.arange(n) / sr
        vib_phase = rng.uniform(0, 2 * np.pi)
        f_inst = f0 * 2.0 ** (spec.timbre.vibrato_cents / 1200.0
                              * np.sin(2 * np.pi * vibrato_hz * t + vib_phase))
        phase = 2 * np.pi * np.cumsum(f_inst) / sr
        seg = np.zeros(n)
        for h in range(1, n_h + 1):
            seg += amps[h - 1] * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        attack = max(int(round(spec.timbre.attack_ms * sr / 1000.0)), 1)
        if attack > 1:
            ramp = np.minimum(np.arange(n) / attack, 1.0)
            seg *= ramp
        out[onset:stop] = spec.gain * seg
    return out.astype(np.float32)


_CHORDS = ((0, 4, 7), (0, 3, 7), (0, 4, 7, 10), (0, 3, 7, 10))


def _sample_notes(rng: np.random.Generator, n_events: int, event_len: int):
    """Chord-tone note events per voice; same rhythm across voices."""
    events_per_voice = [[] for _ in range(N_VOICES)]
    prev = [None] * N_VOICES
    for e in range(n_events):
        root = int(rng.integers(0, 12))
        chord = _CHORDS[int(rng.integers(0, len(_CHORDS)))]
        pcs = {(root + iv) % 12 for iv in chord}
        for v in range(N_VOICES):
            lo, hi = REGISTERS[v]
            cands = [m for m in range(lo, hi + 1) if m % 12 in pcs]
            if prev[v] is not None:
                near = [m for m in cands if abs(m - prev[v]) <= 7]
                if near:
                    cands = near
            midi = int(cands[int(rng.integers(0, len(cands)))])
            prev[v] = midi
            events_per_voice[v].append((e * event_len, event_len, midi))
    return [tuple(ev) for ev in events_per_voice]


def sample_ensemble(rng: np.random.Generator) -> tuple:
    """Family A, family B, or a per-voice mix of the two (40/40/20)."""
    u = rng.uniform()
    if u < 0.4:
        return FAMILY_A
    if u < 0.8:
        return FAMILY_B
    return tuple(FAMILY_A[v] if rng.uniform() < 0.5 else FAMILY_B[v] for v in range(N_VOICES))


def sample_example(seed: int, split: str, ensemble=None, *, sr: int = 8000,
                   n_samples: int = 4096, n_events: int = 4,
                   gain_min: float = 0.4, gain_max: float = 1.0,
                   vibrato_hz: float = 5.0) -> RenderedExample:
    """Deterministic example from (seed, split); splits use disjoint seed bases."""
    if split not in SPLIT_BASE:
        raise ValueError(f"unknown split {split!r}")
    full_seed = SPLIT_BASE[split] + int(seed)
    # separate stream for the ensemble pick so a manifest-pinned ensemble
    # reproduces the exact same notes and gains
    if ensemble is None:
        ensemble = sample_ensemble(make_rng(full_seed, 0xE45))
    else:
        ensemble = tuple(ensemble)
    if len(ensemble) != N_VOICES:
        raise ValueError("ensemble must contain exactly 4 timbre classes")
    rng = make_rng(full_seed, 0xDA7A)
    event_len = n_samples // n_events
    notes = _sample_notes(rng, n_events, event_len)
    specs = tuple(
        StemSpec(voice=v, note_events=notes[v], timbre=ensemble[v],
                 gain=float(rng.uniform(gain_min, gain_max)))
        for v in range(N_VOICES)
    )
    stems = np.stack([
        render_stem(specs[v], sr, n_samples, seed=full_seed, vibrato_hz=vibrato_hz)
        for v in range(N_VOICES)
    ])
    mixture = stems.sum(axis=0)
    peak = float(np.abs(mixture).max())
    if peak > 0.99:
        stems = stems * np.float32(0.99 / peak)
        mixture = stems.sum(axis=0)
    return RenderedExample(stems=stems, mixture=mixture, specs=specs,
                           seed=int(seed), split=split)


def render_reference(spec: StemSpec, sr: int, n_samples: int, seed: int,
                     vibrato_hz: float = 5.0) -> np.ndarray:
    """Same pitch material and timbre class, different seeded render (the
    'different temporal window of the same track' stand-in)."""
    return render_stem(spec, sr, n_samples, seed=seed ^ 0x7E5F1234, vibrato_hz=vibrato_hz)


def render_class_reference(voice: int, timbre: TimbreClass, sr: int, n_samples: int,
                           seed: int, n_events: int = 4, gain: float = 0.8,
                           vibrato_hz: float = 5.0) -> np.ndarray:
    """A reference clip of the target instrument from an unrelated track:
    fresh seeded pitch material in the given voice's register."""
    rng = make_rng(seed, 0x4EF)
    event_len = n_samples // n_events
    notes = _sample_notes(rng, n_events, event_len)[voice]
    spec = StemSpec(voice=voice, note_events=notes, timbre=timbre, gain=gain)
    return render_stem(spec, sr, n_samples, seed=seed, vibrato_hz=vibrato_hz)


def make_pseudo_stems(example: RenderedExample, leakage: float,
                      noise_snr_db: float, seed: int) -> np.ndarray:
    """Separator-error oracle: pseudo_i = stem_i + leakage*(sum of others) + noise,
    with noise power set so 10*log10(P_stem/P_noise) = noise_snr_db."""
    if leakage < 0:
        raise ValueError("leakage must be >= 0")
    rng = make_rng(seed, 0x9588)
    out = np.empty_like(example.stems)
    for i in range(example.stems.shape[0]):
        stem = example.stems[i].astype(np.float64)
        others = example.mixture.astype(np.float64) - stem
        pseudo = stem + leakage * others
        p_stem = float((stem * stem).mean())
        if np.isfinite(noise_snr_db) and p_stem > 0:
            p_noise = p_stem * 10.0 ** (-noise_snr_db / 10.0)
            pseudo = pseudo + rng.normal(0.0, np.sqrt(p_noise), stem.shape)
        else:
            rng.normal(0.0, 1.0, stem.shape)  # keep the stream position fixed
        out[i] = pseudo.astype(np.float32)
    return out


# -- WAV and manifest I/O ------------------------------------------------------


def export_wav(waveform: np.ndarray, path, sr: int, normalize: bool = False) -> None:
    """16-bit PCM mono WAV. Errors on clipping input unless normalize is set."""
    x = np.asarray(waveform, dtype=np.float64)
    peak = float(np.abs(x).max()) if x.size else 0.0
    if peak > 1.0:
        if not normalize:
            raise ValueError(f"samples clip (peak {peak:.3f}); pass normalize=True")
        x = x / peak
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sr)
        w.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError("expected 16-bit mono WAV")
        sr = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return (pcm.astype(np.float32) / 32767.0), sr


def write_manifest(path, records) -> None:
    """Line-delimited corpus records: seed, split, ensemble class ids."""
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps({"seed": rec["seed"], "split": rec["split"],
                                "ensemble": list(rec["ensemble"])}) + "\n")


def load_manifest(path) -> list[dict]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def default_manifest(n_train: int, n_val: int, n_test: int) -> list[dict]:
    """The deterministic desk corpus: example i of a split has seed i."""
    records = []
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        for i in range(n):
            ens = sample_ensemble(make_rng(SPLIT_BASE[split] + i, 0xE45))
            records.append({"seed": i, "split": split, "ensemble": [c.id for c in ens]})
    return records
