"""Objective evaluation primitives: autocorrelation F0 tracking with MIDI
quantization, Jaccard distance on pitch contours, DFT-folded chroma cosine
similarity, and the Frechet distance over embedding statistics."""

from __future__ import annotations

import numpy as np


def midi_from_hz(f0: float) -> int:
    return int(np.round(69.0 + 12.0 * np.log2(f0 / 440.0)))


def frame_signal(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    """Fully-contained frames [n, frame]; n = 1 + (len - frame) // hop."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < frame:
        raise ValueError("signal shorter than one frame")
    n = 1 + (x.shape[-1] - frame) // hop
    s = x.strides[-1]
    return np.lib.stride_tricks.as_strided(x, shape=(n, frame), strides=(s * hop, s)).copy()


def estimate_f0(waveform: np.ndarray, sr: int, frame: int = 512, hop: int = 256,
                fmin: float = 70.0, fmax: float = 900.0,
                threshold: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame (voiced flag, MIDI pitch) via normalized autocorrelation.

    A frame is voiced when the best peak's normalized height clears the
    prominence threshold; the smallest lag within 10% of the best peak wins
    (guards the octave-down error), refined by parabolic interpolation.
    """
    if frame < 2 * sr / fmin:
        raise ValueError("frame must cover at least two periods of the lowest f0")
    frames = frame_signal(waveform, frame, hop)
    frames = frames - frames.mean(axis=1, keepdims=True)
    min_lag = max(int(np.floor(sr / fmax)), 2)
    max_lag = min(int(np.ceil(sr / fmin)), frame - 2)
    # FFT autocorrelation per frame
    nfft = 1
    while nfft < 2 * frame:
        nfft *= 2
    spec = np.fft.rfft(frames, nfft, axis=1)
    ac = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, : max_lag + 2]
    voiced = np.zeros(len(frames), dtype=bool)
    midi = np.zeros(len(frames), dtype=np.int64)
    for i, r in enumerate(ac):
        r0 = r[0]
        if r0 < 1e-10:
            continue
        norm = r / r0
        seg = norm[min_lag : max_lag + 1]
        local = (seg[1:-1] >= seg[:-2]) & (seg[1:-1] >= seg[2:])
        peaks = np.where(local)[0] + 1 + min_lag
        if len(peaks) == 0:
            continue
        best = float(norm[peaks].max())
        if best < threshold:
            continue
        lag = int(peaks[norm[peaks] >= 0.9 * best].min())
        # parabolic refinement around the integer lag
        a, b, c = norm[lag - 1], norm[lag], norm[lag + 1]
        denom = a - 2 * b + c
        delta = 0.5 * (a - c) / denom if abs(denom) > 1e-12 else 0.0
        delta = float(np.clip(delta, -0.5, 0.5))
        f0 = sr / (lag + delta)
        if not (fmin <= f0 <= fmax * 1.1):
            continue
        voiced[i] = True
        midi[i] = midi_from_hz(f0)
    return voiced, midi


def oracle_contour(spec, sr: int, n_samples: int, frame: int = 512,
                   hop: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth per-frame contour from a StemSpec. A frame is voiced only
    when one note event covers it entirely; a frame straddling two notes has
    no well-defined pitch and is left unvoiced."""
    n = 1 + (n_samples - frame) // hop
    starts = np.arange(n) * hop
    voiced = np.zeros(n, dtype=bool)
    midi = np.zeros(n, dtype=np.int64)
    for onset, dur, pitch in spec.note_events:
        inside = (starts >= onset) & (starts + frame <= onset + dur)
        voiced[inside] = True
        midi[inside] = pitch
    return voiced, midi


def jaccard_distance(src: tuple[np.ndarray, np.ndarray],
                     gen: tuple[np.ndarray, np.ndarray]) -> float:
    """1 - |frames voiced in both with equal pitch| / |frames voiced in either|;
    0 when neither contour has voiced frames."""
    sv, sm = src
    gv, gm = gen
    if len(sv) != len(gv):
        raise ValueError(f"contour length mismatch: {len(sv)} vs {len(gv)}")
    either = sv | gv
    if not np.any(either):
        return 0.0
    both = sv & gv & (sm == gm)
    return 1.0 - float(both.sum()) / float(either.sum())


def log_spectrogram(x: np.ndarray, window: int = 64, hop: int = 32) -> np.ndarray:
    """log(1+|STFT|) frames [n, window//2+1] with a Hann window."""
    xp = np.pad(np.asarray(x, dtype=np.float64), (0, window - hop))
    n = (len(xp) - window) // hop + 1
    s = xp.strides[-1]
    frames = np.lib.stride_tricks.as_strided(xp, shape=(n, window), strides=(s * hop, s))
    return np.log1p(np.abs(np.fft.rfft(frames * np.hanning(window), axis=1)))


def chroma_frames(x: np.ndarray, sr: int, frame: int = 1024, hop: int = 512,
                  fmin: float = 50.0) -> np.ndarray:
    """Per-frame 12-bin pitch-class profiles; bin magnitudes folded onto the
    pitch class of each frequency's nearest MIDI note."""
    frames = frame_signal(x, frame, hop) * np.hanning(frame)
    mags = np.abs(np.fft.rfft(frames, axis=1))
    freqs = np.fft.rfftfreq(frame, 1.0 / sr)
    keep = freqs >= fmin
    pcs = np.mod(np.round(69.0 + 12.0 * np.log2(freqs[keep] / 440.0)).astype(int), 12)
    chroma = np.zeros((len(frames), 12))
    for pc in range(12):
        sel = pcs == pc
        if np.any(sel):
            chroma[:, pc] = mags[:, keep][:, sel].sum(axis=1)
    return chroma


def chroma_cosine(mix_a: np.ndarray, mix_b: np.ndarray, sr: int, frame: int = 1024,
                  hop: int = 512) -> float:
    """Mean per-frame cosine similarity of chroma profiles; frames with zero
    energy in either signal are skipped."""
    if len(mix_a) != len(mix_b):
        raise ValueError("signals must have equal length")
    ca = chroma_frames(mix_a, sr, frame, hop)
    cb = chroma_frames(mix_b, sr, frame, hop)
    na = np.linalg.norm(ca, axis=1)
    nb = np.linalg.norm(cb, axis=1)
    ok = (na > 1e-9) & (nb > 1e-9)
    if not np.any(ok):
        return 0.0
    cos = (ca[ok] * cb[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return float(cos.mean())


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Matrix square root of a symmetric PSD matrix, clamping negative
    eigenvalues from numerical noise."""
    w, v = np.linalg.eigh((mat + mat.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}) over embedding sets."""
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensions differ")
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise ValueError(f"need at least dim+1 = {d + 1} samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False).reshape(d, d)
    cov_b = np.cov(b, rowvar=False).reshape(d, d)
    root_a = _sym_sqrt(cov_a)
    cross = _sym_sqrt(root_a @ cov_b @ root_a)
    val = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b)
                - 2.0 * np.trace(cross))
    return max(val, 0.0)
