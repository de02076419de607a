"""Toy instrument classifier for the objective metrics: per-frame conv net on
log-magnitude spectrogram frames. Supplies the target-class confidence score
and the 16-d penultimate embeddings behind the Frechet-distance analog."""

from __future__ import annotations

import numpy as np

from .codec import Codec
from .corpus import N_CLASSES, sample_example
from .metrics import log_spectrogram
from .nn import Conv1d, Linear, Module
from .optim import AdamW
from .tensor import Tape, Tensor, gelu, make_rng, mean

EMBED_DIM = 16


class EvalClassifier(Module):
    """Frame classifier over K instrument classes; penultimate layer is the
    embedding space for distribution metrics."""

    def __init__(self, rng, n_bins: int = 33, n_classes: int = N_CLASSES):
        self.n_bins = n_bins
        self.n_classes = n_classes
        self.conv1 = Conv1d(1, 16, 5, rng, stride=2)
        self.conv2 = Conv1d(16, 16, 5, rng, stride=2)
        flat = 16 * self.conv2.out_len(self.conv1.out_len(n_bins))
        self.fc_embed = Linear(flat, EMBED_DIM, rng)
        self.fc_out = Linear(EMBED_DIM, n_classes, rng)
        self.trained = False

    def __call__(self, frames: Tensor) -> tuple[Tensor, Tensor]:
        """[N, n_bins] -> (logits [N, K], embeddings [N, 16])."""
        n = frames.shape[0]
        h = frames.reshape(n, 1, self.n_bins)
        h = gelu(self.conv1(h))
        h = gelu(self.conv2(h))
        emb = gelu(self.fc_embed(h.reshape(n, -1)))
        return self.fc_out(emb), emb

    # -- measurements ---------------------------------------------------------
    def _frames(self, waveform: np.ndarray) -> np.ndarray:
        return log_spectrogram(waveform).astype(np.float32)

    def confidence(self, waveform: np.ndarray, target_class: int) -> float:
        """Mean over frames of softmax probability assigned to the target."""
        if not self.trained:
            raise RuntimeError("eval classifier has not been trained")
        logits, _ = self(Tensor(self._frames(waveform)))
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        return float(p[:, target_class].mean())

    def embed_clip(self, waveform: np.ndarray) -> np.ndarray:
        """Clip embedding: mean penultimate feature over frames."""
        if not self.trained:
            raise RuntimeError("eval classifier has not been trained")
        _, emb = self(Tensor(self._frames(waveform)))
        return emb.data.mean(axis=0)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross entropy; max subtracted as a detached constant."""
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits - Tensor(m)
    from .tensor import exp as _exp, log as _log
    lse = _log(_exp(shifted).sum(axis=1))
    onehot = np.zeros(logits.shape, dtype=np.float32)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = (shifted * Tensor(onehot)).sum(axis=1)
    return mean(lse - picked)


def train_eval_classifier(codec: Codec, *, sr: int, n_samples: int, n_train: int,
                          steps: int = 1500, lr: float = 1e-3, batch: int = 128,
                          frames_per_stem: int = 24, max_examples: int = 256,
                          seed: int = 0xEC15) -> EvalClassifier:
    """Train on frames of raw and codec-roundtripped renders (the evaluation
    domain contains both), labels = timbre class ids."""
    rng = make_rng(seed)
    clf = EvalClassifier(rng)
    n_ex = min(n_train, max_examples)
    feats, labels = [], []
    for i in range(n_ex):
        ex = sample_example(i, "train", sr=sr, n_samples=n_samples)
        for v in range(4):
            stem = ex.stems[v]
            rt = codec.decode(codec.encode(stem))
            for wav in (stem, rt):
                fr = log_spectrogram(wav)
                keep = rng.choice(len(fr), size=min(frames_per_stem, len(fr)), replace=False)
                feats.append(fr[keep])
                labels.append(np.full(len(keep), ex.specs[v].timbre.id))
    feats = np.concatenate(feats).astype(np.float32)
    labels = np.concatenate(labels)
    # drop near-silent frames: they carry no class information
    energetic = feats.max(axis=1) > 0.05
    feats, labels = feats[energetic], labels[energetic]
    opt = AdamW(list(clf.named_parameters()), lr=lr, weight_decay=1e-4)
    for step in range(steps):
        idx = rng.integers(0, len(feats), batch)
        with Tape() as tape:
            logits, _ = clf(Tensor(feats[idx]))
            loss = cross_entropy(logits, labels[idx])
            tape.backward(loss)
        opt.step()
        opt.zero_grad()
    clf.trained = True
    return clf


def save_classifier(clf: EvalClassifier, path) -> None:
    from .checkpoint import save_checkpoint
    if not clf.trained:
        raise RuntimeError("refusing to save an untrained eval classifier")
    meta = f"evalcls n_bins={clf.n_bins} n_classes={clf.n_classes}"
    save_checkpoint(path, meta, dict(clf.state_dict()))


def load_classifier(path) -> EvalClassifier:
    from .checkpoint import load_checkpoint
    meta, arrays = load_checkpoint(path)
    if not meta.startswith("evalcls"):
        raise ValueError("not an eval classifier artifact")
    fields = dict(kv.split("=") for kv in meta.split()[1:])
    clf = EvalClassifier(make_rng(0), n_bins=int(fields["n_bins"]),
                         n_classes=int(fields["n_classes"]))
    clf.load_state_dict(arrays)
    clf.trained = True
    return clf


def classifier_accuracy(clf: EvalClassifier, codec: Codec, *, sr: int, n_samples: int,
                        split: str = "val", n_examples: int = 32,
                        roundtrip: bool = True) -> float:
    """Held-out clip accuracy of the argmax of mean softmax."""
    hits = total = 0
    for i in range(n_examples):
        ex = sample_example(i, split, sr=sr, n_samples=n_samples)
        for v in range(4):
            wav = ex.stems[v]
            if roundtrip:
                wav = codec.decode(codec.encode(wav))
            probs = [clf.confidence(wav, k) for k in range(clf.n_classes)]
            hits += int(np.argmax(probs) == ex.specs[v].timbre.id)
            total += 1
    return hits / total
