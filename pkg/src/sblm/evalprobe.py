"""Evaluation: mel cepstral distortion, post-hoc vowel probes with
confusion matrices, and the per-variant metric report with pairwise
metric correlations.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import kernels, ndl
from .corpus import VOWEL_LIST
from .dsp import MelSpectrogram, mel_cepstrum
from .errors import DegenerateLabelError, ShapeError, ValidationError

log = logging.getLogger(__name__)

MCD_CONST = 10.0 * math.sqrt(2.0) / math.log(10.0)
N_CLASSES = len(VOWEL_LIST)


# ------------------------------------------------------------------ MCD

@dataclass
class McdResult:
    value: float
    frames_compared: int
    alignment: object  # "plain" or the (L, 2) DTW path


def _cepstra(x):
    if isinstance(x, MelSpectrogram):
        return mel_cepstrum(x)
    return np.asarray(x, dtype=np.float64)


def mcd(ref, gen, align="dtw"):
    """``MCD_CONST`` times the mean Euclidean cepstral distance along the
    alignment. Inputs are mel spectrograms or ready-made cepstra (T x 13)."""
    a, b = _cepstra(ref), _cepstra(gen)
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("mcd needs non-empty inputs")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cepstral orders differ: {a.shape[1]} vs {b.shape[1]}")
    if align == "plain":
        if len(a) != len(b):
            raise ShapeError("plain alignment needs equal lengths")
        d = np.sqrt(np.sum((a - b) ** 2, axis=1))
        return McdResult(MCD_CONST * float(d.mean()), len(a), "plain")
    if align != "dtw":
        raise ValidationError(f"unknown alignment {align!r}")
    acc, path = kernels.dtw(np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)))
    total = acc[-1, -1]
    return McdResult(MCD_CONST * float(total) / len(path), len(path), path)


# ------------------------------------------------------------------ probes

@dataclass
class ProbeModel:
    W: np.ndarray
    b: np.ndarray
    losses: list

    def predict(self, X):
        return np.argmax(np.asarray(X, dtype=np.float64) @ self.W.T + self.b, axis=1)


def vowel_ids(vowels):
    index = {v: i for i, v in enumerate(VOWEL_LIST)}
    try:
        return np.array([index[v] for v in vowels], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"not a vowel label: {exc.args[0]!r}") from None


def probe_train(features, labels, steps=2000, lr=0.1, l2=1e-4, n_classes=N_CLASSES):
    """Multinomial logistic regression by full-batch gradient descent from zeros."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError("features must be N x D with one label per row")
    if len(y) < n_classes:
        raise ValidationError(f"probe needs at least {n_classes} examples, got {len(y)}")
    if len(np.unique(y)) < 2:
        raise DegenerateLabelError("probe labels contain a single class")
    W = np.zeros((n_classes, X.shape[1]))
    b = np.zeros(n_classes)
    losses = []
    for _ in range(steps):
        loss, dlogits, _ = ndl.softmax_xent(X @ W.T + b, y)
        losses.append(loss + 0.5 * l2 * float(np.sum(W * W)))
        W -= lr * (dlogits.T @ X + l2 * W)
        b -= lr * dlogits.sum(axis=0)
    ndl.check_finite("probe weights", W)
    return ProbeModel(W, b, losses)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    labels: tuple = VOWEL_LIST

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    @property
    def recall(self):
        support = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, np.diag(self.counts) / np.maximum(support, 1), np.nan)

    @property
    def majority_share(self):
        cols = self.counts.sum(axis=0)
        return float(cols.max() / self.total) if self.total else 0.0

    @property
    def majority_classifier(self):
        """One predicted class covers more than 90% of predictions."""
        return self.majority_share > 0.9

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *self.labels])
            for lab, row in zip(self.labels, self.counts):
                w.writerow([lab, *row.tolist()])


def confusion(true, pred, n_classes=N_CLASSES):
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(true), np.asarray(pred)), 1)
    return ConfusionMatrix(m, VOWEL_LIST if n_classes == N_CLASSES else tuple(range(n_classes)))


def probe_eval(model: ProbeModel, features, labels, n_classes=N_CLASSES):
    return confusion(labels, model.predict(features), n_classes)


def probe_dataset(examples, source, model=None):
    """Features/labels for predicting the vowel of the next unit.

    ``source`` is ``"panphon"`` (next unit's 66-dim vector) or ``"latent"``
    (encoder context ``z`` of ``model``).
    """
    ex = [e for e in examples if e.target_vowel is not None]
    labels = vowel_ids([e.target_vowel for e in ex])
    if source == "panphon":
        X = np.stack([np.asarray(e.panphon, dtype=np.float64) for e in ex])
    elif source == "latent":
        if model is None:
            raise ValidationError("latent probe needs a speech-LM")
        X = model.latents(ex, augmented=False).astype(np.float64)
    else:
        raise ValidationError(f"unknown probe source {source!r}")
    return X, labels


@dataclass
class ProbeOutcome:
    source: str
    train: ConfusionMatrix
    test: ConfusionMatrix


def run_probe(source, train_examples, test_examples, model=None, **kw):
    Xtr, ytr = probe_dataset(train_examples, source, model)
    Xte, yte = probe_dataset(test_examples, source, model)
    pm = probe_train(Xtr, ytr, **kw)
    return ProbeOutcome(source, probe_eval(pm, Xtr, ytr), probe_eval(pm, Xte, yte))


# ------------------------------------------------------------------ report

REPORT_FIELDS = ("variant", "val_mse", "mcd_mean", "probe_accuracy", "textlm_ppl")


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float(np.sum(dx * dx) * np.sum(dy * dy)))
    return float(np.sum(dx * dy) / den) if den > 0 else float("nan")


def correlations(rows, metrics=("val_mse", "mcd_mean", "probe_accuracy")):
    """Pearson r for every metric pair, on values and on ranks."""
    out = []
    if len(rows) < 3:
        return out
    for i, a in enumerate(metrics):
        for b in metrics[i + 1:]:
            xa = [r[a] for r in rows]
            xb = [r[b] for r in rows]
            out.append({"metric_a": a, "metric_b": b, "pearson": pearson(xa, xb),
                        "pearson_rank": pearson(rankdata(xa), rankdata(xb))})
    return out


def reference_spans(mels, n_frames, rng, draws=10):
    """``draws`` random ``n_frames``-long spans from held-out spectrograms."""
    ok = [m for m in mels if m.n_frames >= n_frames]
    if not ok:
        raise ValidationError(f"no held-out spectrogram has {n_frames} frames")
    spans = []
    for _ in range(draws):
        m = ok[int(rng.integers(len(ok)))]
        s = int(rng.integers(m.n_frames - n_frames + 1))
        spans.append(m.slice(s, s + n_frames))
    return spans


def sample_mcd(gen_frames, ref_mels, rng, draws=10, hop_seconds=128 / 22050):
    gen = MelSpectrogram(gen_frames, hop_seconds)
    cg = mel_cepstrum(gen)
    vals = [mcd(mel_cepstrum(r), cg).value for r in reference_spans(ref_mels, len(gen_frames), rng, draws)]
    return float(np.mean(vals))


def write_report(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in REPORT_FIELDS})


def write_correlations(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("metric_a", "metric_b", "pearson", "pearson_rank"),
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


# ------------------------------------------------------------------ structure

def frame_energy(frames):
    """Per-frame log of the summed mel power."""
    f = np.asarray(frames, dtype=np.float64)
    top = f.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(f - top).sum(axis=1, keepdims=True)))[:, 0]


def energy_segments(frames, min_len=3, threshold=None):
    """Maximal runs of at least ``min_len`` frames whose energy exceeds the
    midpoint between the 10th and 90th energy percentiles (or ``threshold``)."""
    e = frame_energy(frames)
    if len(e) == 0:
        return [], 0.0
    if threshold is None:
        lo, hi = np.percentile(e, [10, 90])
        threshold = 0.5 * (lo + hi)
    above = e > threshold
    segs, start = [], None
    for t, a in enumerate(np.append(above, False)):
        if a and start is None:
            start = t
        elif not a and start is not None:
            if t - start >= min_len:
                segs.append((start, t))
            start = None
    return segs, float(threshold)


def reset_separated_segments(frames, unit_lengths, min_len=3, tol=2):
    """Energy segments whose separating low-energy gap contains (within
    ``tol`` frames) a boundary between generated units.

    Returns ``(count, segments, boundaries)``; the first segment always counts.
    """
    segs, _ = energy_segments(frames, min_len)
    bounds = np.cumsum(unit_lengths)[:-1] if len(unit_lengths) else np.zeros(0)
    count = 0
    for k, (s, e) in enumerate(segs):
        if k == 0:
            count += 1
            continue
        gap_lo, gap_hi = segs[k - 1][1], s
        if np.any((bounds >= gap_lo - tol) & (bounds <= gap_hi + tol)):
            count += 1
    return count, segs, bounds.tolist()
