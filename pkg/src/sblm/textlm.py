"""Sub-word text LM: vocabulary, CBOW embedding pretraining, an LSTM LM
with tied input/output embeddings, and the context embedding that the
auxiliary speech-LM variant consumes.

Token streams are lists of utterances, each a list of unit labels.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndl
from .errors import DivergenceError, NumericError, ValidationError

log = logging.getLogger(__name__)

UNK = "<unk>"
BOS = "<s>"
EMBED_DIM = 768


class SubwordVocab:
    """Label <-> id. Ids 0 and 1 are UNK and BOS."""

    def __init__(self, labels):
        labels = list(labels)
        if labels[:2] != [UNK, BOS]:
            raise ValidationError("vocabulary must start with the UNK and BOS entries")
        if len(set(labels)) != len(labels):
            raise ValidationError("duplicate labels in vocabulary")
        self.labels = labels
        self.index = {t: i for i, t in enumerate(labels)}

    @classmethod
    def build(cls, utterances, min_count=2):
        c = Counter(t for utt in utterances for t in utt)
        keep = sorted((t for t, n in c.items() if n >= min_count and t not in (UNK, BOS)),
                      key=lambda t: (-c[t], t))
        return cls([UNK, BOS, *keep])

    def __len__(self):
        return len(self.labels)

    @property
    def unk(self):
        return 0

    @property
    def bos(self):
        return 1

    def id(self, label):
        return self.index.get(label, 0)

    def encode(self, tokens):
        return np.array([self.id(t) for t in tokens], dtype=np.int64)

    def stream(self, utterances):
        """BOS-separated id stream: ``BOS u1 ... BOS u2 ...``."""
        ids = []
        for utt in utterances:
            ids.append(self.bos)
            ids.extend(self.id(t) for t in utt)
        return np.array(ids, dtype=np.int64)

    def write(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.labels), encoding="utf-8")

    @classmethod
    def read(cls, path):
        return cls([line.rstrip("\n") for line in open(path, encoding="utf-8") if line.strip()])


def read_token_stream(path):
    """Whitespace-separated labels, one utterance per line."""
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh if line.strip()]


def write_token_stream(path, utterances):
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utterances:
            fh.write(" ".join(utt) + "\n")


# ------------------------------------------------------------------ CBOW

@dataclass
class CbowResult:
    W_in: np.ndarray
    W_out: np.ndarray
    losses: list


def cbow_pretrain(utterances, vocab: SubwordVocab, dim=EMBED_DIM, window=4, negatives=5,
                  epochs=5, lr=0.05, batch=64, seed=0):
    """CBOW with negative sampling: the mean of the (up to ``window`` each
    side) context vectors scores the centre token against ``negatives``
    draws from the unigram^0.75 distribution. Plain SGD on mini-batches.
    """
    if negatives < 1:
        raise ValidationError("CBOW needs at least one negative sample")
    if len(vocab) < 2:
        raise ValidationError("vocabulary too small for CBOW")
    rng = np.random.default_rng(seed)
    V = len(vocab)
    W_in = ((rng.random((V, dim)) - 0.5) / dim).astype(np.float64)
    W_out = np.zeros((V, dim))
    counts = np.zeros(V)
    examples = []
    for utt in utterances:
        ids = vocab.encode(utt)
        np.add.at(counts, ids, 1)
        for i in range(len(ids)):
            ctx = np.concatenate([ids[max(0, i - window):i], ids[i + 1:i + 1 + window]])
            if len(ctx):
                examples.append((ids[i], ctx))
    if not examples:
        raise ValidationError("no CBOW training examples (utterances too short)")
    noise = counts ** 0.75
    noise /= noise.sum()
    losses = []
    for ep in range(epochs):
        order = rng.permutation(len(examples))
        total = 0.0
        for s in range(0, len(order), batch):
            idx = order[s:s + batch]
            n = len(idx)
            centre = np.array([examples[j][0] for j in idx])
            width = max(len(examples[j][1]) for j in idx)
            ctx = np.zeros((n, width), dtype=np.int64)
            cmask = np.zeros((n, width))
            for r, j in enumerate(idx):
                c = examples[j][1]
                ctx[r, :len(c)] = c
                cmask[r, :len(c)] = 1.0
            denom = cmask.sum(axis=1, keepdims=True)
            h = (W_in[ctx] * cmask[:, :, None]).sum(axis=1) / denom
            neg = rng.choice(V, size=(n, negatives), p=noise)
            targets = np.concatenate([centre[:, None], neg], axis=1)
            sign = np.ones((n, 1 + negatives))
            sign[:, 1:] = -1.0
            out = W_out[targets]
            score = np.einsum("nkd,nd->nk", out, h) * sign
            # -log sigmoid(score), stable
            total += float(np.sum(np.logaddexp(0.0, -score)))
            g = -ndl.sigmoid(-score) * sign / n
            dh = np.einsum("nk,nkd->nd", g, out)
            dout = g[:, :, None] * h[:, None, :]
            np.add.at(W_out, targets.reshape(-1), -lr * dout.reshape(-1, dim))
            dctx = (dh / denom)[:, None, :] * cmask[:, :, None]
            np.add.at(W_in, ctx.reshape(-1), -lr * dctx.reshape(-1, dim))
        losses.append(total / len(examples))
        log.info("cbow epoch %d loss %.4f", ep + 1, losses[-1])
    ndl.check_finite("cbow embeddings", W_in)
    return CbowResult(W_in, W_out, losses)


# ------------------------------------------------------------------ LSTM LM

class TextLM:
    """LSTM LM; the output layer reuses the embedding matrix (tied)."""

    def __init__(self, vocab: SubwordVocab, dim=EMBED_DIM, seed=0, init: CbowResult | None = None,
                 dtype=np.float32):
        self.vocab = vocab
        self.dim = dim
        rng = np.random.default_rng(seed)
        V = len(vocab)
        p = {"embed.E": rng.uniform(-0.1, 0.1, (V, dim)).astype(dtype)}
        p.update(ndl.prefixed("lstm", ndl.init_lstm(rng, dim, dim, dtype)))
        p["out.b"] = np.zeros(V, dtype=dtype)
        self.init = "random"
        if init is not None:
            if init.W_in.shape != (V, dim):
                raise ValidationError(f"CBOW embeddings {init.W_in.shape} do not fit vocab/dim {(V, dim)}")
            p["embed.E"] = init.W_in.astype(dtype)
            self.init = "cbow"
        self.params = p
        self._cache = {}

    @property
    def dtype(self):
        return self.params["embed.E"].dtype

    # forward over a (T, B) id block from a given state
    def _forward(self, ids, h0, c0):
        p = self.params
        X = p["embed.E"][ids]
        H_all, h, c, cache = ndl.lstm_forward(X, h0, c0, ndl.sub(p, "lstm"))
        logits = H_all @ p["embed.E"].T + p["out.b"]
        return logits, h, c, (X, H_all, cache)

    def loss(self, inputs, targets, h0, c0, with_grads=True):
        """Mean next-token cross-entropy of a ``(T, B)`` block."""
        T, B = inputs.shape
        logits, h, c, (X, H_all, cache) = self._forward(inputs, h0, c0)
        loss, dlogits, _ = ndl.softmax_xent(logits.reshape(T * B, -1), targets.reshape(-1))
        if not math.isfinite(loss):
            raise NumericError("text LM loss is not finite")
        if not with_grads:
            return loss, None, h, c
        p = self.params
        dlogits = dlogits.astype(self.dtype)
        Hf = H_all.reshape(T * B, -1)
        gE = dlogits.T @ Hf
        dH = (dlogits @ p["embed.E"]).reshape(H_all.shape)
        g, dX, _, _ = ndl.lstm_backward(cache, ndl.sub(p, "lstm"), dH_all=dH)
        np.add.at(gE, inputs.reshape(-1), dX.reshape(T * B, -1))
        grads = {"embed.E": gE, **ndl.prefixed("lstm", g), "out.b": dlogits.sum(axis=0)}
        return loss, grads, h, c

    def zero_state(self, B):
        z = np.zeros((B, self.dim), dtype=self.dtype)
        return z, z.copy()

    def predict_stream(self, ids):
        """Log-probabilities of ``ids[1:]`` given the running prefix."""
        ids = np.asarray(ids, dtype=np.int64)
        h, c = self.zero_state(1)
        out = []
        for s in range(0, len(ids) - 1, 256):
            block = ids[s:min(s + 256, len(ids) - 1)]
            logits, h, c, _ = self._forward(block[:, None], h, c)
            z = logits[:, 0].astype(np.float64)
            z -= z.max(axis=1, keepdims=True)
            out.append(z - np.log(np.exp(z).sum(axis=1, keepdims=True)))
        return np.concatenate(out) if out else np.zeros((0, len(self.vocab)))

    def context_embedding(self, tokens):
        """Final hidden state after reading ``tokens`` from the zero state."""
        key = tuple(self.vocab.id(t) for t in tokens)
        if key not in self._cache:
            h, c = self.zero_state(1)
            if key:
                ids = np.array(key, dtype=np.int64)[:, None]
                X = self.params["embed.E"][ids]
                _, h, _, _ = ndl.lstm_forward(X, h, c, ndl.sub(self.params, "lstm"))
            self._cache[key] = h[0].astype(np.float32)
            self._cache[key].setflags(write=False)
        return self._cache[key]

    def save(self, path, meta=None):
        ndl.save_params(path, self.params, "textlm",
                        {"component": "textlm", "init": self.init, "dim": self.dim,
                         "vocab": self.vocab.labels, **(meta or {})})

    @classmethod
    def load(cls, path):
        header = ndl.read_header(path)
        meta = header["meta"]
        if meta.get("component") != "textlm":
            raise ValidationError(f"{path}: not a text-LM checkpoint")
        model = cls(SubwordVocab(meta["vocab"]), meta["dim"])
        model.params, _ = ndl.load_params(path, expected=model.params)
        model.init = meta.get("init", "random")
        return model


# ------------------------------------------------------------------ metrics

@dataclass
class LmMetrics:
    perplexity: float
    accuracy: float
    n_tokens: int


def score_predictions(logp, targets):
    """Perplexity and top-1 accuracy from per-position log-probabilities."""
    logp = np.asarray(logp, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        raise ValidationError("cannot score an empty stream")
    nll = -logp[np.arange(len(targets)), targets].mean()
    acc = float(np.mean(logp.argmax(axis=1) == targets))
    return LmMetrics(float(math.exp(nll)), acc, len(targets))


def evaluate_lm(model: TextLM, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) < 2:
        raise ValidationError("cannot score an empty stream")
    return score_predictions(model.predict_stream(ids), ids[1:])


def unigram_perplexity(train_ids, eval_ids, V):
    """Add-one smoothed unigram perplexity of ``eval_ids[1:]``."""
    counts = np.bincount(np.asarray(train_ids[1:]), minlength=V) + 1.0
    logp = np.log(counts / counts.sum())
    return float(math.exp(-logp[np.asarray(eval_ids[1:])].mean()))


# ------------------------------------------------------------------ training

@dataclass
class LmTrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch: int = 16
    bptt: int = 32
    clip: float = 5.0
    seed: int = 0


@dataclass
class LmTrainResult:
    curve: list = field(default_factory=list)
    steps: int = 0


def _batchify(ids, B):
    n = len(ids) // B
    if n < 2:
        raise ValidationError(f"stream of {len(ids)} tokens is too short for batch {B}")
    return ids[:n * B].reshape(B, n).T  # (n, B)


def lm_train(model: TextLM, train_ids, val_ids=None, cfg: LmTrainConfig = LmTrainConfig(),
             out_dir=None):
    """Truncated BPTT over ``cfg.batch`` parallel slices of the stream.

    Each epoch starts at a seeded random offset so the window boundaries move.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = ndl.Adam(model.params, lr=cfg.lr)
    res = LmTrainResult()
    out = Path(out_dir) if out_dir else None
    last_good = None
    train_ids = np.asarray(train_ids, dtype=np.int64)
    B = min(cfg.batch, max(1, len(train_ids) // 4))
    for epoch in range(1, cfg.epochs + 1):
        off = int(rng.integers(0, max(1, min(cfg.bptt, len(train_ids) // (2 * B)))))
        data = _batchify(train_ids[off:], B)
        h, c = model.zero_state(B)
        tot, n = 0.0, 0
        for s in range(0, len(data) - 1, cfg.bptt):
            T = min(cfg.bptt, len(data) - 1 - s)
            x, y = data[s:s + T], data[s + 1:s + 1 + T]
            try:
                loss, grads, h, c = model.loss(x, y, h, c)
                ndl.clip_grad_norm(grads, cfg.clip)
                opt.step(model.params, grads)
            except NumericError as exc:
                raise DivergenceError(f"text LM diverged at step {res.steps + 1}: {exc}",
                                      last_good) from exc
            res.steps += 1
            tot += loss * T
            n += T
        model._cache.clear()
        row = {"epoch": epoch, "train_loss": tot / n}
        if val_ids is not None and len(val_ids) > 1:
            m = evaluate_lm(model, val_ids)
            row.update(val_ppl=m.perplexity, val_acc=m.accuracy)
        res.curve.append(row)
        log.info("textlm epoch %d %s", epoch, row)
        if out:
            out.mkdir(parents=True, exist_ok=True)
            last_good = out / "textlm_last.sblm"
            model.save(last_good, {"epoch": epoch})
    return res
