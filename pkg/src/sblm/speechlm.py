"""Encoder-decoder speech LM over sub-word units.

One encoder LSTM (shared across all context positions) turns each context
unit's frames into a latent ``v``; the latents are concatenated into ``z``
and optionally extended with auxiliary features into ``z_aug``. The decoder
LSTM starts from a state projected from ``z_aug`` and emits the next unit's
frames; a linear head on ``z_aug`` predicts the log frame count.

Variants:

* ``synthesis_only`` - frames only
* ``mtl_panphon``    - plus a linear BCE head predicting the next unit's
  articulatory vector from ``z``
* ``aux_textlm``     - ``z_aug = z ++ text-LM context embedding``
* ``topline``        - ``z_aug = z ++ ground-truth articulatory vector``
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndl
from .errors import DivergenceError, NumericError, ShapeError, ValidationError

log = logging.getLogger(__name__)

SYNTHESIS_ONLY = "synthesis_only"
MTL_PANPHON = "mtl_panphon"
AUX_TEXTLM = "aux_textlm"
TOPLINE = "topline"
VARIANTS = (SYNTHESIS_ONLY, MTL_PANPHON, AUX_TEXTLM, TOPLINE)
FLOOR = math.log(1e-5)


@dataclass(frozen=True)
class Dims:
    mel: int = 80
    hidden: int = 256
    n_ctx: int = 4
    panphon: int = 66
    text: int = 768
    max_frames: int = 43

    @property
    def z(self):
        return self.n_ctx * self.hidden

    def aux(self, variant):
        return {AUX_TEXTLM: self.text, TOPLINE: self.panphon}.get(variant, 0)

    def z_aug(self, variant):
        return self.z + self.aux(variant)


@dataclass
class LatentContext:
    v: np.ndarray
    z: np.ndarray
    z_aug: np.ndarray


@dataclass
class Example:
    """One training window: context frames -> next unit."""
    context: list
    target: np.ndarray
    panphon: np.ndarray
    aux: np.ndarray | None = None
    context_labels: tuple = ()
    target_label: str = ""
    target_vowel: str | None = None


def _pad(seqs, dtype):
    T = max(len(s) for s in seqs)
    M = seqs[0].shape[1]
    X = np.zeros((T, len(seqs), M), dtype=dtype)
    mask = np.zeros((T, len(seqs)), dtype=bool)
    for i, s in enumerate(seqs):
        X[:len(s), i] = s
        mask[:len(s), i] = True
    return X, mask


class SpeechLM:
    def __init__(self, variant=SYNTHESIS_ONLY, dims=Dims(), lambda_mtl=1.0,
                 lambda_len=0.1, seed=0, dtype=np.float32, floor=FLOOR):
        if variant not in VARIANTS:
            raise ValidationError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        self.variant = variant
        self.dims = dims
        self.lambda_mtl = lambda_mtl
        self.lambda_len = lambda_len
        self.floor = floor
        rng = np.random.default_rng(seed)
        H, M, Za = dims.hidden, dims.mel, dims.z_aug(variant)
        p = {}
        p.update(ndl.prefixed("enc", ndl.init_lstm(rng, M, H, dtype)))
        p.update(ndl.prefixed("init", ndl.init_linear(rng, Za, 2 * H, dtype)))
        p.update(ndl.prefixed("dec", ndl.init_lstm(rng, M, H, dtype)))
        p.update(ndl.prefixed("head", ndl.init_linear(rng, H, M, dtype)))
        p.update(ndl.prefixed("len", ndl.init_linear(rng, Za, 1, dtype)))
        if variant == MTL_PANPHON:
            p.update(ndl.prefixed("mtl", ndl.init_linear(rng, dims.z, dims.panphon, dtype)))
        # fixed input standardization (not trained); identity until fitted
        p["norm.mu"] = np.zeros(M, dtype=dtype)
        p["norm.inv_sigma"] = np.ones(M, dtype=dtype)
        self.params = p
        self._check_dims()

    # -------------------------------------------------------------- bookkeeping

    def _check_dims(self):
        d, p = self.dims, self.params
        assert p["enc.W_hh"].shape == (4 * d.hidden, d.hidden)
        assert p["init.W"].shape == (2 * d.hidden, d.z_aug(self.variant))
        assert p["head.W"].shape == (d.mel, d.hidden)
        if self.variant == MTL_PANPHON:
            assert p["mtl.W"].shape == (d.panphon, d.z)

    def dimension_ledger(self):
        d = self.dims
        return {"v": self.params["enc.W_hh"].shape[1], "z": d.z,
                "z_aug": self.params["init.W"].shape[1],
                "frame": self.params["head.W"].shape[0], "panphon": d.panphon}

    def trainable(self):
        return [k for k in self.params if not k.startswith("norm.")]

    def fit_normalization(self, examples):
        """Per-bin mean/std of all frames in ``examples``; the frame head
        bias starts at the mean so an untrained model predicts it."""
        frames = np.concatenate([np.asarray(f) for ex in examples for f in (*ex.context, ex.target)])
        mu = frames.mean(axis=0)
        sigma = np.maximum(frames.std(axis=0), 1e-3)
        dt = self.dtype
        self.params["norm.mu"][...] = mu.astype(dt)
        self.params["norm.inv_sigma"][...] = (1.0 / sigma).astype(dt)
        self.params["head.b"][...] = mu.astype(dt)

    def _norm(self, x):
        return (x - self.params["norm.mu"]) * self.params["norm.inv_sigma"]

    @property
    def dtype(self):
        return self.params["enc.W_hh"].dtype

    def astype(self, dtype):
        other = object.__new__(SpeechLM)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return other

    def config(self):
        return {"variant": self.variant, "dims": asdict(self.dims),
                "lambda_mtl": self.lambda_mtl, "lambda_len": self.lambda_len,
                "floor": self.floor}

    def save(self, path, meta=None):
        ndl.save_params(path, self.params, self.variant,
                        {"component": "speechlm", "config": self.config(), **(meta or {})})

    @classmethod
    def load(cls, path):
        header = ndl.read_header(path)
        cfg = header["meta"].get("config")
        if not cfg:
            raise ValidationError(f"{path}: not a speech-LM checkpoint")
        model = cls(cfg["variant"], Dims(**cfg["dims"]), cfg["lambda_mtl"],
                    cfg["lambda_len"], floor=cfg["floor"])
        model.params, _ = ndl.load_params(path, expected=model.params)
        return model

    # -------------------------------------------------------------- encoder

    def _encode(self, units):
        X, mask = _pad([self._norm(np.asarray(u, dtype=self.dtype)) for u in units], self.dtype)
        zeros = np.zeros((len(units), self.dims.hidden), dtype=self.dtype)
        _, h, _, cache = ndl.lstm_forward(X, zeros, zeros, ndl.sub(self.params, "enc"), mask)
        return h, cache

    def encode_unit(self, frames):
        frames = np.asarray(frames)
        if frames.ndim != 2 or len(frames) == 0:
            raise ShapeError("encode_unit needs a non-empty T x mel matrix")
        return self._encode([frames])[0][0]

    def encode_units(self, units):
        return self._encode(list(units))[0]

    def _aux_dim_check(self, aux):
        need = self.dims.aux(self.variant)
        if need == 0:
            return None
        if aux is None:
            raise ValidationError(f"variant {self.variant} needs auxiliary features")
        aux = np.asarray(aux, dtype=self.dtype)
        if aux.shape[-1] != need:
            raise ShapeError(f"aux has dim {aux.shape[-1]}, variant {self.variant} needs {need}")
        return aux

    def build_context(self, context, aux=None):
        if len(context) != self.dims.n_ctx:
            raise ShapeError(f"expected {self.dims.n_ctx} context units, got {len(context)}")
        aux = self._aux_dim_check(aux)
        v = self.encode_units(context)
        z = v.reshape(-1)
        z_aug = z if aux is None else np.concatenate([z, aux.reshape(-1)])
        return LatentContext(v, z, z_aug)

    # -------------------------------------------------------------- decoder

    def _init_state(self, z_aug):
        a = ndl.linear_forward(z_aug, ndl.sub(self.params, "init"))
        H = self.dims.hidden
        return np.tanh(a[:, :H]), a[:, H:], a

    def predict_length(self, z_aug):
        out = ndl.linear_forward(np.atleast_2d(z_aug), ndl.sub(self.params, "len"))[:, 0]
        return out

    def frames_from_log_length(self, log_len):
        if not np.isfinite(log_len):
            raise NumericError("length head produced a non-finite value")
        return int(min(max(round(math.exp(min(log_len, 10.0))), 1), self.dims.max_frames))

    def decode_unit(self, lc: LatentContext, teacher=None):
        """Teacher-forced (``teacher`` given) or free-running decode.

        Returns ``(frames, predicted_log_length)``.
        """
        z_aug = np.atleast_2d(lc.z_aug).astype(self.dtype)
        log_len = float(self.predict_length(z_aug)[0])
        h, c, _ = self._init_state(z_aug)
        dec, head = ndl.sub(self.params, "dec"), ndl.sub(self.params, "head")
        M = self.dims.mel
        floor = np.full((1, M), self.floor, dtype=self.dtype)
        if teacher is not None:
            teacher = np.asarray(teacher, dtype=self.dtype)
            X = self._norm(np.concatenate([floor, teacher[:-1]]))[:, None, :]
            H_all, _, _, _ = ndl.lstm_forward(X, h, c, dec)
            return ndl.linear_forward(H_all[:, 0], head), log_len
        n = self.frames_from_log_length(log_len)
        out = np.empty((n, M), dtype=self.dtype)
        x = floor
        for t in range(n):
            h, c, _ = ndl.lstm_step(self._norm(x), h, c, dec)
            x = ndl.linear_forward(h, head)
            out[t] = x[0]
        return out, log_len

    # -------------------------------------------------------------- loss

    def loss(self, batch, with_grads=True):
        """Batch-mean ``MSE + lambda_mtl * BCE (mtl only) + lambda_len * MSE(log length)``.

        Returns ``(loss, grads, parts)``.
        """
        p, d, dt = self.params, self.dims, self.dtype
        B, K, H = len(batch), d.n_ctx, d.hidden

        # encoder over the distinct context units of the batch (overlapping
        # windows share units); gradients of shared units are summed
        slots, units, where = [], [], {}
        for ex in batch:
            if len(ex.context) != K:
                raise ShapeError("every example needs exactly n_ctx context units")
            for u in ex.context:
                if id(u) not in where:
                    where[id(u)] = len(units)
                    units.append(self._norm(np.asarray(u, dtype=dt)))
                slots.append(where[id(u)])
        slots = np.array(slots)
        enc_X, enc_mask = _pad(units, dt)
        zeros = np.zeros((len(units), H), dtype=dt)
        enc_p = ndl.sub(p, "enc")
        _, v_unique, _, enc_cache = ndl.lstm_forward(enc_X, zeros, zeros, enc_p, enc_mask)
        z = v_unique[slots].reshape(B, K * H)
        if d.aux(self.variant):
            aux = np.stack([self._aux_dim_check(ex.aux) for ex in batch])
            z_aug = np.concatenate([z, aux], axis=1)
        else:
            z_aug = z

        # length head
        len_p = ndl.sub(p, "len")
        log_len = ndl.linear_forward(z_aug, len_p)[:, 0]
        lengths = np.array([len(ex.target) for ex in batch])
        len_diff = log_len - np.log(lengths).astype(dt)
        len_loss, dlog_len = ndl.mse_loss(log_len, np.log(lengths).astype(dt))

        # decoder, teacher forced
        init_p = ndl.sub(p, "init")
        h0, c0, _ = self._init_state(z_aug)
        targets = [np.asarray(ex.target, dtype=dt) for ex in batch]
        floor = np.full((1, d.mel), self.floor, dtype=dt)
        dec_X, dec_mask = _pad([self._norm(np.concatenate([floor, t[:-1]])) for t in targets], dt)
        Y, _ = _pad(targets, dt)
        dec_p = ndl.sub(p, "dec")
        H_all, _, _, dec_cache = ndl.lstm_forward(dec_X, h0, c0, dec_p, dec_mask)
        head_p = ndl.sub(p, "head")
        pred = ndl.linear_forward(H_all, head_p)
        w = dec_mask[:, :, None] / (lengths[None, :, None] * d.mel * B)
        diff = (pred - Y) * dec_mask[:, :, None]
        mse_terms = diff * diff * w
        mse = float(np.sum(mse_terms))
        loss = mse + self.lambda_len * len_loss
        parts = {"mse": mse, "len": len_loss}
        terms = [mse_terms.ravel(), self.lambda_len * len_diff * len_diff / B]

        if self.variant == MTL_PANPHON:
            mtl_p = ndl.sub(p, "mtl")
            logits = ndl.linear_forward(z, mtl_p)
            pan = np.stack([ex.panphon for ex in batch]).astype(dt)
            bce, dlogits = ndl.bce_loss(logits, pan)
            loss += self.lambda_mtl * bce
            parts["bce"] = bce
            per = np.maximum(logits, 0) - logits * pan + np.log1p(np.exp(-np.abs(logits)))
            terms.append(self.lambda_mtl * per.ravel() / per.size)
        parts["loss"] = loss
        parts["terms"] = np.concatenate(terms)
        if not np.isfinite(loss):
            raise NumericError("loss is not finite")
        if not with_grads:
            return loss, None, parts

        grads = {}
        dpred = (2.0 * diff * w).astype(dt)
        g, dH_all = ndl.linear_backward(H_all, dpred, head_p)
        grads.update(ndl.prefixed("head", g))
        g, _, dh0, dc0 = ndl.lstm_backward(dec_cache, dec_p, dH_all=dH_all)
        grads.update(ndl.prefixed("dec", g))
        da = np.concatenate([dh0 * (1.0 - h0 * h0), dc0], axis=1)
        g, dz_aug = ndl.linear_backward(z_aug, da, init_p)
        grads.update(ndl.prefixed("init", g))
        g, dz_len = ndl.linear_backward(z_aug, (self.lambda_len * dlog_len)[:, None].astype(dt), len_p)
        grads.update(ndl.prefixed("len", g))
        dz = (dz_aug + dz_len)[:, :K * H]
        if self.variant == MTL_PANPHON:
            g, dz_mtl = ndl.linear_backward(z, (self.lambda_mtl * dlogits).astype(dt), mtl_p)
            grads.update(ndl.prefixed("mtl", g))
            dz = dz + dz_mtl
        dv = np.zeros((len(units), H), dtype=dt)
        np.add.at(dv, slots, dz.reshape(B * K, H))
        g, _, _, _ = ndl.lstm_backward(enc_cache, enc_p, dh_T=dv)
        grads.update(ndl.prefixed("enc", g))
        grads = {k: grads[k].astype(dt, copy=False) for k in self.trainable()}
        return loss, grads, parts

    def grad_check(self, batch, **kw):
        """Finite-difference check of :meth:`loss` (needs float64 params)."""
        def fn(params):
            _, grads, parts = self.loss(batch)
            return parts["terms"], grads
        return ndl.grad_check(fn, self.params, **kw)

    def evaluate(self, examples, batch_size=32):
        """Example-weighted mean of each loss part."""
        tot, n = {}, 0
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            _, _, parts = self.loss(chunk, with_grads=False)
            for k, v in parts.items():
                if k == "terms":
                    continue
                tot[k] = tot.get(k, 0.0) + v * len(chunk)
            n += len(chunk)
        return {k: v / n for k, v in tot.items()} if n else {}

    def latents(self, examples, batch_size=64, augmented=True):
        """``z_aug`` (or ``z``) for each example, stacked."""
        out = []
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            v = self.encode_units([u for ex in chunk for u in ex.context])
            z = v.reshape(len(chunk), -1)
            if augmented and self.dims.aux(self.variant):
                z = np.concatenate([z, np.stack([ex.aux for ex in chunk]).astype(self.dtype)], axis=1)
            out.append(z)
        return np.concatenate(out) if out else np.zeros((0, self.dims.z))


# ------------------------------------------------------------------ data

def make_examples(windows, variant, text_embed=None):
    """Windows from :func:`corpus.context_windows` -> :class:`Example` list.

    ``text_embed(labels) -> vector`` supplies the frozen text-LM features for
    ``aux_textlm``.
    """
    out = []
    for ctx, tgt in windows:
        labels = tuple(u.label for u in ctx)
        aux = None
        if variant == AUX_TEXTLM:
            if text_embed is None:
                raise ValidationError("aux_textlm needs a text-LM embedding function")
            aux = np.asarray(text_embed(labels), dtype=np.float32)
        elif variant == TOPLINE:
            aux = np.asarray(tgt.artic, dtype=np.float32)
        out.append(Example([u.frames for u in ctx], tgt.frames, np.asarray(tgt.artic),
                           aux, labels, tgt.label, tgt.vowel))
    return out


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 10
    max_steps: int | None = None
    clip: float = 5.0
    seed: int = 0
    checkpoint_every: int = 0


@dataclass
class TrainResult:
    curve: list = field(default_factory=list)
    steps: int = 0
    checkpoints: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    seconds: float = 0.0


CURVE_FIELDS = ("epoch", "train_loss", "val_loss", "val_mse", "val_bce")


def train(model: SpeechLM, train_ex, val_ex=None, cfg: TrainConfig = TrainConfig(),
          out_dir=None, fit_norm=True):
    """Adam on mini-batches; one curve row per epoch.

    With ``max_steps`` set, training stops after that many updates (the last
    partial epoch still gets a row). ``fit_norm`` first sets the input
    standardization from the training frames.
    """
    if not train_ex:
        raise ValidationError("no training examples")
    if fit_norm:
        model.fit_normalization(train_ex)
    t0 = time.time()
    rng = np.random.default_rng(cfg.seed)
    opt = ndl.Adam(model.params, lr=cfg.lr)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    res = TrainResult()
    last_good = None
    epochs = cfg.epochs if cfg.max_steps is None else 10 ** 9
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_ex))
        ep_loss, ep_n = 0.0, 0
        for i in range(0, len(order), cfg.batch):
            batch = [train_ex[j] for j in order[i:i + cfg.batch]]
            try:
                loss, grads, _ = model.loss(batch)
                ndl.clip_grad_norm(grads, cfg.clip)
                opt.step(model.params, grads)
            except NumericError as exc:
                raise DivergenceError(f"training diverged at step {res.steps + 1}: {exc}",
                                      last_good) from exc
            res.steps += 1
            res.step_losses.append(loss)
            ep_loss += loss * len(batch)
            ep_n += len(batch)
            if cfg.max_steps is not None and res.steps >= cfg.max_steps:
                break
        row = {"epoch": epoch, "train_loss": ep_loss / ep_n}
        if val_ex:
            ev = model.evaluate(val_ex)
            row.update(val_loss=ev["loss"], val_mse=ev["mse"], val_bce=ev.get("bce", ""))
        else:
            row.update(val_loss="", val_mse="", val_bce="")
        res.curve.append(row)
        log.info("epoch %d step %d train %.4f val %s", epoch, res.steps, row["train_loss"], row["val_loss"])
        if out:
            last_good = out / "last.sblm"
            model.save(last_good, {"epoch": epoch, "steps": res.steps})
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                p = out / f"ckpt_e{epoch:04d}.sblm"
                model.save(p, {"epoch": epoch, "steps": res.steps})
                res.checkpoints.append(p)
            write_curve(out / "loss_curve.csv", res.curve)
        if cfg.max_steps is not None and res.steps >= cfg.max_steps:
            break
    if out:
        final = out / "model.sblm"
        model.save(final, {"epoch": len(res.curve), "steps": res.steps})
        res.checkpoints.append(final)
    res.seconds = time.time() - t0
    return res


def write_curve(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in CURVE_FIELDS})


# ------------------------------------------------------------------ generation

class LabelBank:
    """Nearest-neighbour unit labels by cosine similarity of encoder latents."""

    def __init__(self, latents, labels, artic=None):
        lat = np.asarray(latents, dtype=np.float64)
        norm = np.linalg.norm(lat, axis=1, keepdims=True)
        self.latents = lat / np.maximum(norm, 1e-12)
        self.labels = list(labels)
        self.artic = None if artic is None else np.asarray(artic)

    @classmethod
    def from_units(cls, model, units, batch=128):
        lat = np.concatenate([model.encode_units([u.frames for u in units[i:i + batch]])
                              for i in range(0, len(units), batch)]) if units else np.zeros((0, 1))
        return cls(lat, [u.label for u in units], np.stack([u.artic for u in units]) if units else None)

    def nearest(self, v):
        v = np.asarray(v, dtype=np.float64)
        v = v / max(np.linalg.norm(v), 1e-12)
        return int(np.argmax(self.latents @ v))


@dataclass
class BabbleResult:
    frames: np.ndarray
    unit_lengths: list
    labels: list


def babble(model: SpeechLM, seed_context, n_units, text_embed=None, bank: LabelBank | None = None,
           seed_labels=None, seed=0, topline_labels=None):
    """Generate ``n_units`` units autoregressively from a sliding context window.

    ``aux_textlm`` labels generated units by nearest neighbour in ``bank``
    and feeds the window's labels to ``text_embed``. ``topline`` needs the
    articulatory vector of each unit to generate: taken from
    ``topline_labels`` (indices into ``bank``) or drawn from ``bank`` at random.
    """
    K = model.dims.n_ctx
    if len(seed_context) != K:
        raise ShapeError(f"need {K} seed units")
    window = [np.asarray(f, dtype=model.dtype) for f in seed_context]
    labels = list(seed_labels) if seed_labels is not None else [""] * K
    rng = np.random.default_rng(seed)
    chunks, lengths, gen_labels = [], [], []
    for i in range(n_units):
        aux = None
        if model.variant == AUX_TEXTLM:
            if text_embed is None:
                raise ValidationError("aux_textlm babbling needs the text LM")
            aux = text_embed(tuple(labels[-K:]))
        elif model.variant == TOPLINE:
            if bank is None or bank.artic is None:
                raise ValidationError("topline babbling needs a label bank with articulatory vectors")
            idx = topline_labels[i] if topline_labels is not None else int(rng.integers(len(bank.labels)))
            aux = bank.artic[idx]
        lc = model.build_context(window[-K:], aux)
        frames, _ = model.decode_unit(lc)
        chunks.append(frames)
        lengths.append(len(frames))
        label = ""
        if bank is not None and len(bank.labels):
            label = bank.labels[bank.nearest(model.encode_unit(frames))]
        gen_labels.append(label)
        labels.append(label)
        window.append(frames)
    M = model.dims.mel
    frames = np.concatenate(chunks) if chunks else np.zeros((0, M), dtype=model.dtype)
    return BabbleResult(frames, lengths, gen_labels)


def write_generation_manifest(path, entries):
    Path(path).write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n", encoding="utf-8")
