"""Small numeric core: LSTM and linear layers with hand-derived gradients,
losses, Adam, finite-difference gradient checking and checkpoint I/O.

Parameters live in plain ``dict[str, ndarray]``; gradients use the same
keys. Sequences are time-major ``(T, B, features)``; variable lengths are
handled with a mask that freezes the state once a sequence has ended, so
the state at ``T - 1`` is the state after each sequence's own last step.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import (CheckpointError, CorruptCheckpointError, NumericError,
                     ShapeError, ShapeManifestError, ValidationError)

CKPT_MAGIC = b"SBLM"
CKPT_VERSION = 1


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
    return arr


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ------------------------------------------------------------------ init

def init_lstm(rng, n_in, n_hidden, dtype=np.float32):
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias 1, other biases 0."""
    k = 1.0 / math.sqrt(n_hidden)
    b = np.zeros(4 * n_hidden, dtype=dtype)
    b[n_hidden:2 * n_hidden] = 1.0
    return {
        "W_ih": rng.uniform(-k, k, (4 * n_hidden, n_in)).astype(dtype),
        "W_hh": rng.uniform(-k, k, (4 * n_hidden, n_hidden)).astype(dtype),
        "b": b,
    }


def init_linear(rng, n_in, n_out, dtype=np.float32):
    k = 1.0 / math.sqrt(n_in)
    return {"W": rng.uniform(-k, k, (n_out, n_in)).astype(dtype),
            "b": np.zeros(n_out, dtype=dtype)}


def prefixed(prefix, d):
    return {f"{prefix}.{k}": v for k, v in d.items()}


def sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ------------------------------------------------------------------ LSTM

def lstm_step(x, h, c, p):
    """One cell step. Works on vectors or ``(B, .)`` batches.

    Returns ``(h_new, c_new, cache)``; gate order is i, f, g, o.
    """
    squeeze = np.ndim(x) == 1
    x2, h2, c2 = (np.atleast_2d(a) for a in (x, h, c))
    pre = x2 @ p["W_ih"].T + h2 @ p["W_hh"].T + p["b"]
    gates, c_new, tanh_c, h_new = kernels.lstm_gates_forward(pre.astype(c2.dtype), c2)
    check_finite("lstm_step output", h_new)
    check_finite("lstm_step cell", c_new)
    cache = (x2, h2, c2, gates, tanh_c)
    if squeeze:
        return h_new[0], c_new[0], cache
    return h_new, c_new, cache


@dataclass
class LstmCache:
    X: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gates: np.ndarray
    tanh_c: np.ndarray
    mask: np.ndarray | None


def lstm_forward(X, h0, c0, p, mask=None):
    """Run a cell over ``X (T, B, I)``.

    ``mask (T, B)``, when given, is 1 where step ``t`` belongs to sequence
    ``b``; masked steps carry the previous state through unchanged.
    Returns ``(H_all (T, B, H), h_T, c_T, cache)``.
    """
    T, B, _ = X.shape
    H = p["W_hh"].shape[1]
    dtype = p["W_hh"].dtype
    XW = (X.reshape(T * B, -1) @ p["W_ih"].T + p["b"]).reshape(T, B, 4 * H).astype(dtype)
    W_hhT = p["W_hh"].T
    h = np.asarray(h0, dtype=dtype)
    c = np.asarray(c0, dtype=dtype)
    H_all = np.empty((T, B, H), dtype=dtype)
    h_prev = np.empty((T, B, H), dtype=dtype)
    c_prev = np.empty((T, B, H), dtype=dtype)
    gates = np.empty((T, B, 4 * H), dtype=dtype)
    tanh_c = np.empty((T, B, H), dtype=dtype)
    for t in range(T):
        h_prev[t] = h
        c_prev[t] = c
        g, c_new, tc, h_new = kernels.lstm_gates_forward(XW[t] + h @ W_hhT, c)
        gates[t] = g
        tanh_c[t] = tc
        if mask is not None:
            m = mask[t][:, None].astype(bool)
            h = np.where(m, h_new, h)
            c = np.where(m, c_new, c)
        else:
            h, c = h_new, c_new
        H_all[t] = h
    check_finite("lstm hidden state", H_all)
    check_finite("lstm cell state", c)
    return H_all, h, c, LstmCache(X, h_prev, c_prev, gates, tanh_c, mask)


def lstm_backward(cache: LstmCache, p, dH_all=None, dh_T=None, dc_T=None):
    """BPTT through :func:`lstm_forward`.

    ``dH_all`` is the upstream gradient on every emitted hidden state,
    ``dh_T``/``dc_T`` on the final state. Returns ``(grads, dX, dh0, dc0)``.
    """
    X = cache.X
    T, B, _ = X.shape
    H = p["W_hh"].shape[1]
    dtype = p["W_hh"].dtype
    dh = np.zeros((B, H), dtype=dtype) if dh_T is None else dh_T.astype(dtype, copy=True)
    dc = np.zeros((B, H), dtype=dtype) if dc_T is None else dc_T.astype(dtype, copy=True)
    dpre = np.empty((T, B, 4 * H), dtype=dtype)
    W_hh = p["W_hh"]
    for t in range(T - 1, -1, -1):
        if dH_all is not None:
            dh = dh + dH_all[t]
        if cache.mask is not None:
            m = cache.mask[t][:, None].astype(dtype)
            dh_cell, dc_cell = dh * m, dc * m
            dh_carry, dc_carry = dh - dh_cell, dc - dc_cell
        else:
            dh_cell, dc_cell, dh_carry, dc_carry = dh, dc, 0.0, 0.0
        d, dc_prev = kernels.lstm_gates_backward(
            cache.gates[t], cache.c_prev[t], cache.tanh_c[t], dh_cell, dc_cell)
        dpre[t] = d
        dh = d @ W_hh + dh_carry
        dc = dc_prev + dc_carry
    flat = dpre.reshape(T * B, 4 * H)
    grads = {
        "W_ih": flat.T @ X.reshape(T * B, -1),
        "W_hh": flat.T @ cache.h_prev.reshape(T * B, H),
        "b": flat.sum(axis=0),
    }
    dX = (flat @ p["W_ih"]).reshape(X.shape)
    return grads, dX, dh, dc


# ------------------------------------------------------------------ linear

def linear_forward(x, p):
    return x @ p["W"].T + p["b"]


def linear_backward(x, dy, p):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return {"W": dy2.T @ x2, "b": dy2.sum(axis=0)}, dy @ p["W"]


# ------------------------------------------------------------------ losses

def mse_loss(pred, target):
    """Mean squared error over all entries; returns ``(loss, dloss/dpred)``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), (2.0 / n) * diff


def bce_loss(logits, targets):
    """Mean binary cross-entropy on logits (stable form)."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.shape != targets.shape:
        raise ShapeError(f"bce shapes differ: {logits.shape} vs {targets.shape}")
    if not np.isin(targets, (0, 1)).all():
        raise ValidationError("bce targets must be 0 or 1")
    t = targets.astype(logits.dtype)
    x = logits
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = per.size
    return float(per.sum() / n), (sigmoid(x) - t) / n


def softmax_xent(logits, targets):
    """Mean categorical cross-entropy of integer ``targets``; returns ``(loss, dlogits, log_probs)``."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = len(targets)
    loss = -float(logp[np.arange(n), targets].sum() / n)
    d = np.exp(logp)
    d[np.arange(n), targets] -= 1.0
    return loss, d / n, logp


# ------------------------------------------------------------------ optimizer

def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        """In-place bias-corrected update of every parameter that has a gradient."""
        for k, g in grads.items():
            check_finite(f"gradient of {k}", g)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}


# ------------------------------------------------------------------ grad check

@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    worst: tuple

    @property
    def ok(self):
        return self.max_rel_err < 1e-4


def grad_check(fn, params, eps=1e-5, max_coords=500, seed=0, analytic=None):
    """Compare analytic gradients with central differences.

    ``fn(params) -> (loss, grads)``. At most ``max_coords`` coordinates are
    probed, spread evenly over the tensors that have gradients.

    ``loss`` may also be an array of additive loss terms; the two perturbed
    evaluations are then differenced term by term before summing, which
    keeps the difference clear of the rounding of a large total.
    """
    for k, v in params.items():
        if v.dtype != np.float64:
            raise ValidationError(f"grad_check needs float64 parameters ({k} is {v.dtype})")
    if analytic is None:
        _, analytic = fn(params)
    names = [k for k in params if k in analytic]
    if not names:
        return GradCheckReport(0.0, 0, ())
    per = max(1, max_coords // len(names))
    rng = np.random.default_rng(seed)
    worst = (0.0, None)
    n = 0
    for k in names:
        p = params[k]
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(per, flat.size), replace=False)
        for idx in picks:
            if n >= max_coords:
                break
            old = flat[idx]
            flat[idx] = old + eps
            lp, _ = fn(params)
            flat[idx] = old - eps
            lm, _ = fn(params)
            flat[idx] = old
            num = float(np.sum(np.asarray(lp) - np.asarray(lm))) / (2 * eps)
            a = float(analytic[k].reshape(-1)[idx])
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            n += 1
            if rel > worst[0] or worst[1] is None:
                worst = (rel, (k, int(idx), a, num))
    return GradCheckReport(worst[0], n, worst[1])


# ------------------------------------------------------------------ checkpoints

def manifest_of(params):
    return [{"name": k, "dims": list(v.shape)} for k, v in params.items()]


def save_params(path, params, variant="", meta=None):
    header = {"variant": variant, "manifest": manifest_of(params), "meta": meta or {}}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hb)))
        fh.write(hb)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_header(path):
    blob = Path(path).read_bytes()
    return _parse_header(path, blob)[0]


def _parse_header(path, blob):
    if len(blob) < 12:
        raise CorruptCheckpointError(f"{path}: truncated checkpoint")
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 12 + hlen:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    return header, 12 + hlen


def load_params(path, expected=None):
    """Read a checkpoint; returns ``(params, header)``.

    ``expected`` (a params dict or a manifest list) must match the stored
    manifest exactly, otherwise :class:`ShapeManifestError`.
    """
    blob = Path(path).read_bytes()
    header, off = _parse_header(path, blob)
    manifest = header["manifest"]
    if expected is not None:
        want = manifest_of(expected) if isinstance(expected, dict) else list(expected)
        if want != manifest:
            raise ShapeManifestError(
                f"{path}: checkpoint manifest ({header.get('variant')}) does not match model")
    need = sum(4 * int(np.prod(e["dims"], dtype=np.int64)) for e in manifest)
    if len(blob) - off != need:
        raise CorruptCheckpointError(f"{path}: expected {need} tensor bytes, found {len(blob) - off}")
    params = {}
    for e in manifest:
        size = int(np.prod(e["dims"], dtype=np.int64))
        params[e["name"]] = np.frombuffer(blob, dtype="<f4", count=size, offset=off) \
            .reshape(e["dims"]).astype(np.float32)
        off += 4 * size
    return params, header
