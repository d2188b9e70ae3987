"""Glue between the unit cache, the models and the evaluation code.

The CLI is a thin layer over these functions; the end-to-end tests call
them directly.
"""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import corpus, evalprobe, speechlm, textlm
from .dsp import DspConfig, MelSpectrogram, griffin_lim, melspectrogram, write_mels, write_wav
from .errors import ValidationError

log = logging.getLogger(__name__)


def split_sequences(seqs, val_fraction=0.1, seed=0):
    """Utterance-level train/held-out split, fixed by ``seed``."""
    seqs = list(seqs)
    if not 0 <= val_fraction < 1:
        raise ValidationError("val_fraction must be in [0, 1)")
    n_val = int(round(val_fraction * len(seqs)))
    if val_fraction > 0 and len(seqs) > 1:
        n_val = max(1, n_val)
    order = np.random.default_rng(seed).permutation(len(seqs))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(seqs) if i not in val_idx]
    val = [s for i, s in enumerate(seqs) if i in val_idx]
    return train, val


def windows(seqs, n_ctx=4):
    return [w for s in seqs for w in corpus.context_windows(s, n_ctx)]


def label_utterances(seqs):
    return [s.labels() for s in seqs if len(s)]


def text_embedder(lm: textlm.TextLM | None):
    return None if lm is None else lm.context_embedding


def examples_for(seqs, variant, lm=None, n_ctx=4):
    return speechlm.make_examples(windows(seqs, n_ctx), variant, text_embedder(lm))


def file_digest(paths):
    """SHA-256 over the bytes of ``paths`` (directories: every file, sorted)."""
    h = hashlib.sha256()
    files = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p])
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


# ------------------------------------------------------------------ text LM

def train_text_lm(train_utts, val_utts, dim=textlm.EMBED_DIM, epochs=20, cbow=True,
                  cbow_epochs=5, seed=0, lr=1e-3, batch=16, bptt=32, out_dir=None):
    vocab = textlm.SubwordVocab.build(train_utts)
    init = textlm.cbow_pretrain(train_utts, vocab, dim, epochs=cbow_epochs, seed=seed) if cbow else None
    lm = textlm.TextLM(vocab, dim, seed=seed, init=init)
    res = textlm.lm_train(lm, vocab.stream(train_utts),
                          vocab.stream(val_utts) if val_utts else None,
                          textlm.LmTrainConfig(epochs=epochs, lr=lr, batch=batch, bptt=bptt, seed=seed),
                          out_dir)
    return lm, res, init


# ------------------------------------------------------------------ babble

def label_bank(model, seqs):
    units = [u for s in seqs for u in s.units]
    return speechlm.LabelBank.from_units(model, units)


def babble_to_files(model, seed_units, n_units, out_dir, seed=0, lm=None, bank=None,
                    cfg: DspConfig | None = None):
    """Generate, vocode and write ``babble.wav``, ``babble.mels`` and ``babble.json``."""
    cfg = cfg or DspConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = speechlm.babble(model, [u.frames for u in seed_units], n_units,
                          text_embed=text_embedder(lm), bank=bank,
                          seed_labels=[u.label for u in seed_units], seed=seed)
    mel = MelSpectrogram(res.frames.astype(np.float64), cfg.hop_seconds, cfg.config_id)
    audio = griffin_lim(mel, cfg, seed=seed)
    write_wav(out / "babble.wav", audio)
    write_mels(out / "babble.mels", mel)
    speechlm.write_generation_manifest(out / "babble.json", {
        "variant": model.variant, "n_units": n_units, "seed": seed,
        "seed_context": [u.label for u in seed_units],
        "seed_utterance": seed_units[0].utt_id if seed_units else "",
        "unit_frames": res.unit_lengths, "unit_labels": res.labels,
        "total_frames": int(len(res.frames)),
        "wav_samples": int(len(audio.samples))})
    return res, audio


def syllabic_structure(wav_audio, unit_lengths, cfg: DspConfig | None = None):
    """Re-analyse generated audio and count reset-separated energy segments."""
    cfg = cfg or DspConfig()
    if len(wav_audio.samples) < cfg.fft_size:
        return 0, [], []
    mel = melspectrogram(wav_audio, cfg)
    return evalprobe.reset_separated_segments(mel.frames, unit_lengths)


# ------------------------------------------------------------------ report

def metric_report(entries, train_seqs, val_seqs, n_samples=10, n_units=4, draws=10, seed=0,
                  probe_steps=2000):
    """One row per ``(name, model, text_lm_or_None)`` entry.

    ``mcd_mean`` averages, over ``n_samples`` generations seeded from
    held-out windows, the MCD against ``draws`` duration-matched held-out
    spans. ``probe_accuracy`` is the held-out accuracy of a vowel probe on
    the encoder context ``z``.
    """
    ref_mels = [MelSpectrogram(np.concatenate([u.frames for u in s.units])) for s in val_seqs if len(s)]
    # full held-out utterances would include silences; spans come from the
    # concatenated kept units instead so references contain speech
    rows = []
    for name, model, lm in entries:
        val_ex = examples_for(val_seqs, model.variant, lm, model.dims.n_ctx)
        train_ex = examples_for(train_seqs, model.variant, lm, model.dims.n_ctx)
        if not val_ex:
            raise ValidationError("no held-out windows for the report")
        ev = model.evaluate(val_ex)
        rng = np.random.default_rng(seed)
        bank = label_bank(model, train_seqs)
        val_windows = windows(val_seqs, model.dims.n_ctx)
        picks = rng.choice(len(val_windows), size=n_samples, replace=len(val_windows) < n_samples)
        mcds = []
        for k, i in enumerate(picks):
            ctx, _ = val_windows[int(i)]
            res = speechlm.babble(model, [u.frames for u in ctx], n_units,
                                  text_embed=text_embedder(lm), bank=bank,
                                  seed_labels=[u.label for u in ctx], seed=seed + k)
            mcds.append(evalprobe.sample_mcd(res.frames, ref_mels, rng, draws))
        probe = evalprobe.run_probe("latent", train_ex, val_ex, model, steps=probe_steps)
        row = {"variant": name, "val_mse": ev["mse"], "mcd_mean": float(np.mean(mcds)),
               "probe_accuracy": probe.test.accuracy, "textlm_ppl": ""}
        if lm is not None:
            row["textlm_ppl"] = textlm.evaluate_lm(lm, lm.vocab.stream(label_utterances(val_seqs))).perplexity
        rows.append(row)
        log.info("report row %s", row)
    return rows


def write_run_info(out_dir, config: dict, seed, inputs):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.txt", "w", encoding="utf-8") as fh:
        for k in sorted(config):
            fh.write(f"{k}={config[k]}\n")
    (out / "run.json").write_text(json.dumps(
        {"seed": seed, "inputs": [str(p) for p in inputs], "input_sha256": file_digest(inputs)},
        indent=2, sort_keys=True) + "\n", encoding="utf-8")
