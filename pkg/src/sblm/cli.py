"""Command-line front end: ``sblm <command> [options]``.

Every command accepts ``--config FILE`` (``key=value`` lines) and repeated
``--set key=value``; command flags override both. Artifact-producing
commands write the effective configuration (``config.txt``) and a
``run.json`` with the seed and a SHA-256 of their inputs next to their
outputs.

Exit codes: 0 success, 1 invalid input/config, 2 numeric failure, 3 I/O.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus, evalprobe, pipeline, speechlm, synth, textlm
from .dsp import DspConfig
from .errors import ConfigError, FormatError, NumericError, SblmError, ValidationError

log = logging.getLogger("sblm")

DEFAULTS = {
    "seed": 0,
    "dsp.sample_rate": 22050, "dsp.fft_size": 1024, "dsp.hop": 128, "dsp.mel_bins": 80,
    "dsp.fmin": 0.0, "dsp.fmax": 8000.0, "dsp.log_floor": 1e-5, "dsp.griffin_lim_iters": 60,
    "corpus.n_utts": 600, "corpus.kind": corpus.SYLLABLE, "corpus.n_ctx": 4,
    "corpus.val_fraction": 0.1, "corpus.split_seed": 0, "corpus.stop_words": "",
    "model.variant": speechlm.SYNTHESIS_ONLY, "model.hidden": 256,
    "model.lambda_mtl": 1.0, "model.lambda_len": 0.1,
    "train.lr": 1e-3, "train.batch": 32, "train.epochs": 10, "train.steps": 0,
    "train.clip": 5.0, "train.checkpoint_every": 0,
    "textlm.dim": textlm.EMBED_DIM, "textlm.epochs": 20, "textlm.cbow": True,
    "textlm.cbow_epochs": 5, "textlm.lr": 1e-3, "textlm.batch": 16, "textlm.bptt": 32,
    "babble.n_units": 20, "eval.samples": 10, "eval.draws": 10, "eval.units": 4,
    "probe.steps": 2000,
    "paths.corpus": "", "paths.cache": "", "paths.out": "", "paths.textlm": "",
}


def _coerce(key, text):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = str(text).strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return low in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return str(text)


def parse_config_lines(lines, source="<config>"):
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown config key {k!r}")
        out[k] = _coerce(k, v)
    return out


def effective_config(args, overrides):
    """Defaults <- config file <- ``--set`` <- command flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FormatError(f"config file {path} not found")
        cfg.update(parse_config_lines(path.read_text(encoding="utf-8").splitlines(), str(path)))
    cfg.update(parse_config_lines(args.set or [], "--set"))
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = _coerce(k, v) if isinstance(v, str) else v
    return cfg


def dsp_config(cfg):
    return DspConfig(cfg["dsp.sample_rate"], cfg["dsp.fft_size"], cfg["dsp.hop"],
                     cfg["dsp.mel_bins"], cfg["dsp.fmin"], cfg["dsp.fmax"],
                     cfg["dsp.log_floor"], cfg["dsp.griffin_lim_iters"])


def _require(cfg, key, flag):
    if not cfg[key]:
        raise ConfigError(f"{key} is not set (use {flag} or --set {key}=...)")
    return Path(cfg[key])


def _load_split(cfg):
    cache = _require(cfg, "paths.cache", "--cache")
    seqs = corpus.load_cache(cache)
    train, val = pipeline.split_sequences(seqs, cfg["corpus.val_fraction"], cfg["corpus.split_seed"])
    return cache, train, val


def _load_textlm(cfg, needed):
    if not cfg["paths.textlm"]:
        if needed:
            raise ConfigError("variant aux_textlm needs a text-LM checkpoint (--textlm)")
        return None
    return textlm.TextLM.load(cfg["paths.textlm"])


def _load_model(path):
    model = speechlm.SpeechLM.load(path)
    log.info("loaded %s (%s)", path, model.variant)
    return model


def _refuse_existing(out, force):
    if out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(f"{out} exists and is not empty (use --force to overwrite)")


# ------------------------------------------------------------------ commands

def cmd_synth_corpus(args, cfg):
    out = _require(cfg, "paths.corpus", "--out")
    _refuse_existing(out, args.force)
    manifest, _ = synth.synth_corpus(out, cfg["seed"], cfg["corpus.n_utts"], cfg["dsp.sample_rate"])
    pipeline.write_run_info(out / "run", cfg, cfg["seed"], [manifest])
    print(f"wrote {cfg['corpus.n_utts']} utterances to {out}")


def cmd_preprocess(args, cfg):
    src = Path(cfg["paths.corpus"]) if cfg["paths.corpus"] else None
    manifest = Path(args.manifest) if args.manifest else (src / "manifest.tsv" if src else None)
    aligns = Path(args.alignments) if args.alignments else (src / "alignments.tsv" if src else None)
    if manifest is None or aligns is None:
        raise ConfigError("give --corpus DIR or both --manifest and --alignments")
    for p in (manifest, aligns):
        if not p.exists():
            raise FormatError(f"{p} not found")
    kind = cfg["corpus.kind"]
    out = Path(cfg["paths.cache"]) if cfg["paths.cache"] else manifest.parent / f"cache_{kind}"
    inv = corpus.DEFAULT_INVENTORY
    if cfg["corpus.stop_words"]:
        inv = inv.with_stop_words(corpus.load_stop_words(cfg["corpus.stop_words"]))
    seqs, drops = corpus.preprocess(manifest, aligns, out, kind, inv, dsp_config(cfg), args.jobs)
    corpus.corpus_stats(seqs).write_csv(out / "unit_counts.csv")
    pipeline.write_run_info(out / "run", cfg, cfg["seed"], [manifest, aligns])
    n = sum(len(s) for s in seqs)
    print(f"{kind}: kept {n} units from {len(seqs)} utterances -> {out}")
    for reason in ("too_long", "stopword", "silence", "no_nucleus", "no_frames"):
        print(f"  dropped-{reason.replace('_', '-')}: {drops.get(reason, 0)}")


def cmd_train(args, cfg):
    variant = cfg["model.variant"]
    if variant not in speechlm.VARIANTS:
        raise ConfigError(f"model.variant must be one of {', '.join(speechlm.VARIANTS)}")
    out = _require(cfg, "paths.out", "--out")
    cache, train, val = _load_split(cfg)
    lm = _load_textlm(cfg, variant == speechlm.AUX_TEXTLM)
    lm_digest = pipeline.file_digest([cfg["paths.textlm"]]) if lm else None
    n_ctx = cfg["corpus.n_ctx"]
    train_ex = pipeline.examples_for(train, variant, lm, n_ctx)
    val_ex = pipeline.examples_for(val, variant, lm, n_ctx)
    mel_bins = train_ex[0].target.shape[1] if train_ex else cfg["dsp.mel_bins"]
    dims = speechlm.Dims(mel=mel_bins, hidden=cfg["model.hidden"], n_ctx=n_ctx,
                         text=lm.dim if lm else textlm.EMBED_DIM)
    model = speechlm.SpeechLM(variant, dims, cfg["model.lambda_mtl"], cfg["model.lambda_len"],
                              seed=cfg["seed"])
    log.info("dimensions %s", model.dimension_ledger())
    tc = speechlm.TrainConfig(cfg["train.lr"], cfg["train.batch"], cfg["train.epochs"],
                              cfg["train.steps"] or None, cfg["train.clip"], cfg["seed"],
                              cfg["train.checkpoint_every"])
    inputs = [cache] + ([cfg["paths.textlm"]] if lm else [])
    pipeline.write_run_info(out, cfg, cfg["seed"], inputs)
    res = speechlm.train(model, train_ex, val_ex, tc, out)
    if lm and pipeline.file_digest([cfg["paths.textlm"]]) != lm_digest:
        raise NumericError("text-LM checkpoint changed during training")
    last = res.curve[-1]
    print(f"{variant}: {res.steps} steps, {len(train_ex)} train / {len(val_ex)} val windows, "
          f"final train {last['train_loss']:.4f} val {last['val_loss']} -> {out / 'model.sblm'}")


def cmd_train_textlm(args, cfg):
    out = _require(cfg, "paths.out", "--out")
    if args.tokens:
        utts = textlm.read_token_stream(args.tokens)
        order = np.random.default_rng(cfg["corpus.split_seed"]).permutation(len(utts))
        n_val = max(1, int(round(cfg["corpus.val_fraction"] * len(utts)))) if len(utts) > 1 else 0
        val = [utts[i] for i in order[:n_val]]
        train = [utts[i] for i in sorted(order[n_val:])]
        inputs = [args.tokens]
    else:
        cache, tr, va = _load_split(cfg)
        train, val = pipeline.label_utterances(tr), pipeline.label_utterances(va)
        inputs = [cache]
    pipeline.write_run_info(out, cfg, cfg["seed"], inputs)
    lm, res, init = pipeline.train_text_lm(
        train, val, cfg["textlm.dim"], cfg["textlm.epochs"], cfg["textlm.cbow"],
        cfg["textlm.cbow_epochs"], cfg["seed"], cfg["textlm.lr"], cfg["textlm.batch"],
        cfg["textlm.bptt"], out)
    lm.save(out / "textlm.sblm")
    lm.vocab.write(out / "vocab.txt")
    textlm.write_token_stream(out / "train_tokens.txt", train)
    with open(out / "textlm_curve.csv", "w", encoding="utf-8") as fh:
        keys = list(res.curve[0])
        fh.write(",".join(keys) + "\n")
        for r in res.curve:
            fh.write(",".join(f"{r[k]:.6f}" if isinstance(r[k], float) else str(r[k]) for k in keys) + "\n")
    metrics = {"init": lm.init, "vocab_size": len(lm.vocab),
               "cbow_losses": init.losses if init else []}
    if val:
        v_ids = lm.vocab.stream(val)
        m = textlm.evaluate_lm(lm, v_ids)
        metrics.update(val_ppl=m.perplexity, val_acc=m.accuracy,
                       unigram_ppl=textlm.unigram_perplexity(lm.vocab.stream(train), v_ids, len(lm.vocab)))
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
    print(f"text LM ({lm.init} init, V={len(lm.vocab)}): " +
          ", ".join(f"{k}={v:.4f}" for k, v in metrics.items() if isinstance(v, float)))


def cmd_babble(args, cfg):
    out = _require(cfg, "paths.out", "--out")
    model = _load_model(args.checkpoint)
    _, train, val = _load_split(cfg)
    lm = _load_textlm(cfg, model.variant == speechlm.AUX_TEXTLM)
    pool = pipeline.windows(val or train, model.dims.n_ctx)
    if not pool:
        raise ValidationError("no context windows available to seed babbling")
    ctx, _ = pool[args.context_index % len(pool)]
    bank = pipeline.label_bank(model, train)
    pipeline.write_run_info(out, cfg, cfg["seed"], [args.checkpoint, cfg["paths.cache"]])
    res, audio = pipeline.babble_to_files(model, ctx, cfg["babble.n_units"], out, cfg["seed"],
                                          lm, bank, dsp_config(cfg))
    n_seg, _, _ = pipeline.syllabic_structure(audio, res.unit_lengths, dsp_config(cfg))
    print(f"babbled {cfg['babble.n_units']} units ({len(res.frames)} frames, "
          f"{n_seg} reset-separated energy segments) -> {out / 'babble.wav'}")


def cmd_eval(args, cfg):
    out = _require(cfg, "paths.out", "--out")
    _, train, val = _load_split(cfg)
    lm = _load_textlm(cfg, False)
    entries = []
    for spec in args.checkpoints:
        name, _, path = spec.rpartition("=")
        model = _load_model(path)
        entries.append((name or model.variant, model,
                        lm if model.variant == speechlm.AUX_TEXTLM else None))
        if model.variant == speechlm.AUX_TEXTLM and lm is None:
            raise ConfigError("an aux_textlm checkpoint needs --textlm")
    pipeline.write_run_info(out, cfg, cfg["seed"], [cfg["paths.cache"], *[e.rpartition("=")[2] for e in args.checkpoints]])
    rows = pipeline.metric_report(entries, train, val, cfg["eval.samples"], cfg["eval.units"],
                                  cfg["eval.draws"], cfg["seed"], cfg["probe.steps"])
    evalprobe.write_report(out / "report.csv", rows)
    corr = evalprobe.correlations(rows)
    evalprobe.write_correlations(out / "correlations.csv", corr)
    for r in rows:
        print(f"{r['variant']}: val_mse={r['val_mse']:.4f} mcd={r['mcd_mean']:.4f} "
              f"probe={r['probe_accuracy']:.4f}")
    for c in corr:
        print(f"r({c['metric_a']}, {c['metric_b']}) = {c['pearson']:.3f} (ranks {c['pearson_rank']:.3f})")


def cmd_probe(args, cfg):
    out = _require(cfg, "paths.out", "--out")
    _, train, val = _load_split(cfg)
    pipeline.write_run_info(out, cfg, cfg["seed"], [cfg["paths.cache"], *args.checkpoint])
    tr_ex = pipeline.examples_for(train, speechlm.SYNTHESIS_ONLY, None, cfg["corpus.n_ctx"])
    te_ex = pipeline.examples_for(val, speechlm.SYNTHESIS_ONLY, None, cfg["corpus.n_ctx"])
    mel = tr_ex[0].target.shape[1]
    untrained = speechlm.SpeechLM(speechlm.SYNTHESIS_ONLY,
                                  speechlm.Dims(mel=mel, hidden=cfg["model.hidden"], n_ctx=cfg["corpus.n_ctx"]),
                                  seed=cfg["seed"])
    untrained.fit_normalization(tr_ex)
    sources = [("panphon", "panphon", None), ("untrained", "latent", untrained)]
    for path in args.checkpoint:
        m = _load_model(path)
        sources.append((Path(path).parent.name or m.variant, "latent", m))
    rows = []
    for name, kind, model in sources:
        o = evalprobe.run_probe(kind, tr_ex, te_ex, model, steps=cfg["probe.steps"])
        o.test.write_csv(out / f"confusion_{name}.csv")
        rows.append((name, o.train.accuracy, o.test.accuracy, o.test.majority_classifier))
        print(f"{name}: train acc {o.train.accuracy:.4f}, held-out acc {o.test.accuracy:.4f}"
              + (" (majority classifier)" if o.test.majority_classifier else ""))
    with open(out / "probe_summary.csv", "w", encoding="utf-8") as fh:
        fh.write("source,train_accuracy,test_accuracy,majority_classifier\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]:.6f},{r[2]:.6f},{int(r[3])}\n")


def tiny_gradcheck(variant, seed=0, eps=1e-4, hidden=8, mel=8, n_ctx=2, frames=3, batch=2):
    """Finite-difference check of the full loss of a tiny ``variant`` model."""
    rng = np.random.default_rng(seed)
    dims = speechlm.Dims(mel=mel, hidden=hidden, n_ctx=n_ctx, panphon=66, text=12)
    model = speechlm.SpeechLM(variant, dims, seed=seed, dtype=np.float64)
    exs = []
    for _ in range(batch):
        ctx = [rng.normal(-3.0, 2.0, (frames, mel)) for _ in range(n_ctx)]
        pan = (rng.random(66) < 0.3).astype(np.float64)
        aux = {speechlm.AUX_TEXTLM: rng.standard_normal(12), speechlm.TOPLINE: pan}.get(variant)
        exs.append(speechlm.Example(ctx, rng.normal(-3.0, 2.0, (frames, mel)), pan, aux))
    model.fit_normalization(exs)
    return model.grad_check(exs, eps=eps, seed=seed)


def cmd_gradcheck(args, cfg):
    variant = cfg["model.variant"]
    if variant not in speechlm.VARIANTS:
        raise ConfigError(f"model.variant must be one of {', '.join(speechlm.VARIANTS)}")
    rep = tiny_gradcheck(variant, cfg["seed"], args.eps)
    print(f"{variant}: max relative error {rep.max_rel_err:.3e} over {rep.n_checked} coordinates"
          f" (worst {rep.worst[0] if rep.worst else '-'})")
    if not rep.ok:
        raise NumericError(f"gradient check failed: {rep.max_rel_err:.3e} >= 1e-4")


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="sblm", description="Sub-word speech LM toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="key=value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)
        sp.set_defaults(fn=fn)
        return sp

    sp = cmd("synth-corpus", cmd_synth_corpus, "write a seeded synthetic aligned corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-utts", type=int)
    sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    sp = cmd("preprocess", cmd_preprocess, "build the unit cache (filtered units + mel slices)")
    sp.add_argument("--corpus", help="directory with manifest.tsv and alignments.tsv")
    sp.add_argument("--manifest")
    sp.add_argument("--alignments")
    sp.add_argument("--out", help="cache directory (default: <corpus>/cache_<kind>)")
    sp.add_argument("--kind", choices=(corpus.SYLLABLE, corpus.PHONEME))
    sp.add_argument("--stop-words", help="file with one stop word per line")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes for feature extraction")

    sp = cmd("train", cmd_train, "train a speech-LM variant")
    sp.add_argument("--cache")
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", choices=speechlm.VARIANTS)
    sp.add_argument("--textlm", help="frozen text-LM checkpoint (aux_textlm)")
    sp.add_argument("--steps", type=int, help="stop after this many updates")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch", type=int)

    sp = cmd("train-textlm", cmd_train_textlm, "train the sub-word text LM")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--cache", help="use the unit labels of a unit cache")
    src.add_argument("--tokens", help="token stream file: labels per line")
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--no-cbow", action="store_true", help="random embedding initialization")

    sp = cmd("babble", cmd_babble, "generate units autoregressively and vocode them")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--cache")
    sp.add_argument("--out", required=True)
    sp.add_argument("--textlm")
    sp.add_argument("--n-units", type=int)
    sp.add_argument("--context-index", type=int, default=0, help="which held-out window seeds the context")

    sp = cmd("eval", cmd_eval, "metric report over trained checkpoints")
    sp.add_argument("checkpoints", nargs="+", metavar="[NAME=]CHECKPOINT")
    sp.add_argument("--cache")
    sp.add_argument("--out", required=True)
    sp.add_argument("--textlm")
    sp.add_argument("--samples", type=int)

    sp = cmd("probe", cmd_probe, "vowel probes and confusion matrices")
    sp.add_argument("--cache")
    sp.add_argument("--out", required=True)
    sp.add_argument("--checkpoint", action="append", default=[])

    sp = cmd("gradcheck", cmd_gradcheck, "finite-difference check of a tiny model's gradients")
    sp.add_argument("--variant", choices=speechlm.VARIANTS)
    sp.add_argument("--eps", type=float, default=1e-4)
    return p


def _overrides(args):
    g = lambda name: getattr(args, name, None)  # noqa: E731
    o = {"seed": g("seed"), "model.variant": g("variant"), "corpus.n_utts": g("n_utts"),
         "corpus.kind": g("kind"), "corpus.stop_words": g("stop_words"),
         "train.steps": g("steps"), "train.lr": g("lr"), "train.batch": g("batch"),
         "babble.n_units": g("n_units"), "eval.samples": g("samples"),
         "textlm.dim": g("dim"), "paths.cache": g("cache"), "paths.textlm": g("textlm")}
    if args.command == "train":
        o["train.epochs"] = g("epochs")
    if args.command == "train-textlm":
        o["textlm.epochs"] = g("epochs")
        if args.no_cbow:
            o["textlm.cbow"] = False
    if args.command == "synth-corpus":
        o["paths.corpus"] = args.out
    elif args.command == "preprocess":
        o["paths.corpus"] = args.corpus
        o["paths.cache"] = args.out
    else:
        o["paths.out"] = g("out")
    return o


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help exits 0
        return exc.code
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args, _overrides(args))
        args.fn(args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except SblmError as exc:  # pragma: no cover - every subclass is handled above
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
