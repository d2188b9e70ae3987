"""Acceptance suite: one test per criterion, run at the stated tolerances.

The end-to-end criteria share one pipeline run (synthetic corpus with seed 7,
unit cache, MTL model trained for 2000 steps, text LM) built lazily by
module-scoped fixtures. A summary line per criterion is printed at the end
of the pytest run.
"""
import csv
import json
import math
import time
from collections import defaultdict

import numpy as np
import pytest

from sblm import cli, kernels, corpus, dsp, evalprobe, pipeline, speechlm, textlm
from sblm.corpus import PhoneEvent
from sblm.dsp import AudioBuffer, DspConfig, MelSpectrogram

CFG = DspConfig()


def detail(record_property, text):
    record_property("detail", text)
    print(text)


# ---------------------------------------------------------------- shared pipeline

@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """synth-corpus(seed 7) -> preprocess -> train(MTL, 2000 steps) -> babble(20 units)."""
    root = tmp_path_factory.mktemp("e2e")
    t0 = time.time()
    assert cli.main(["synth-corpus", "--out", str(root / "corpus"), "--n-utts", "600", "--seed", "7"]) == 0
    assert cli.main(["preprocess", "--corpus", str(root / "corpus")]) == 0
    cache = root / "corpus" / "cache_syllable"
    assert cli.main(["train", "--cache", str(cache), "--out", str(root / "mtl"),
                     "--variant", "mtl_panphon", "--steps", "2000"]) == 0
    runs = []
    for name in ("babble", "babble_again"):  # same seed twice: byte-identical audio
        assert cli.main(["babble", "--checkpoint", str(root / "mtl" / "model.sblm"),
                         "--cache", str(cache), "--out", str(root / name),
                         "--n-units", "20", "--seed", "3"]) == 0
        runs.append(root / name)
    elapsed = time.time() - t0
    seqs = corpus.load_cache(cache)
    train, val = pipeline.split_sequences(seqs, 0.1, 0)
    return {"root": root, "cache": cache, "seqs": seqs, "train": train, "val": val,
            "model": speechlm.SpeechLM.load(root / "mtl" / "model.sblm"),
            "babble": runs, "seconds": elapsed}


@pytest.fixture(scope="module")
def text_lm(e2e):
    """Default-size text LM (CBOW-initialized) on the synthetic transcripts."""
    train = pipeline.label_utterances(e2e["train"])
    val = pipeline.label_utterances(e2e["val"])
    lm, res, _ = pipeline.train_text_lm(train, val, seed=0)
    return lm, train, val


# ---------------------------------------------------------------- 1

def test_criterion_01_gradient_correctness(record_property):
    t0 = time.time()
    errs = {}
    for v in speechlm.VARIANTS:
        rep = cli.tiny_gradcheck(v, seed=0, hidden=8, mel=8, n_ctx=2, frames=3)
        errs[v] = rep.max_rel_err
    elapsed = time.time() - t0
    detail(record_property, ", ".join(f"{k} {e:.1e}" for k, e in errs.items()) + f"; {elapsed:.1f}s")
    assert all(e < 1e-4 for e in errs.values())
    assert elapsed < 60


# ---------------------------------------------------------------- 2

def test_criterion_02_dimension_ledger(record_property):
    want = {speechlm.SYNTHESIS_ONLY: 1024, speechlm.MTL_PANPHON: 1024,
            speechlm.AUX_TEXTLM: 1792, speechlm.TOPLINE: 1090}
    got = {}
    for v, za in want.items():
        led = speechlm.SpeechLM(v).dimension_ledger()
        got[v] = led
        assert led == {"v": 256, "z": 1024, "z_aug": za, "frame": 80, "panphon": 66}
    detail(record_property, "z_aug " + ", ".join(f"{v}={d['z_aug']}" for v, d in got.items()))


# ---------------------------------------------------------------- 3

@pytest.mark.slow
def test_criterion_03_overfit_sanity(record_property, e2e, text_lm):
    ten = pipeline.windows(e2e["train"])[:10]
    lm = text_lm[0]
    t0 = time.time()
    ratios = {}
    for v in speechlm.VARIANTS:
        ex = speechlm.make_examples(ten, v, lm.context_embedding)
        model = speechlm.SpeechLM(v, speechlm.Dims(text=lm.dim), seed=0)
        model.fit_normalization(ex)
        initial = model.evaluate(ex)["mse"]
        speechlm.train(model, ex, cfg=speechlm.TrainConfig(batch=10, max_steps=500, seed=0), fit_norm=False)
        ratios[v] = model.evaluate(ex)["mse"] / initial
    elapsed = time.time() - t0
    detail(record_property, ", ".join(f"{k} {r:.4f}" for k, r in ratios.items()) + f"; {elapsed:.0f}s")
    assert all(r < 0.1 for r in ratios.values())
    assert elapsed < 300


# ---------------------------------------------------------------- 4

def test_criterion_04_dsp_suite(record_property):
    silence = dsp.melspectrogram(AudioBuffer(np.zeros(22050)), CFG)
    assert np.max(np.abs(silence.frames - math.log(1e-5))) <= 1e-9

    rng = np.random.default_rng(0)
    for _ in range(1000):
        fft = int(rng.choice([64, 128, 256, 512, 1024, 2048]))
        hop = int(rng.integers(1, fft + 1))
        n = int(rng.integers(fft, fft + 4000))
        cfg = DspConfig(fft_size=fft, hop=hop, mel_bins=8)
        mel = dsp.melspectrogram(AudioBuffer(np.zeros(n)), cfg)
        assert mel.n_frames == (n - fft) // hop + 1

    t = np.arange(22050) / 22050
    audio = dsp.griffin_lim(dsp.melspectrogram(AudioBuffer(np.sin(2 * np.pi * 440 * t)), CFG), CFG)
    spec = np.abs(np.fft.rfft(audio.samples))
    peak = np.fft.rfftfreq(len(audio.samples), 1 / 22050)[np.argmax(spec)]
    assert abs(peak - 440.0) <= 22050 / CFG.fft_size

    frames = rng.normal(size=(5, 80))
    m = np.arange(80)
    basis = np.cos(np.pi * (m[None, :] + 0.5) * m[:, None] / 80) * math.sqrt(2 / 80)
    basis[0] /= math.sqrt(2)
    oracle = frames @ basis.T
    err = np.max(np.abs(dsp.mel_cepstrum(MelSpectrogram(frames)) - oracle[:, 1:14]))
    assert err <= 1e-9
    detail(record_property, f"GL peak {peak:.1f} Hz, DCT err {err:.1e}")


# ---------------------------------------------------------------- 5

def test_criterion_05_mcd_properties(record_property):
    rng = np.random.default_rng(1)
    x = MelSpectrogram(rng.normal(-5, 2, (20, 80)))
    y = MelSpectrogram(rng.normal(-5, 2, (27, 80)))
    assert evalprobe.mcd(x, x).value == 0.0
    sym = abs(evalprobe.mcd(x, y).value - evalprobe.mcd(y, x).value)
    assert sym <= 1e-12

    a, b = rng.normal(size=(2, 13)), rng.normal(size=(3, 13))
    best = None

    def walk(path):
        nonlocal best
        i, j = path[-1]
        if (i, j) == (1, 2):
            cost = sum(np.linalg.norm(a[p] - b[q]) for p, q in path)
            if best is None or cost < best[0]:
                best = (cost, len(path))
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < 2 and j + dj < 3:
                walk(path + [(i + di, j + dj)])

    walk([(0, 0)])
    res = evalprobe.mcd(a, b)
    acc, _ = kernels.dtw(np.linalg.norm(a[:, None] - b[None], axis=2))
    assert acc[-1, -1] == best[0]
    assert res.value == evalprobe.MCD_CONST * best[0] / best[1]
    detail(record_property, f"symmetry gap {sym:.1e}")


# ---------------------------------------------------------------- 6

@pytest.mark.slow
def test_criterion_06_syllabifier(record_property, e2e):
    events = corpus.parse_alignment(e2e["root"] / "corpus" / "alignments.tsv")
    n_words = 0
    for evs in events.values():
        words = defaultdict(list)
        for e in evs:
            if e.phone not in corpus.SILENCES:
                words[e.word_index].append(e.phone)
        for phones in words.values():
            sylls = corpus.syllabify(phones)
            assert [p for o, n, c in sylls for p in (*o, n, *c)] == phones
            for o, n, c in sylls:
                assert n in corpus.VOWELS
                assert sum(p in corpus.VOWELS for p in (*o, n, *c)) == 1
            n_words += 1
    printing = corpus.syllable_string(corpus.syllabify("p r ih n t ih n g".split()))
    assert printing == "<p.r.ih.n><t.ih.n.g>"
    detail(record_property, f"{n_words} words; printing -> {printing}")


# ---------------------------------------------------------------- 7

@pytest.mark.slow
def test_criterion_07_filter_ledger(record_property, e2e, tmp_path):
    root = e2e["root"] / "corpus"
    phon, _ = corpus.preprocess(root / "manifest.tsv", root / "alignments.tsv", tmp_path / "ph",
                                kind=corpus.PHONEME)
    for seqs, limit in ((e2e["seqs"], 0.250), (phon, 0.150)):
        units = [u for s in seqs for u in s.units]
        assert units
        assert all(u.duration <= limit + 1e-9 for u in units)
        assert not any(set(u.phones) & corpus.SILENCES for u in units)
        assert "dhax" not in {u.label for u in units}

    ev = lambda p, s, e, w: PhoneEvent("fx", p, s, e, w)
    fixture = [ev("sil", 0.0, 0.05, -1), ev("dh", 0.05, 0.09, 0), ev("ax", 0.09, 0.15, 0),
               ev("p", 0.15, 0.2, 1), ev("r", 0.2, 0.24, 1), ev("ih", 0.24, 0.32, 1),
               ev("n", 0.32, 0.37, 1), ev("t", 0.37, 0.42, 1), ev("ih", 0.42, 0.5, 1),
               ev("n", 0.5, 0.55, 1), ev("g", 0.55, 0.6, 1)]
    mel = dsp.melspectrogram(AudioBuffer(np.zeros(22050)), CFG)
    seq = corpus.build_units(fixture, mel, transcript="the printing")
    assert seq.labels() == ["prihn", "tihng"]
    detail(record_property, f"{sum(len(s) for s in e2e['seqs'])} syllables, "
                            f"{sum(len(s) for s in phon)} phonemes kept")


# ---------------------------------------------------------------- 8

@pytest.mark.slow
def test_criterion_08_probe_ordering(record_property, e2e, tmp_path):
    tr = pipeline.examples_for(e2e["train"], speechlm.SYNTHESIS_ONLY)
    te = pipeline.examples_for(e2e["val"], speechlm.SYNTHESIS_ONLY)
    untrained = speechlm.SpeechLM(speechlm.SYNTHESIS_ONLY, seed=0)
    untrained.fit_normalization(tr)
    out = {}
    for name, source, model in (("panphon", "panphon", None), ("untrained", "latent", untrained),
                                ("mtl", "latent", e2e["model"])):
        out[name] = evalprobe.run_probe(source, tr, te, model)
        out[name].test.write_csv(tmp_path / f"confusion_{name}.csv")
        assert (tmp_path / f"confusion_{name}.csv").read_text().count("\n") == evalprobe.N_CLASSES + 1
    assert out["panphon"].train.accuracy == 1.0
    assert out["panphon"].test.accuracy >= out["untrained"].test.accuracy
    detail(record_property, ", ".join(f"{k} {o.test.accuracy:.3f}" for k, o in out.items()))


# ---------------------------------------------------------------- 9

@pytest.mark.slow
def test_criterion_09_text_lm(record_property, text_lm):
    periodic = [["a", "b", "c"] * 40 for _ in range(8)]
    v = textlm.SubwordVocab.build(periodic)
    m = textlm.TextLM(v, dim=16, seed=0)
    textlm.lm_train(m, v.stream(periodic), cfg=textlm.LmTrainConfig(epochs=30, lr=1e-2, batch=4))
    ppl_periodic = textlm.evaluate_lm(m, v.stream([["a", "b", "c"] * 30])).perplexity

    rng = np.random.default_rng(0)
    syms = np.array(["a", "b", "c", "d"])
    train = [list(syms[rng.integers(0, 4, 100)]) for _ in range(60)]
    val = [list(syms[rng.integers(0, 4, 100)]) for _ in range(10)]
    v = textlm.SubwordVocab.build(train)
    m = textlm.TextLM(v, dim=16, seed=0)
    textlm.lm_train(m, v.stream(train), cfg=textlm.LmTrainConfig(epochs=3, lr=1e-2, batch=8))
    ids = v.stream(val)
    keep = ids[1:] != v.bos
    ppl_uniform = textlm.score_predictions(m.predict_stream(ids)[keep], ids[1:][keep]).perplexity

    lm, tr, va = text_lm
    ppl = textlm.evaluate_lm(lm, lm.vocab.stream(va)).perplexity
    uni = textlm.unigram_perplexity(lm.vocab.stream(tr), lm.vocab.stream(va), len(lm.vocab))
    detail(record_property, f"periodic {ppl_periodic:.3f}, uniform {ppl_uniform:.3f}, "
                            f"synthetic {ppl:.2f} vs unigram {uni:.2f}")
    assert ppl_periodic < 1.1
    assert 3.8 <= ppl_uniform <= 4.2
    assert ppl < uni


# ---------------------------------------------------------------- 10

@pytest.mark.slow
def test_criterion_10_end_to_end_babble(record_property, e2e):
    a, b = e2e["babble"]
    assert (a / "babble.wav").read_bytes() == (b / "babble.wav").read_bytes()
    meta = json.loads((a / "babble.json").read_text())
    audio = dsp.load_wav(a / "babble.wav")
    count, segs, _ = pipeline.syllabic_structure(audio, meta["unit_frames"])
    detail(record_property, f"{count} reset-separated segments of {len(segs)}, "
                            f"{meta['total_frames']} frames, {e2e['seconds'] / 60:.1f} min")
    assert count >= 5
    assert e2e["seconds"] < 30 * 60


# ---------------------------------------------------------------- 11

@pytest.mark.slow
def test_criterion_11_metric_report(record_property, e2e, text_lm, tmp_path):
    lm = text_lm[0]
    entries = [("mtl_panphon", e2e["model"], None)]
    for v in (speechlm.SYNTHESIS_ONLY, speechlm.AUX_TEXTLM, speechlm.TOPLINE):
        model = speechlm.SpeechLM(v, dims=speechlm.Dims(text=lm.dim), seed=0)
        use = lm if v == speechlm.AUX_TEXTLM else None
        tr = pipeline.examples_for(e2e["train"], v, use)
        speechlm.train(model, tr, cfg=speechlm.TrainConfig(max_steps=300, seed=0))
        entries.append((v, model, use))
    rows = pipeline.metric_report(entries, e2e["train"], e2e["val"], n_samples=10, seed=0)
    evalprobe.write_report(tmp_path / "report.csv", rows)
    corr = evalprobe.correlations(rows)
    evalprobe.write_correlations(tmp_path / "correlations.csv", corr)
    read = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert list(read[0]) == list(evalprobe.REPORT_FIELDS)
    assert [r["variant"] for r in read] == [e[0] for e in entries]
    assert all(float(r["mcd_mean"]) > 0 for r in read)
    assert len(corr) == 3 and all(np.isfinite(c["pearson"]) for c in corr)
    for r in rows:
        print(r)
    detail(record_property, "; ".join(f"r({c['metric_a']},{c['metric_b']})={c['pearson']:.2f}" for c in corr))
