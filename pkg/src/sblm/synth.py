"""Seeded formant synthesizer producing a small aligned corpus.

Vowels are three fixed-frequency sinusoids (one triple per vowel);
consonants are band-limited noise (fricatives), closure + burst (stops,
affricates), or weak low-frequency tones (nasals, liquids, glides). Words
are chained by a fixed first-order Markov model so the transcripts carry
sequential structure a text LM can learn.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .corpus import PhoneEvent, write_alignment, write_manifest
from .dsp import AudioBuffer, write_wav
from .errors import ValidationError

SAMPLE_RATE = 22050

FORMANTS = {
    "iy": (270, 2290, 3010), "ih": (390, 1990, 2550), "eh": (530, 1840, 2480),
    "ae": (660, 1720, 2410), "aa": (730, 1090, 2440), "ao": (570, 840, 2410),
    "uh": (440, 1020, 2240), "uw": (300, 870, 2240), "ah": (640, 1190, 2390),
    "er": (490, 1350, 1690), "ax": (500, 1500, 2500), "ey": (420, 2150, 2750),
    "ay": (780, 1400, 2600), "aw": (690, 950, 2300), "ow": (450, 780, 2650),
    "oy": (550, 960, 2850),
}
FORMANT_GAINS = (1.0, 0.5, 0.25)

FRICATIVE_BANDS = {"s": (4000, 8000), "z": (4000, 8000), "sh": (2000, 4500),
                   "zh": (2000, 4500), "f": (1000, 7000), "v": (1000, 7000),
                   "th": (1500, 7500), "dh": (1500, 7500), "hh": (300, 4000)}
STOP_BANDS = {"p": (400, 1500), "b": (400, 1500), "t": (3000, 6000),
              "d": (3000, 6000), "k": (1500, 3000), "g": (1500, 3000),
              "ch": (2000, 4500), "jh": (2000, 4500)}
SONORANT_TONES = {"m": (250, 1100), "n": (250, 1700), "ng": (250, 2300),
                  "l": (350, 1200), "r": (400, 1300), "w": (300, 700),
                  "y": (280, 2200)}
VOICED = {"b", "d", "g", "jh", "z", "zh", "v", "dh"}

# (spelling, phones); "the" and "a" exercise the stop-word filter
LEXICON = (
    ("the", "dh ax"), ("a", "ax"), ("ma", "m aa"), ("bee", "b iy"),
    ("too", "t uw"), ("kat", "k ae t"), ("pit", "p ih t"), ("fen", "f eh n"),
    ("sob", "s aa b"), ("nor", "n ao r"), ("look", "l uh k"), ("dun", "d ah n"),
    ("ger", "g er"), ("day", "d ey"), ("my", "m ay"), ("how", "hh aw"),
    ("so", "s ow"), ("boy", "b oy"), ("zip", "z ih p"), ("vat", "v ae t"),
    ("shoe", "sh uw"), ("rim", "r ih m"), ("stay", "s t ey"),
    ("printing", "p r ih n t ih n g"), ("bada", "b aa d ax"),
    ("kato", "k ae t ow"), ("lemon", "l eh m ax n"), ("only", "ow n l iy"),
    ("present", "p r eh z ax n t"),
)


def _n_syllables(phones):
    return sum(p in FORMANTS for p in phones)


def _transitions():
    # fixed model, independent of the corpus seed
    rng = np.random.default_rng(20220917)
    n = len(LEXICON)
    P = np.full((n, n), 0.02)
    for i in range(n):
        P[i, rng.choice(n, size=3, replace=False)] += rng.uniform(1.0, 3.0, size=3)
    return P / P.sum(axis=1, keepdims=True)


def _envelope(n, ramp):
    env = np.ones(n)
    r = min(ramp, n // 2)
    if r > 0:
        w = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        env[:r] = w
        env[n - r:] = w[::-1]
    return env


def _band_noise(rng, n, lo, hi, sr):
    if n == 0:
        return np.zeros(0)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(spec, n=n)
    peak = np.max(np.abs(x))
    return x / peak if peak > 0 else x


def _tones(freqs, gains, n, sr, phase0=0.0):
    t = np.arange(n) / sr
    return sum(g * np.sin(2 * np.pi * f * t + phase0) for f, g in zip(freqs, gains))


def render_phone(phone, n, rng, sr=SAMPLE_RATE):
    """Samples for one phone of length ``n``."""
    ramp = int(0.012 * sr)
    if phone in FORMANTS:
        return 0.3 * _tones(FORMANTS[phone], FORMANT_GAINS, n, sr) * _envelope(n, ramp)
    if phone in FRICATIVE_BANDS:
        lo, hi = FRICATIVE_BANDS[phone]
        amp = 0.08 if phone in ("f", "th", "hh") else 0.15
        x = amp * _band_noise(rng, n, lo, hi, sr)
        if phone in VOICED:
            x += 0.05 * _tones((150,), (1.0,), n, sr)
        return x * _envelope(n, ramp)
    if phone in STOP_BANDS:
        lo, hi = STOP_BANDS[phone]
        burst = min(n, int((0.04 if phone in ("ch", "jh") else 0.018) * sr))
        x = np.zeros(n)
        if phone in VOICED:
            x[:n - burst] = 0.03 * _tones((150,), (1.0,), n - burst, sr)
        x[n - burst:] = 0.25 * _band_noise(rng, burst, lo, hi, sr) * _envelope(burst, burst // 4)
        return x
    if phone in SONORANT_TONES:
        return 0.12 * _tones(SONORANT_TONES[phone], (1.0, 0.3), n, sr) * _envelope(n, ramp)
    raise ValidationError(f"synthesizer has no recipe for {phone!r}")


def _duration(phone, rng):
    if phone in FORMANTS:
        return rng.uniform(0.065, 0.135)
    if phone in STOP_BANDS:
        return rng.uniform(0.040, 0.065)
    if phone in FRICATIVE_BANDS:
        return rng.uniform(0.045, 0.080)
    return rng.uniform(0.035, 0.060)


def generate_utterance(utt_id, rng, P=None, sr=SAMPLE_RATE):
    """Returns ``(samples, events, transcript)`` for one utterance."""
    P = _transitions() if P is None else P
    target = int(rng.integers(4, 13))
    words = []
    w = int(rng.integers(len(LEXICON)))
    left = target
    while left > 0:
        phones = LEXICON[w][1].split()
        k = _n_syllables(phones)
        if k > left:
            mono = [i for i, (_, ph) in enumerate(LEXICON) if _n_syllables(ph.split()) == 1]
            w = int(rng.choice(mono))
            continue
        words.append(w)
        left -= k
        w = int(rng.choice(len(LEXICON), p=P[w]))

    chunks, events = [], []
    pos = 0

    def add(phone, n, widx, samples):
        nonlocal pos
        chunks.append(samples)
        events.append(PhoneEvent(utt_id, phone, pos / sr, (pos + n) / sr, widx))
        pos += n

    lead = int(0.10 * sr)
    add("sil", lead, -1, np.zeros(lead))
    for widx, w in enumerate(words):
        if widx > 0:
            gap = int(rng.uniform(0.045, 0.090) * sr)
            add("sil", gap, -1, np.zeros(gap))
        for ph in LEXICON[w][1].split():
            n = int(_duration(ph, rng) * sr)
            add(ph, n, widx, render_phone(ph, n, rng, sr))
    tail = int(0.10 * sr)
    add("sil", tail, -1, np.zeros(tail))
    x = np.concatenate(chunks)
    x += 1e-4 * rng.standard_normal(len(x))
    return np.clip(x, -1.0, 1.0), events, " ".join(LEXICON[w][0] for w in words)


def synth_corpus(out_dir, seed: int = 7, n_utts: int = 200, sr: int = SAMPLE_RATE):
    """Write ``wavs/*.wav``, ``alignments.tsv`` and ``manifest.tsv`` under ``out_dir``."""
    if n_utts < 1:
        raise ValidationError("n_utts must be >= 1")
    out = Path(out_dir)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    P = _transitions()
    rows, all_events = [], []
    for i in range(n_utts):
        utt = f"utt{i:05d}"
        x, events, text = generate_utterance(utt, rng, P, sr)
        rel = Path("wavs") / f"{utt}.wav"
        write_wav(out / rel, AudioBuffer(x, sr))
        rows.append((utt, rel.as_posix(), text))
        all_events.extend(events)
    write_alignment(out / "alignments.tsv", all_events)
    write_manifest(out / "manifest.tsv", rows)
    return out / "manifest.tsv", out / "alignments.tsv"
