"""Alignments -> syllables/phonemes -> filtered, mel-sliced units.

Syllable boundaries inside a word follow a legal-onset cut: of the
consonants between two vowels, the longest suffix that is a legal English
onset starts the next syllable and the rest closes the previous one. That
gives ``p r ih n | t ih n g`` for "printing".
"""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import artic
from .dsp import DspConfig, MelSpectrogram, load_wav, melspectrogram, read_mels, write_mels
from .errors import (AlignmentError, FormatError, InventoryError, NoNucleusError,
                     ValidationError)

log = logging.getLogger(__name__)

VOWELS = frozenset({"aa", "ae", "ah", "ao", "aw", "ay", "eh", "er", "ey",
                    "ih", "iy", "ow", "oy", "uh", "uw", "ax"})
CONSONANTS = frozenset({"b", "ch", "d", "dh", "f", "g", "hh", "jh", "k", "l",
                        "m", "n", "ng", "p", "r", "s", "sh", "t", "th", "v",
                        "w", "y", "z", "zh"})
SILENCES = frozenset({"sil", "sp", "spn", "pau"})

# Words that Table-1-style preprocessing keeps ("in", "to", "with", "at", ...)
# are deliberately absent.
DEFAULT_STOP_WORDS = frozenset({
    "the", "a", "an", "of", "and", "is", "it", "that", "for", "on", "as",
    "was", "by", "be", "this", "from", "or", "but", "not", "his", "her",
    "he", "she", "had", "has"})

LEGAL_ONSETS = frozenset(
    [(c,) for c in CONSONANTS if c != "ng"]
    + [tuple(o.split()) for o in (
        "p r", "t r", "k r", "b r", "d r", "g r", "f r", "th r", "sh r",
        "p l", "k l", "b l", "g l", "f l", "s l",
        "t w", "k w", "d w", "s w", "g w", "sh w", "th w", "hh w",
        "s p", "s t", "s k", "s f", "s m", "s n",
        "s p r", "s p l", "s t r", "s k r", "s k w", "s k l",
        "p y", "k y", "b y", "f y", "hh y", "v y", "th y", "m y", "g y",
        "s p y", "s k y")])

MAX_SYLLABLE_SECONDS = 0.250
MAX_PHONEME_SECONDS = 0.150
SYLLABLE = "syllable"
PHONEME = "phoneme"
VOWEL_LIST = tuple(sorted(VOWELS))


@dataclass(frozen=True)
class PhoneInventory:
    vowels: frozenset = VOWELS
    consonants: frozenset = CONSONANTS
    stop_words: frozenset = DEFAULT_STOP_WORDS
    silences: frozenset = SILENCES

    def __post_init__(self):
        if self.vowels & self.consonants:
            raise ValidationError("vowel and consonant sets overlap")
        if len(self.vowels) != 16:
            raise ValidationError(f"expected 16 vowels, got {len(self.vowels)}")

    def is_vowel(self, phone: str) -> bool:
        return phone in self.vowels

    def known(self, phone: str) -> bool:
        return phone in self.vowels or phone in self.consonants or phone in self.silences

    def with_stop_words(self, words) -> "PhoneInventory":
        return PhoneInventory(self.vowels, self.consonants,
                              frozenset(w.lower() for w in words), self.silences)


DEFAULT_INVENTORY = PhoneInventory()


def load_stop_words(path) -> frozenset:
    with open(path, encoding="utf-8") as fh:
        return frozenset(line.strip().lower() for line in fh if line.strip())


@dataclass(frozen=True)
class PhoneEvent:
    utt_id: str
    phone: str
    start: float
    end: float
    word_index: int


@dataclass
class Unit:
    kind: str
    phones: tuple
    onset: tuple
    nucleus: str | None
    coda: tuple
    start: float
    end: float
    frames: np.ndarray
    artic: np.ndarray
    utt_id: str = ""
    word: str = ""
    frame_start: int = 0

    @property
    def label(self) -> str:
        return "".join(self.phones)

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def vowel(self) -> str | None:
        """Nucleus of a syllable, or the phone itself for a vowel phoneme."""
        if self.kind == SYLLABLE:
            return self.nucleus
        return self.phones[0] if self.phones[0] in VOWELS else None


@dataclass
class UnitSequence:
    utt_id: str
    units: list
    transcript: str = ""
    dropped: Counter = field(default_factory=Counter)

    def __len__(self):
        return len(self.units)

    def labels(self) -> list:
        return [u.label for u in self.units]


# ------------------------------------------------------------ alignments

def parse_alignment(path, inv: PhoneInventory = DEFAULT_INVENTORY) -> dict:
    """Read a TSV ``utt_id, phone, start, end, word_index``; returns utt_id -> events."""
    grouped = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if lineno == 1 and cols[0] == "utt_id":
                continue
            if len(cols) != 5:
                raise AlignmentError(f"expected 5 columns, got {len(cols)}", line=lineno)
            utt, phone, start, end, widx = cols
            phone = phone.strip().lower()
            if not inv.known(phone):
                raise InventoryError(f"unknown phone {phone!r} (utt {utt}, line {lineno})")
            try:
                ev = PhoneEvent(utt, phone, float(start), float(end), int(widx))
            except ValueError as exc:
                raise AlignmentError(f"bad field: {exc}", utt, lineno) from None
            if not ev.end > ev.start:
                raise AlignmentError("event ends before it starts", utt, lineno)
            grouped[utt].append((ev, lineno))

    out = {}
    for utt, items in grouped.items():
        items.sort(key=lambda x: (x[0].start, x[0].end))
        for (a, _), (b, lb) in zip(items, items[1:]):
            if a.end > b.start + 1e-9:
                raise AlignmentError(
                    f"overlapping events {a.phone}[{a.start},{a.end}) and "
                    f"{b.phone}[{b.start},{b.end})", utt, lb)
        out[utt] = [ev for ev, _ in items]
    return out


def write_alignment(path, events) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(f"{ev.utt_id}\t{ev.phone}\t{ev.start:.6f}\t{ev.end:.6f}\t{ev.word_index}\n")


def read_manifest(path) -> list:
    """Rows of ``(utt_id, wav_path, transcript)``; relative wav paths resolve
    against the manifest's directory."""
    base = Path(path).parent
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 tab-separated columns")
            wav = Path(cols[1])
            rows.append((cols[0], wav if wav.is_absolute() else base / wav, cols[2]))
    return rows


def write_manifest(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt, wav, text in rows:
            fh.write(f"{utt}\t{wav}\t{text}\n")


# ------------------------------------------------------------ syllables

def syllabify(word_phones, inv: PhoneInventory = DEFAULT_INVENTORY) -> list:
    """Split one word's phones into ``(onset, nucleus, coda)`` triples."""
    phones = list(word_phones)
    nuclei = [i for i, p in enumerate(phones) if inv.is_vowel(p)]
    if not nuclei:
        raise NoNucleusError(f"no vowel in {' '.join(phones) or '<empty>'}")
    for p in phones:
        if not (inv.is_vowel(p) or p in inv.consonants):
            raise InventoryError(f"unknown phone {p!r}")

    onsets = [tuple(phones[:nuclei[0]])]
    codas = []
    for a, b in zip(nuclei, nuclei[1:]):
        cluster = phones[a + 1:b]
        cut = len(cluster)
        for k in range(len(cluster)):
            if tuple(cluster[k:]) in LEGAL_ONSETS:
                cut = k
                break
        codas.append(tuple(cluster[:cut]))
        onsets.append(tuple(cluster[cut:]))
    codas.append(tuple(phones[nuclei[-1] + 1:]))
    return [(onsets[i], phones[n], codas[i]) for i, n in enumerate(nuclei)]


def syllable_string(sylls) -> str:
    return "".join("<" + ".".join([*o, n, *c]) + ">" for o, n, c in sylls)


# ------------------------------------------------------------ units

def frame_range(start: float, end: float, hop_seconds: float, n_frames: int) -> tuple:
    """Frames whose centre ``(t + 0.5) * hop`` lies in ``[start, end)``."""
    centers = (np.arange(n_frames) + 0.5) * hop_seconds
    idx = np.nonzero((centers >= start) & (centers < end))[0]
    if len(idx) == 0:
        return 0, 0
    return int(idx[0]), int(idx[-1]) + 1


def _words(events, words):
    grouped = defaultdict(list)
    for ev in events:
        grouped[ev.word_index].append(ev)
    for widx in sorted(grouped):
        text = words[widx] if words is not None and 0 <= widx < len(words) else ""
        yield widx, text, grouped[widx]


def build_units(events, mel: MelSpectrogram, kind: str = SYLLABLE,
                inv: PhoneInventory = DEFAULT_INVENTORY, words=None,
                table: artic.ArticTable | None = None, transcript: str = "") -> UnitSequence:
    """Turn one utterance's events into filtered units with mel slices.

    ``words`` are the transcript tokens addressed by ``word_index``; without
    them no stop-word filtering happens.
    """
    if kind not in (SYLLABLE, PHONEME):
        raise ValidationError(f"unknown unit kind {kind!r}")
    table = table or artic.default_table()
    utt = events[0].utt_id if events else ""
    if words is None and transcript:
        words = transcript.split()
    dropped = Counter()
    units = []
    limit = MAX_SYLLABLE_SECONDS if kind == SYLLABLE else MAX_PHONEME_SECONDS

    speech = []
    for ev in events:
        if ev.phone in inv.silences:
            dropped["silence"] += 1
        else:
            speech.append(ev)

    for _, text, evs in _words(speech, words):
        if text and text.lower().strip(".,;:!?\"'") in inv.stop_words:
            dropped["stopword"] += 1
            continue
        if kind == SYLLABLE:
            try:
                sylls = syllabify([e.phone for e in evs], inv)
            except NoNucleusError:
                log.info("%s: dropping vowel-less word %r", utt, text)
                dropped["no_nucleus"] += 1
                continue
            pos = 0
            for onset, nucleus, coda in sylls:
                n = len(onset) + 1 + len(coda)
                seg = evs[pos:pos + n]
                pos += n
                vec = artic.syllable_vector(onset, nucleus, coda, table)
                units.append(Unit(SYLLABLE, tuple(e.phone for e in seg), tuple(onset),
                                  nucleus, tuple(coda), seg[0].start, seg[-1].end,
                                  None, vec, utt, text))
        else:
            for e in evs:
                units.append(Unit(PHONEME, (e.phone,), (), None, (), e.start, e.end,
                                  None, artic.phone_vector(e.phone, table), utt, text))

    kept = []
    for u in units:
        if u.duration > limit + 1e-9:
            dropped["too_long"] += 1
            continue
        a, b = frame_range(u.start, u.end, mel.hop_seconds, mel.n_frames)
        if b <= a:
            dropped["no_frames"] += 1
            continue
        u.frames = mel.frames[a:b]
        u.frame_start = a
        kept.append(u)
    for reason, n in sorted(dropped.items()):
        log.debug("%s: dropped %d (%s)", utt, n, reason)
    return UnitSequence(utt, kept, transcript, dropped)


def context_windows(seq: UnitSequence, n_ctx: int = 4) -> list:
    """All ``(context, target)`` pairs of consecutive units within one utterance."""
    u = seq.units
    return [(tuple(u[i:i + n_ctx]), u[i + n_ctx]) for i in range(max(0, len(u) - n_ctx))]


# ------------------------------------------------------------ statistics

@dataclass
class CorpusStats:
    counts: list
    total: int

    def top_share(self, k: int) -> float:
        if self.total == 0:
            return 0.0
        return sum(c for _, c in self.counts[:k]) / self.total

    def share(self, labels) -> float:
        if self.total == 0:
            return 0.0
        d = dict(self.counts)
        return sum(d.get(x, 0) for x in labels) / self.total

    def as_dict(self) -> dict:
        return dict(self.counts)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "count"])
            w.writerows(self.counts)


def corpus_stats(seqs) -> CorpusStats:
    c = Counter()
    for seq in seqs:
        c.update(seq.labels() if isinstance(seq, UnitSequence) else seq)
    counts = sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))
    return CorpusStats(counts, sum(c.values()))


# ------------------------------------------------------------ unit cache

INDEX_FIELDS = ("utt_id", "kind", "phones", "onset", "nucleus", "coda", "start",
                "end", "frame_start", "n_frames", "word", "artic")


def _utt_units(args):
    utt, wav, text, events, kind, inv, cfg = args
    mel = melspectrogram(load_wav(wav), cfg)
    # the cache stores f32; slice from the same values it will hand back
    mel = MelSpectrogram(mel.frames.astype(np.float32), mel.hop_seconds, mel.config_id)
    return mel, build_units(events, mel, kind, inv, transcript=text)


def preprocess(manifest, alignments, out_dir, kind: str = SYLLABLE,
               inv: PhoneInventory = DEFAULT_INVENTORY, cfg: DspConfig | None = None,
               jobs: int = 1) -> tuple:
    """Manifest + alignments -> unit cache under ``out_dir``.

    Writes one ``mels/<utt>.mels`` per utterance, ``index.tsv`` (one row per
    kept unit), ``transcripts.tsv`` and ``filters.json`` (drop counts).
    Returns ``(sequences, drop_counts)``.
    """
    cfg = cfg or DspConfig()
    rows = read_manifest(manifest)
    events = parse_alignment(alignments, inv)
    missing = [u for u, _, _ in rows if u not in events]
    if missing:
        raise ValidationError(f"no alignment for {len(missing)} utterance(s), e.g. {missing[0]}")
    out = Path(out_dir)
    (out / "mels").mkdir(parents=True, exist_ok=True)
    work = [(u, w, t, events[u], kind, inv, cfg) for u, w, t in rows]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_utt_units, work, chunksize=8))
    else:
        results = [_utt_units(w) for w in work]

    drops = Counter()
    seqs = []
    with open(out / "index.tsv", "w", encoding="utf-8", newline="") as idx, \
            open(out / "transcripts.tsv", "w", encoding="utf-8") as tr:
        w = csv.writer(idx, delimiter="\t", lineterminator="\n")
        w.writerow(INDEX_FIELDS)
        for (utt, _, text), (mel, seq) in zip(rows, results):
            write_mels(out / "mels" / f"{utt}.mels", mel)
            tr.write(f"{utt}\t{text}\n")
            drops.update(seq.dropped)
            seqs.append(seq)
            for u in seq.units:
                w.writerow([utt, u.kind, " ".join(u.phones), " ".join(u.onset), u.nucleus or "",
                            " ".join(u.coda), f"{u.start:.6f}", f"{u.end:.6f}", u.frame_start,
                            u.n_frames, u.word, "".join(str(int(x)) for x in u.artic)])
    n_units = sum(len(s) for s in seqs)
    summary = {"kind": kind, "utterances": len(seqs), "units": n_units,
               "dropped": dict(sorted(drops.items())), "dsp_config": cfg.config_id}
    (out / "filters.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    log.info("preprocess %s: %d units kept, dropped %s", kind, n_units, dict(drops))
    return seqs, drops


def load_cache(cache_dir) -> list:
    """Read a unit cache back into ``UnitSequence`` objects (manifest order)."""
    d = Path(cache_dir)
    if not (d / "index.tsv").exists():
        raise FormatError(f"{d}: not a unit cache (index.tsv missing)")
    transcripts = {}
    with open(d / "transcripts.tsv", encoding="utf-8") as fh:
        for line in fh:
            utt, _, text = line.rstrip("\n").partition("\t")
            transcripts[utt] = text
    units = defaultdict(list)
    with open(d / "index.tsv", encoding="utf-8", newline="") as fh:
        for r in csv.DictReader(fh, delimiter="\t"):
            units[r["utt_id"]].append(r)
    mels = {}
    seqs = []
    for utt, text in transcripts.items():
        mel = mels.get(utt) or read_mels(d / "mels" / f"{utt}.mels")
        kept = []
        for r in units.get(utt, []):
            a, n = int(r["frame_start"]), int(r["n_frames"])
            kept.append(Unit(r["kind"], tuple(r["phones"].split()), tuple(r["onset"].split()),
                             r["nucleus"] or None, tuple(r["coda"].split()), float(r["start"]),
                             float(r["end"]), mel.frames[a:a + n],
                             np.array([int(c) for c in r["artic"]], dtype=np.float32),
                             utt, r["word"], a))
        seqs.append(UnitSequence(utt, kept, text))
    return seqs
