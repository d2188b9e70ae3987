"""Articulatory feature vectors for phones and syllables.

Phones map to 22 ternary features (Panphon order). A syllable becomes a
66-dim binary vector: max-pooled onset, nucleus, max-pooled coda, each block
binarized with ``+1 -> 1`` and ``{0, -1} -> 0``.
"""
from __future__ import annotations

import csv
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DomainError, InventoryError, ValidationError

FEATURES = ("syl", "son", "cons", "cont", "delrel", "lat", "nas", "strid",
            "voi", "sg", "cg", "ant", "cor", "distr", "lab", "hi", "lo",
            "back", "round", "velaric", "tense", "long")
N_FEATURES = len(FEATURES)
SYLLABLE_DIM = 3 * N_FEATURES


class ArticTable:
    """Immutable phone -> 22-dim ternary vector table."""

    def __init__(self, rows: dict[str, np.ndarray]):
        clean = {}
        for phone, vec in rows.items():
            v = np.asarray(vec, dtype=np.int8)
            if v.shape != (N_FEATURES,):
                raise ValidationError(f"{phone}: expected {N_FEATURES} features, got {v.shape}")
            if not np.isin(v, (-1, 0, 1)).all():
                raise ValidationError(f"{phone}: feature values must be in {{-1, 0, 1}}")
            v.setflags(write=False)
            clean[phone] = v
        self._rows = clean

    def __contains__(self, phone):
        return phone in self._rows

    def __getitem__(self, phone) -> np.ndarray:
        try:
            return self._rows[phone]
        except KeyError:
            raise InventoryError(f"no articulatory entry for phone {phone!r}") from None

    def __len__(self):
        return len(self._rows)

    @property
    def phones(self):
        return list(self._rows)

    def is_vowel(self, phone) -> bool:
        return self[phone][0] == 1

    @classmethod
    def from_csv(cls, path) -> "ArticTable":
        with open(path, encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if len(header) != N_FEATURES + 1:
                raise ValidationError(f"{path}: expected phone + {N_FEATURES} feature columns")
            return cls({r[0]: [int(x) for x in r[1:]] for r in reader if r})

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("phone",) + FEATURES)
            for phone, v in self._rows.items():
                w.writerow([phone, *v.tolist()])


@lru_cache(maxsize=1)
def default_table() -> ArticTable:
    with resources.as_file(resources.files("sblm") / "data" / "artic_table.csv") as p:
        return ArticTable.from_csv(Path(p))


def phone_features(phone: str, table: ArticTable | None = None) -> np.ndarray:
    return (table or default_table())[phone]


def binarize(v: np.ndarray) -> np.ndarray:
    return (np.asarray(v) == 1).astype(np.float32)


def pool_cluster(phones, table: ArticTable | None = None) -> np.ndarray:
    """Elementwise max over consonant vectors; the empty cluster pools to zeros."""
    table = table or default_table()
    out = np.zeros(N_FEATURES, dtype=np.int8)
    for i, p in enumerate(phones):
        v = table[p]
        if v[0] == 1:
            raise DomainError(f"vowel {p!r} inside a consonant cluster")
        out = v.copy() if i == 0 else np.maximum(out, v)
    return out


def phone_vector(phone: str, table: ArticTable | None = None) -> np.ndarray:
    """Binarized 22-dim vector used by phoneme-level models."""
    return binarize(phone_features(phone, table))


def syllable_vector(onset, nucleus: str, coda, table: ArticTable | None = None) -> np.ndarray:
    table = table or default_table()
    nuc = table[nucleus]
    if nuc[0] != 1:
        raise DomainError(f"nucleus {nucleus!r} is not a vowel")
    return np.concatenate([binarize(pool_cluster(onset, table)),
                           binarize(nuc),
                           binarize(pool_cluster(coda, table))])
