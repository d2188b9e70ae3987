"""Freeze the ARPAbet articulatory table from Panphon's ipa_all.csv.

Usage: python tools/build_artic_table.py path/to/panphon/data/ipa_all.csv

Writes src/sblm/data/artic_table.csv. Run once; the output is checked in.
"""
import csv
import sys
from pathlib import Path

FEATURES = ["syl", "son", "cons", "cont", "delrel", "lat", "nas", "strid",
            "voi", "sg", "cg", "ant", "cor", "distr", "lab", "hi", "lo",
            "back", "round", "velaric", "tense", "long"]

# Diphthongs map to their first element; long is forced to +1 below.
ARPABET_IPA = {
    "aa": "ɑ", "ae": "æ", "ah": "ʌ", "ao": "ɔ", "aw": "æ", "ay": "a",
    "eh": "ɛ", "er": "ɹ̩", "ey": "e", "ih": "ɪ", "iy": "i", "ow": "o",
    "oy": "ɔ", "uh": "ʊ", "uw": "u", "ax": "ə",
    "b": "b", "ch": "t͡ʃ", "d": "d", "dh": "ð", "f": "f", "g": "ɡ",
    "hh": "h", "jh": "d͡ʒ", "k": "k", "l": "l", "m": "m", "n": "n",
    "ng": "ŋ", "p": "p", "r": "ɹ", "s": "s", "sh": "ʃ", "t": "t",
    "th": "θ", "v": "v", "w": "w", "y": "j", "z": "z", "zh": "ʒ",
}
DIPHTHONGS = {"aw", "ay", "ey", "ow", "oy"}
VALUE = {"+": 1, "-": -1, "0": 0}


def main(src, dst):
    rows = {}
    with open(src, encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(rec["ipa"], rec)
    with open(dst, "w", encoding="utf-8", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["phone"] + FEATURES)
        for phone, ipa in ARPABET_IPA.items():
            vec = [VALUE[rows[ipa][f]] for f in FEATURES]
            if phone in DIPHTHONGS:
                vec[FEATURES.index("long")] = 1
            out.writerow([phone] + vec)


if __name__ == "__main__":
    root = Path(__file__).resolve().parents[1]
    main(sys.argv[1], root / "src" / "sblm" / "data" / "artic_table.csv")
