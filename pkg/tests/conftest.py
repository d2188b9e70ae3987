import numpy as np
import pytest

from sblm import corpus, synth


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 24-utterance synthetic corpus preprocessed into syllable units."""
    root = tmp_path_factory.mktemp("corpus")
    manifest, alignments = synth.synth_corpus(root / "raw", seed=7, n_utts=24)
    seqs, drops = corpus.preprocess(manifest, alignments, root / "cache")
    return {"root": root, "manifest": manifest, "alignments": alignments,
            "cache": root / "cache", "seqs": seqs, "drops": drops}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rpartition("::")[2]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.failed:
        detail = dict(report.user_properties).get("detail", "")
        prev = _CRITERIA.get(name)
        if prev is None or prev[0] == "PASS":
            _CRITERIA[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        status, detail = _CRITERIA[name]
        num = int(name.split("_")[2])
        title = " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {num:2d} {status}: {title}" + (f" ({detail})" if detail else ""))
