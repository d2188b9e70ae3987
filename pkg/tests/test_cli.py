import csv
import json
import subprocess
import sys

import pytest

from sblm import cli, ndl

TINY = ["--set", "model.hidden=8", "--set", "probe.steps=50"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> preprocess -> tiny trained checkpoints shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run("synth-corpus", "--out", root / "corpus", "--n-utts", 16, "--seed", 7) == 0
    assert run("preprocess", "--corpus", root / "corpus") == 0
    cache = root / "corpus" / "cache_syllable"
    assert run("train-textlm", "--cache", cache, "--out", root / "tlm", "--dim", 12, "--epochs", 2) == 0
    for v in ("synthesis_only", "mtl_panphon", "aux_textlm"):
        extra = ["--textlm", root / "tlm" / "textlm.sblm"] if v == "aux_textlm" else []
        assert run("train", "--cache", cache, "--out", root / v, "--variant", v, "--steps", 3,
                   *TINY, *extra) == 0
    return root, cache


# ---------------------------------------------------------------- config

def test_config_precedence(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("train.lr=0.5\ntrain.batch=7  # comment\n")
    args = cli.build_parser().parse_args(["train", "--out", "x", "--config", str(f),
                                          "--set", "train.batch=9", "--lr", "0.25"])
    cfg = cli.effective_config(args, cli._overrides(args))
    assert cfg["train.lr"] == 0.25 and cfg["train.batch"] == 9
    assert cfg["model.lambda_mtl"] == 1.0 and cfg["corpus.n_ctx"] == 4


def test_unknown_key_exit_1(tmp_path, capsys):
    assert run("gradcheck", "--set", "train.learning_rate=1") == 1
    assert "train.learning_rate" in capsys.readouterr().err


def test_bad_value_exit_1(capsys):
    assert run("gradcheck", "--set", "train.batch=many") == 1
    assert "train.batch" in capsys.readouterr().err


def test_bad_flag_exit_1():
    assert run("gradcheck", "--variant", "nope") == 1


def test_missing_config_file_exit_3(tmp_path):
    assert run("gradcheck", "--config", tmp_path / "none.txt") == 3


def test_missing_cache_exit_3(tmp_path):
    assert run("train", "--cache", tmp_path / "nothing", "--out", tmp_path / "o") == 3


# ---------------------------------------------------------------- gradcheck

@pytest.mark.parametrize("variant", ["synthesis_only", "aux_textlm"])
def test_gradcheck_exit_zero(variant, capsys):
    assert run("gradcheck", "--variant", variant) == 0
    assert "max relative error" in capsys.readouterr().out


def test_gradcheck_failure_exit_2(monkeypatch):
    rep = ndl.GradCheckReport(0.5, 10, ("x", 0, 1.0, 2.0))
    monkeypatch.setattr(cli, "tiny_gradcheck", lambda *a, **k: rep)
    assert run("gradcheck") == 2


# ---------------------------------------------------------------- corpus commands

def test_synth_refuses_existing(workspace, capsys):
    root, _ = workspace
    assert run("synth-corpus", "--out", root / "corpus", "--n-utts", 2) == 1
    assert "--force" in capsys.readouterr().err


def test_synth_deterministic_and_manifest(tmp_path):
    for d in ("a", "b"):
        assert run("synth-corpus", "--out", tmp_path / d, "--n-utts", 3) == 0
    assert (tmp_path / "a/alignments.tsv").read_bytes() == (tmp_path / "b/alignments.tsv").read_bytes()
    assert len((tmp_path / "a/manifest.tsv").read_text().splitlines()) == 3
    assert run("synth-corpus", "--out", tmp_path / "a", "--n-utts", 3, "--force") == 0


def test_preprocess_reports_and_echo(workspace, capsys, tmp_path):
    root, cache = workspace
    assert run("preprocess", "--corpus", root / "corpus", "--out", tmp_path / "again") == 0
    out = capsys.readouterr().out
    for reason in ("too-long", "stopword", "silence"):
        assert f"dropped-{reason}:" in out
    assert (tmp_path / "again/index.tsv").read_bytes() == (cache / "index.tsv").read_bytes()
    assert "corpus.kind=syllable" in (cache / "run/config.txt").read_text()
    info = json.loads((cache / "run/run.json").read_text())
    assert len(info["input_sha256"]) == 64


def test_phoneme_cache_is_separate(workspace):
    root, cache = workspace
    assert run("preprocess", "--corpus", root / "corpus", "--kind", "phoneme") == 0
    ph = root / "corpus" / "cache_phoneme"
    assert ph != cache
    kinds = {r["kind"] for r in csv.DictReader(open(ph / "index.tsv"), delimiter="\t")}
    assert kinds == {"phoneme"}


# ---------------------------------------------------------------- training

def test_train_outputs(workspace):
    root, _ = workspace
    for v in ("synthesis_only", "mtl_panphon"):
        rows = list(csv.DictReader(open(root / v / "loss_curve.csv")))
        assert rows and (rows[-1]["val_bce"] != "") == (v == "mtl_panphon")
        assert (root / v / "model.sblm").exists()
        assert f"model.variant={v}" in (root / v / "config.txt").read_text()
    assert ndl.read_header(root / "mtl_panphon/model.sblm")["variant"] == "mtl_panphon"


def test_train_deterministic(workspace, tmp_path):
    root, cache = workspace
    assert run("train", "--cache", cache, "--out", tmp_path / "again", "--variant", "mtl_panphon",
               "--steps", 3, *TINY) == 0
    assert (tmp_path / "again/loss_curve.csv").read_bytes() == (root / "mtl_panphon/loss_curve.csv").read_bytes()


def test_aux_needs_textlm(workspace, tmp_path):
    _, cache = workspace
    assert run("train", "--cache", cache, "--out", tmp_path / "x", "--variant", "aux_textlm", "--steps", 1) == 1


def test_textlm_outputs(workspace):
    root, _ = workspace
    metrics = json.loads((root / "tlm/metrics.json").read_text())
    assert metrics["init"] == "cbow" and metrics["val_ppl"] >= 1.0
    assert ndl.read_header(root / "tlm/textlm.sblm")["meta"]["component"] == "textlm"


def test_textlm_from_token_file(tmp_path):
    (tmp_path / "t.txt").write_text("ba di ko\nba di\nko ba di ko\n" * 4)
    assert run("train-textlm", "--tokens", tmp_path / "t.txt", "--out", tmp_path / "o",
               "--dim", 8, "--epochs", 1, "--no-cbow") == 0
    assert json.loads((tmp_path / "o/metrics.json").read_text())["init"] == "random"


# ---------------------------------------------------------------- generation / evaluation

def test_babble_reproducible(workspace, tmp_path, capsys):
    root, cache = workspace
    for d in ("a", "b"):
        assert run("babble", "--checkpoint", root / "mtl_panphon/model.sblm", "--cache", cache,
                   "--out", tmp_path / d, "--n-units", 3, "--seed", 3) == 0
    assert (tmp_path / "a/babble.wav").read_bytes() == (tmp_path / "b/babble.wav").read_bytes()
    meta = json.loads((tmp_path / "a/babble.json").read_text())
    assert len(meta["unit_frames"]) == 3 and meta["seed"] == 3
    assert "reset-separated" in capsys.readouterr().out


def test_babble_aux_textlm(workspace, tmp_path):
    root, cache = workspace
    assert run("babble", "--checkpoint", root / "aux_textlm/model.sblm", "--cache", cache,
               "--textlm", root / "tlm/textlm.sblm", "--out", tmp_path / "o", "--n-units", 2) == 0
    assert all(json.loads((tmp_path / "o/babble.json").read_text())["unit_labels"])


def test_eval_report(workspace, tmp_path, capsys):
    root, cache = workspace
    ck = [f"{v}={root / v / 'model.sblm'}" for v in ("synthesis_only", "mtl_panphon", "aux_textlm")]
    ck.append(f"again={root / 'mtl_panphon/model.sblm'}")
    assert run("eval", *ck, "--cache", cache, "--textlm", root / "tlm/textlm.sblm",
               "--out", tmp_path, "--samples", 2, "--set", "eval.draws=2", *TINY) == 0
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert [r["variant"] for r in rows] == ["synthesis_only", "mtl_panphon", "aux_textlm", "again"]
    strip = lambda r: {k: v for k, v in r.items() if k != "variant"}
    assert strip(rows[1]) == strip(rows[3])
    assert rows[2]["textlm_ppl"] != "" and rows[0]["textlm_ppl"] == ""
    corr = list(csv.DictReader(open(tmp_path / "correlations.csv")))
    assert len(corr) == 3


def test_probe_command(workspace, tmp_path):
    root, cache = workspace
    assert run("probe", "--cache", cache, "--out", tmp_path,
               "--checkpoint", root / "synthesis_only/model.sblm", *TINY) == 0
    summary = list(csv.DictReader(open(tmp_path / "probe_summary.csv")))
    assert [r["source"] for r in summary] == ["panphon", "untrained", "synthesis_only"]
    assert (tmp_path / "confusion_panphon.csv").read_text().startswith("true\\pred,")


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "sblm.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout
