import io
import json
import sys

import numpy as np
import pytest

from conftest import TINY_INI
from rqmotion.cli import main
from rqmotion.data import read_sequence
from rqmotion.quantizer import read_tokens


def cli(*argv, stdin=None, monkeypatch=None):
    out, err = io.StringIO(), io.StringIO()
    if stdin is not None:
        monkeypatch.setattr(sys, "stdin", io.StringIO(stdin))
    code = main([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.ini").write_text(TINY_INI)
    assert cli("corpus", "make", "--spec", d / "run.ini", "--out", d / "corpus", "--seed", 5)[0] == 0
    code, out, err = cli("train", "vq", "--config", d / "run.ini", "--data", d / "corpus", "--out", d / "vq.ckpt",
                         "--metrics", d / "vq.csv")
    assert code == 0, err
    code, out, err = cli("train", "rqhc", "--config", d / "run.ini", "--data", d / "corpus", "--vq", d / "vq.ckpt",
                         "--out", d / "t.ckpt", "--steps", 30)
    assert code == 0, err
    return d


def gen(d, out_name, *extra):
    return cli("generate", "--model", d / "t.ckpt", "--vq", d / "vq.ckpt", "--out", d / out_name, *extra)


def test_corpus_layout(workdir):
    assert len(list((workdir / "corpus" / "train").iterdir())) == 12
    assert len(list((workdir / "corpus" / "eval").iterdir())) == 4
    assert "seed = 5" in (workdir / "corpus" / "corpus.ini").read_text()


def test_train_outputs(workdir):
    lines = (workdir / "vq.csv").read_text().splitlines()
    assert lines[0].startswith("phase,step,lr") and len(lines) == 1 + 4


def test_encode_decode(workdir):
    seq_path = next((workdir / "corpus" / "eval").iterdir())
    assert cli("encode", "--vq", workdir / "vq.ckpt", "--in", seq_path, "--out", workdir / "a.tok")[0] == 0
    grid, K = read_tokens(workdir / "a.tok")
    seq = read_sequence(seq_path)
    assert K == 16 and grid.shape == (3, seq.length)
    assert cli("decode", "--vq", workdir / "vq.ckpt", "--in", workdir / "a.tok", "--out", workdir / "a.mot")[0] == 0
    back = read_sequence(workdir / "a.mot")
    assert back.frames.shape == seq.frames.shape and back.fps == seq.fps


def test_generate_deterministic(workdir):
    for name in ("g1.mot", "g2.mot"):
        code, _, err = gen(workdir, name, "--prompt", "a person waves", "--seed", 9, "--ignore-eos", "--max-len", 20)
        assert code == 0, err
        assert "seeds:" in err
    a, b = read_sequence(workdir / "g1.mot"), read_sequence(workdir / "g2.mot")
    assert a.length == 20 and np.array_equal(a.frames, b.frames)


def test_generate_stream(workdir):
    code, out, _ = gen(workdir, "s.mot", "--prompt", "jump", "--ignore-eos", "--max-len", 5, "--stream")
    recs = [json.loads(line) for line in out.splitlines()]
    assert code == 0 and [r["position"] for r in recs] == list(range(5))
    assert all(len(r["tokens"]) == 3 and r["prompt_index"] == 0 for r in recs)


def test_tca_logs_segments(workdir):
    code, _, err = gen(workdir, "tca.mot", "--prompt", "spin, pause, raise arms", "--tca", "--segment-len", 4,
                       "--ignore-eos", "--transcript", workdir / "tca.json")
    assert code == 0, err
    segs = [line for line in err.splitlines() if line.startswith("segment ")]
    assert segs == ["segment 0: 'spin' x 4", "segment 1: 'pause' x 4", "segment 2: 'raise arms' x 4"]
    log = json.loads((workdir / "tca.json").read_text())["switch_log"]
    assert [p for p, _ in log] == [0, 4, 8]


def test_session_replays_via_schedule(workdir, monkeypatch):
    script = ":prompt walk forward\n:steps 6\n:prompt jump\n:steps 5\n:prompt wave\n:steps 4\n:status\n" \
             f":save {workdir / 'live.mot'}\n:quit\n"
    code, out, err = cli("session", "--model", workdir / "t.ckpt", "--vq", workdir / "vq.ckpt", "--seed", 2,
                         "--ignore-eos", stdin=script, monkeypatch=monkeypatch)
    assert code == 0, err
    assert "saved 15 frames" in out
    transcript = workdir / "live.mot.transcript.json"
    assert [p for p, _ in json.loads(transcript.read_text())["switch_log"]] == [0, 6, 11]
    code, _, err = gen(workdir, "replayed.mot", "--schedule", transcript, "--tokens", workdir / "r.tok")
    assert code == 0, err
    assert np.array_equal(read_sequence(workdir / "live.mot").frames, read_sequence(workdir / "replayed.mot").frames)


def test_session_errors_stay_in_repl(workdir, monkeypatch):
    code, out, _ = cli("session", "--model", workdir / "t.ckpt", "--vq", workdir / "vq.ckpt",
                       stdin=":steps 3\n:bogus\n:quit\n", monkeypatch=monkeypatch)
    assert code == 0 and "set a prompt first" in out and "unknown command" in out


def test_segments_schedule(workdir):
    (workdir / "plan.json").write_text(json.dumps({"segments": [{"prompt": "walk", "length": 3},
                                                                {"prompt": "squat", "length": 2}]}))
    code, _, err = gen(workdir, "plan.mot", "--schedule", workdir / "plan.json", "--ignore-eos")
    assert code == 0 and "switches at [0, 3]" in err


def test_eval_and_inspect(workdir):
    code, out, _ = cli("eval", "--model", workdir / "t.ckpt", "--vq", workdir / "vq.ckpt", "--data",
                       workdir / "corpus", "--report", workdir / "rep.csv")
    assert code == 0 and "NOT implemented" in out and "token_ce" in out
    code, _, _ = cli("inspect", "codebook", "--vq", workdir / "vq.ckpt", "--data", workdir / "corpus",
                     "--out", workdir / "cb.csv")
    rows = (workdir / "cb.csv").read_text().splitlines()
    assert code == 0 and len(rows) == 1 + 3 * 16


def test_resume_continues(workdir):
    code, out, _ = cli("train", "vq", "--data", workdir / "corpus", "--out", workdir / "vq2.ckpt",
                       "--resume", workdir / "vq.ckpt")
    assert code == 0 and "step 40" in out


def test_print_config(workdir):
    code, out, _ = cli("train", "vq", "--config", workdir / "run.ini", "--data", "x", "--out", "y", "--print-config")
    assert code == 0 and "codebook_size = 16" in out
    code, out, _ = gen(workdir, "n.mot", "--prompt", "x", "--temperature", 0.5, "--print-config")
    assert code == 0 and "temperature = 0.5" in out


def test_exit_codes(workdir, tmp_path):
    code, _, err = cli("train")
    assert code == 1 and json.loads(err.splitlines()[-1])["code"] == 1
    code, _, err = cli("generate", "--model", workdir / "t.ckpt", "--vq", workdir / "vq.ckpt", "--out", "x")
    assert code == 1
    code, _, err = cli("decode", "--vq", tmp_path / "missing.ckpt", "--in", "a", "--out", "b")
    assert code == 2 and json.loads(err.splitlines()[-1])["code"] == 2
    (tmp_path / "bad.ini").write_text("[vq]\nlevels = lots\n")
    code, _, err = cli("train", "vq", "--config", tmp_path / "bad.ini", "--data", workdir / "corpus", "--out", "z")
    assert code == 2 and json.loads(err.splitlines()[-1])["error"] == "ConfigError"
    code, _, _ = gen(workdir, "t.mot", "--prompt", "x", "--top-k", 99)
    assert code == 2
