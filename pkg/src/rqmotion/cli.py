"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 validation, 3 numeric or internal failure.
Failures also print one JSON line ``{"error": ..., "code": ..., "message": ...}``
on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import IO, Sequence

import torch

from . import __version__
from .config import RunConfig, load_config
from .data import CorpusSpec, load_corpus, normalize, read_sequence, save_corpus, synthesize_corpus, write_sequence
from .errors import RqMotionError, ValidationError
from .quantizer import dump_codebooks, read_tokens, write_tokens

log = logging.getLogger("rqmotion")


class UsageError(Exception):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def _error_line(kind: str, code: int, message: str, err: IO[str]) -> None:
    err.write(json.dumps({"error": kind, "code": code, "message": message}) + "\n")


# --- helpers ------------------------------------------------------------------


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None))


def _print_seeds(cfg: RunConfig, err: IO[str]) -> None:
    err.write(f"seeds: corpus={cfg.corpus.seed} train.vq={cfg.train_vq.seed} "
              f"train.rqhc={cfg.train_rqhc.seed} sampler={cfg.sampler.seed}\n")


def _embed_client(cfg: RunConfig):
    from .text import HttpEmbeddingClient

    return HttpEmbeddingClient(cfg.tca.embed_url, timeout=cfg.tca.timeout) if cfg.tca.embed_url else None


def _load_models(args):
    from .training import load_rqhc, load_vq

    vq, stats, vq_cfg = load_vq(args.vq)
    model, cfg = load_rqhc(args.model, vq)
    return model, vq, stats, cfg


def _sampler(cfg: RunConfig, args):
    s = dataclasses.replace(cfg.sampler)
    for flag, key in (("seed", "seed"), ("max_len", "max_len"), ("window", "window"),
                      ("temperature", "temperature"), ("top_k", "top_k")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(s, key, value)
    if getattr(args, "ignore_eos", False):
        s.ignore_eos = True
    return s


# --- subcommands --------------------------------------------------------------


def cmd_corpus_make(args, out: IO[str], err: IO[str]) -> int:
    spec = CorpusSpec.from_file(args.spec) if args.spec else CorpusSpec.default()
    seed = args.seed if args.seed is not None else spec.seed
    err.write(f"seeds: corpus={seed}\n")
    ds = synthesize_corpus(spec, seed)
    save_corpus(ds, args.out)
    spec.seed = seed
    (Path(args.out) / "corpus.ini").write_text(spec.to_text(), encoding="utf-8")
    out.write(f"wrote {len(ds.train)} train / {len(ds.eval)} eval sequences to {args.out}\n")
    return 0


def cmd_train(args, out: IO[str], err: IO[str]) -> int:
    from .training import MetricsLog, RQHCTrainer, VQTrainer, load_vq

    cfg = _config(args)
    train = cfg.train_vq if args.stage == "vq" else cfg.train_rqhc
    if args.steps is not None:
        train.steps = args.steps
    if args.seed is not None:
        train.seed = args.seed
    if args.print_config:
        out.write(cfg.to_text())
        return 0
    _print_seeds(cfg, err)
    ds = load_corpus(args.data)
    metrics = MetricsLog(args.metrics) if args.metrics else MetricsLog()
    if args.stage == "vq":
        if args.resume:
            trainer = VQTrainer.resume(args.resume, ds, metrics)
        else:
            trainer = VQTrainer(cfg, ds, metrics)
    else:
        vq, stats, _ = load_vq(args.vq)
        ds.stats = stats
        if args.resume:
            trainer = RQHCTrainer.resume(args.resume, ds, vq, metrics, _embed_client(cfg))
        else:
            trainer = RQHCTrainer(cfg, ds, vq, metrics, embed_client=_embed_client(cfg))
    trainer.run(ckpt_path=args.out)
    trainer.save(args.out)
    last = metrics.rows[-1] if metrics.rows else {}
    summary = ", ".join(f"{k}={v:.4g}" for k, v in last.items() if isinstance(v, float))
    out.write(f"{args.stage} training finished at step {trainer.step}: {summary}\n")
    return 0


def cmd_encode(args, out: IO[str], err: IO[str]) -> int:
    from .training import load_vq

    vq, stats, _ = load_vq(args.vq)
    seq = read_sequence(args.input)
    grid = vq.tokenize(torch.from_numpy(normalize(seq, stats).frames))
    write_tokens(args.out, grid, vq.codebook_size)
    out.write(f"encoded {seq.length} frames into a {grid.shape[0]}x{grid.shape[1]} token grid\n")
    return 0


def cmd_decode(args, out: IO[str], err: IO[str]) -> int:
    from .session import finalize
    from .checkpoint import Checkpoint
    from .training import load_vq

    vq, stats, _ = load_vq(args.vq)
    grid, K = read_tokens(args.input)
    if K != vq.codebook_size:
        raise ValidationError(f"token file has K={K}, quantizer has K={vq.codebook_size}")
    fps = Checkpoint.load(args.vq).meta.get("fps", 20.0)
    seq = finalize(grid, vq, stats, fps)
    write_sequence(args.out, seq)
    out.write(f"decoded {seq.length} frames to {args.out}\n")
    return 0


def _build_schedule(args, cfg: RunConfig, err: IO[str]):
    from .text import HttpCompletionClient, PromptTemplates, schedule_from_tca, tca

    if not args.tca:
        return [(args.prompt, cfg.sampler.max_len if args.max_len is None else args.max_len)]
    client = HttpCompletionClient(cfg.tca.llm_url, timeout=cfg.tca.timeout) if cfg.tca.llm_url else None
    result = tca(args.prompt, PromptTemplates.load(), client)
    if result.warning:
        err.write(f"tca warning: {result.warning}\n")
    seg = args.segment_len or cfg.tca.segment_len
    schedule = schedule_from_tca(result, seg, cfg.tca.mode)
    err.write(f"tca: normalized={result.normalized!r} rewritten={result.rewritten!r}\n")
    for i, (text, length) in enumerate(schedule):
        err.write(f"segment {i}: {text!r} x {length}\n")
    return schedule


def cmd_generate(args, out: IO[str], err: IO[str]) -> int:
    from .session import load_schedule, replay, run_schedule
    from .checkpoint import Checkpoint

    if not args.prompt and not args.schedule:
        raise UsageError("generate needs --prompt or --schedule")
    model, vq, stats, cfg = _load_models(args)
    sampler = _sampler(cfg, args)
    if args.print_config:
        cfg.sampler = sampler
        out.write(cfg.to_text())
        return 0
    cfg.sampler = sampler
    _print_seeds(cfg, err)
    fps = Checkpoint.load(args.vq).meta.get("fps", 20.0)
    stream = out if args.stream else None
    common = dict(stats=stats, fps=fps, stream=stream, embed_client=_embed_client(cfg))
    if args.schedule:
        data = load_schedule(args.schedule)
        if "switch_log" in data:
            session = replay(data, model, vq, **common)
        else:
            segments = [(str(s["prompt"]), int(s["length"])) for s in data["segments"]]
            if args.max_len is None:
                sampler.max_len = max(sampler.max_len, sum(n for _, n in segments))
            session = run_schedule(segments, sampler, model, vq, **common)
    else:
        schedule = _build_schedule(args, cfg, err)
        if args.tca and args.max_len is None:
            sampler.max_len = max(sampler.max_len, sum(n for _, n in schedule))
        session = run_schedule(schedule, sampler, model, vq, **common)
    seq = session.finalize()
    write_sequence(args.out, seq)
    if args.tokens:
        write_tokens(args.tokens, session.tokens, vq.codebook_size)
    if args.transcript:
        session.save_transcript(args.transcript, cfg.hash())
    ending = "EOS" if session.ended_by_eos else "length limit"
    err.write(f"generated {session.position} frames ({ending}); switches at "
              f"{[p for p, _ in session.switch_log]}\n")
    return 0


REPL_HELP = """commands:
  :prompt <text>   start the stream, or switch prompt at the current position
  :steps N         generate N more frames
  :save FILE       decode the stream to FILE and write FILE.transcript.json
  :status          show position and prompt history
  :quit            leave
"""


def cmd_session(args, out: IO[str], err: IO[str], stdin: IO[str] | None = None) -> int:
    from .session import GenerationSession
    from .checkpoint import Checkpoint

    stdin = stdin or sys.stdin
    model, vq, stats, cfg = _load_models(args)
    sampler = _sampler(cfg, args)
    if args.max_len is None:
        sampler.max_len = 10 ** 9  # open-ended; bounded by the window, not by length
    cfg.sampler = sampler
    _print_seeds(cfg, err)
    fps = Checkpoint.load(args.vq).meta.get("fps", 20.0)
    session: GenerationSession | None = None
    out.write(REPL_HELP)
    for raw in stdin:
        line = raw.strip()
        if not line:
            continue
        cmd, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if cmd == ":quit":
                break
            if cmd == ":prompt":
                if session is None:
                    session = GenerationSession(model, vq, rest, sampler, stats=stats, fps=fps,
                                                embed_client=_embed_client(cfg))
                else:
                    session.switch_prompt(rest)
                out.write(f"prompt {session.prompt_index} at position {session.position}: {rest}\n")
            elif cmd == ":steps":
                if session is None:
                    raise ValidationError("set a prompt first with :prompt <text>")
                n = session.steps(int(rest))
                out.write(f"+{n} -> position {session.position}"
                          f"{' (terminated)' if session.terminated else ''}\n")
            elif cmd == ":save":
                if session is None or not rest:
                    raise ValidationError("usage: :save FILE (after generating)")
                write_sequence(rest, session.finalize())
                session.save_transcript(rest + ".transcript.json", cfg.hash())
                out.write(f"saved {session.position} frames to {rest}\n")
            elif cmd == ":status":
                if session is None:
                    out.write("no stream yet\n")
                else:
                    out.write(f"position {session.position}, switches {session.switch_log}\n")
            elif cmd in (":help", "help"):
                out.write(REPL_HELP)
            else:
                out.write(f"unknown command {cmd!r}; type :help\n")
        except (RqMotionError, ValueError) as exc:
            out.write(f"error: {exc}\n")
        out.flush()
    return 0


def cmd_eval(args, out: IO[str], err: IO[str]) -> int:
    from .metrics import codebook_stats, recon_report, token_eval, write_report

    model, vq, stats, cfg = _load_models(args)
    ds = load_corpus(args.data)
    split = ds.split(args.split)
    summary = write_report(args.report, recon_report(vq, split, stats), codebook_stats(vq, split, stats),
                           token_eval(model, vq, split, stats, _embed_client(cfg)))
    out.write(summary + "\n")
    return 0


def cmd_inspect_codebook(args, out: IO[str], err: IO[str]) -> int:
    from .metrics import codebook_stats
    from .training import load_vq

    vq, stats, _ = load_vq(args.vq)
    usage = None
    if args.data:
        ds = load_corpus(args.data)
        usage = torch.from_numpy(codebook_stats(vq, ds.split(args.split), stats).histograms)
    dump_codebooks(vq.quantizer, args.out, usage)
    out.write(f"wrote {vq.levels * vq.codebook_size} rows to {args.out}\n")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rqmotion", description="Residual-quantized text-to-motion toolkit.")
    p.add_argument("--version", action="version", version=f"rqmotion {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    corpus = sub.add_parser("corpus", help="synthetic corpus tools")
    csub = corpus.add_subparsers(dest="action", required=True, parser_class=_Parser)
    make = csub.add_parser("make", help="synthesize a corpus directory")
    make.add_argument("--spec", help="generator config (INI)")
    make.add_argument("--out", required=True)
    make.add_argument("--seed", type=int)
    make.set_defaults(func=cmd_corpus_make)

    train = sub.add_parser("train", help="train a stage")
    tsub = train.add_subparsers(dest="stage", required=True, parser_class=_Parser)
    for stage in ("vq", "rqhc"):
        t = tsub.add_parser(stage)
        t.add_argument("--config")
        t.add_argument("--data", required=True)
        if stage == "rqhc":
            t.add_argument("--vq", required=True, help="frozen quantizer checkpoint")
        t.add_argument("--out", required=True)
        t.add_argument("--steps", type=int)
        t.add_argument("--seed", type=int)
        t.add_argument("--metrics", help="append-only CSV metrics log")
        t.add_argument("--resume", help="checkpoint to continue from")
        t.add_argument("--print-config", action="store_true")
        t.set_defaults(func=cmd_train)

    enc = sub.add_parser("encode", help="motion file -> token grid")
    enc.add_argument("--vq", required=True)
    enc.add_argument("--in", dest="input", required=True)
    enc.add_argument("--out", required=True)
    enc.set_defaults(func=cmd_encode)

    dec = sub.add_parser("decode", help="token grid -> motion file")
    dec.add_argument("--vq", required=True)
    dec.add_argument("--in", dest="input", required=True)
    dec.add_argument("--out", required=True)
    dec.set_defaults(func=cmd_decode)

    def sampling(sp):
        sp.add_argument("--model", required=True)
        sp.add_argument("--vq", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--max-len", type=int)
        sp.add_argument("--window", type=int)
        sp.add_argument("--temperature", type=float)
        sp.add_argument("--top-k", type=int)
        sp.add_argument("--ignore-eos", action="store_true")

    gen = sub.add_parser("generate", help="scripted generation")
    sampling(gen)
    gen.add_argument("--prompt")
    gen.add_argument("--tca", action="store_true", help="decompose the prompt into scheduled steps")
    gen.add_argument("--segment-len", type=int)
    gen.add_argument("--schedule", help="transcript or segments JSON to replay")
    gen.add_argument("--out", required=True)
    gen.add_argument("--tokens", help="also write the token grid")
    gen.add_argument("--transcript", help="write a replayable transcript")
    gen.add_argument("--stream", action="store_true", help="NDJSON record per frame on stdout")
    gen.add_argument("--print-config", action="store_true")
    gen.set_defaults(func=cmd_generate)

    ses = sub.add_parser("session", help="interactive prompt-switching REPL")
    sampling(ses)
    ses.set_defaults(func=cmd_session)

    ev = sub.add_parser("eval", help="evaluator-free metrics report")
    ev.add_argument("--model", required=True)
    ev.add_argument("--vq", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="eval", choices=("train", "eval"))
    ev.add_argument("--report", required=True)
    ev.set_defaults(func=cmd_eval)

    ins = sub.add_parser("inspect", help="inspect artifacts")
    isub = ins.add_subparsers(dest="what", required=True, parser_class=_Parser)
    cb = isub.add_parser("codebook")
    cb.add_argument("--vq", required=True)
    cb.add_argument("--out", required=True)
    cb.add_argument("--data", help="count exact assignments on this corpus instead of EMA usage")
    cb.add_argument("--split", default="eval", choices=("train", "eval"))
    cb.set_defaults(func=cmd_inspect_codebook)
    return p


def main(argv: Sequence[str] | None = None, out: IO[str] | None = None, err: IO[str] | None = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=err,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, out, err)
    except UsageError as exc:
        err.write(f"{exc}\n")
        _error_line("usage", 1, str(exc), err)
        return 1
    except RqMotionError as exc:
        _error_line(type(exc).__name__, exc.exit_code, str(exc), err)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        _error_line("ValidationError", 2, str(exc), err)
        return 2
    except KeyboardInterrupt:
        _error_line("Interrupted", 3, "interrupted", err)
        return 3
    except Exception as exc:  # surface anything unexpected as an internal failure
        _error_line(type(exc).__name__, 3, str(exc), err)
        return 3


if __name__ == "__main__":
    sys.exit(main())
