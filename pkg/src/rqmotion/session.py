"""Streaming generation with mid-stream prompt switching.

A session owns a decode cache, a seeded sampler and the emitted token prefix.
Switching prompts re-encodes only the pinned condition slot; every emitted
column and every cached key/value stays as it was.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import IO, Sequence

import numpy as np
import torch

from .config import SamplerConfig
from .data import MotionSequence, NormStats, denormalize
from .errors import ConfigError, StateError, ValidationError
from .quantizer import MotionVQ
from .text import EmbeddingClient, embed_prompt
from .transformer import RqhcModel

TRANSCRIPT_VERSION = 1


def sample_logits(logits: torch.Tensor, sampler: SamplerConfig, generator: torch.Generator,
                  banned: Sequence[int] = ()) -> torch.Tensor:
    """Temperature plus top-k sampling over (B, V) logits; temperature 0 is argmax."""
    logits = logits.detach().to(torch.float64).clone()
    if banned:
        logits[:, list(banned)] = float("-inf")
    if sampler.temperature == 0.0 or sampler.top_k == 1:
        return logits.argmax(dim=-1)
    k = min(sampler.top_k, logits.shape[-1])
    top, idx = logits.topk(k, dim=-1)
    probs = torch.softmax(top / sampler.temperature, dim=-1)
    pick = torch.multinomial(probs, 1, generator=generator)
    return idx.gather(-1, pick).squeeze(-1)


class GenerationSession:
    """Single-stream generation state.

    ``switch_log`` holds (position, prompt) pairs, position being the first
    column generated under that prompt. The opening prompt is entry 0.
    """

    def __init__(self, model: RqhcModel, quantizer: MotionVQ, prompt: str,
                 sampler: SamplerConfig | None = None, stats: NormStats | None = None,
                 embed_client: EmbeddingClient | None = None, fps: float = 20.0,
                 stream: IO[str] | None = None):
        sampler = sampler or SamplerConfig()
        sampler.validate(model.num_classes)
        if model.levels != quantizer.levels or model.config.codebook_size != quantizer.codebook_size:
            raise ConfigError(
                f"model has {model.levels} levels / K={model.config.codebook_size}, quantizer has "
                f"{quantizer.levels} / K={quantizer.codebook_size}"
            )
        self.model = model.eval()
        self.quantizer = quantizer.eval()
        self.sampler = sampler
        self.stats = stats
        self.fps = fps
        self.embed_client = embed_client
        self.stream = stream
        self.generator = torch.Generator().manual_seed(sampler.seed)
        self.switch_log: list[tuple[int, str]] = [(0, prompt)]
        self.cache = model.new_cache(self._embed(prompt), sampler.window)
        self.columns: list[torch.Tensor] = []
        self.terminated = False
        self.ended_by_eos = False

    @classmethod
    def start(cls, prompt: str, sampler: SamplerConfig, model: RqhcModel, quantizer: MotionVQ,
              **kwargs) -> "GenerationSession":
        return cls(model, quantizer, prompt, sampler, **kwargs)

    def _embed(self, text: str) -> torch.Tensor:
        vec = embed_prompt(text, self.model.config.d_model, self.embed_client).vector
        return torch.from_numpy(np.ascontiguousarray(vec))

    @property
    def position(self) -> int:
        """Number of emitted columns."""
        return len(self.columns)

    @property
    def prompt_index(self) -> int:
        return len(self.switch_log) - 1

    @property
    def tokens(self) -> torch.Tensor:
        """Emitted (levels, n) grid; EOS never appears in it."""
        if not self.columns:
            return torch.zeros(self.model.levels, 0, dtype=torch.long)
        return torch.stack(self.columns, dim=1)

    def _choose(self, level: int, logits: torch.Tensor, column: list[int]) -> torch.Tensor:
        eos = self.model.eos
        if level > 0 and column and column[0] == eos:
            return torch.tensor([eos])
        banned = [eos] if (level > 0 or self.sampler.ignore_eos) else []
        tok = sample_logits(logits, self.sampler, self.generator, banned)
        column.append(int(tok))
        return tok

    def step(self) -> torch.Tensor | None:
        """Emit the next column; returns None when level 0 produced EOS."""
        if self.terminated:
            raise StateError("session has terminated")
        column: list[int] = []
        out = self.model.forward_step(self.cache, lambda l, lg: self._choose(l, lg, column))[0]
        if int(out[0]) == self.model.eos:
            self.terminated = self.ended_by_eos = True
            return None
        self.columns.append(out)
        if self.stream is not None:
            rec = {"position": self.position - 1, "tokens": [int(t) for t in out],
                   "prompt_index": self.prompt_index}
            self.stream.write(json.dumps(rec) + "\n")
            self.stream.flush()
        if self.position >= self.sampler.max_len:
            self.terminated = True
        return out

    def steps(self, n: int) -> int:
        """Advance up to n columns; returns how many were emitted."""
        done = 0
        while done < n and not self.terminated:
            if self.step() is None:
                break
            done += 1
        return done

    def switch_prompt(self, prompt: str) -> None:
        if self.terminated:
            raise StateError("session has terminated")
        if not prompt or not prompt.strip():
            raise ValidationError("prompt text is empty")
        if self.switch_log[-1][0] == self.position:
            # nothing was generated under the previous prompt; it is superseded
            self.switch_log[-1] = (self.position, prompt)
        else:
            self.switch_log.append((self.position, prompt))
        if self.sampler.refresh_condition:
            self.model.set_condition(self.cache, self._embed(prompt))

    def finalize(self) -> MotionSequence:
        return finalize(self.tokens, self.quantizer, self.stats, self.fps)

    def transcript(self, config_hash: str = "") -> dict:
        return {
            "version": TRANSCRIPT_VERSION,
            "switch_log": [[pos, text] for pos, text in self.switch_log],
            "length": self.position,
            "sampler": dataclasses.asdict(self.sampler),
            "config_hash": config_hash,
        }

    def save_transcript(self, path: str | Path, config_hash: str = "") -> None:
        Path(path).write_text(json.dumps(self.transcript(config_hash), indent=2) + "\n")


def run_schedule(prompts: Sequence[tuple[str, int]], sampler: SamplerConfig, model: RqhcModel,
                 quantizer: MotionVQ, **kwargs) -> GenerationSession:
    """Generate one segment per (prompt, length) entry, switching at boundaries."""
    if not prompts:
        raise ValidationError("schedule is empty")
    for text, length in prompts:
        if length < 1:
            raise ValidationError(f"segment {text!r} has length {length} < 1")
    session = GenerationSession(model, quantizer, prompts[0][0], sampler, **kwargs)
    for i, (text, length) in enumerate(prompts):
        if session.terminated:
            break
        if i > 0:
            session.switch_prompt(text)
        session.steps(length)
    return session


def replay(transcript: dict, model: RqhcModel, quantizer: MotionVQ, **kwargs) -> GenerationSession:
    """Re-run a recorded session; the token stream is reproduced exactly."""
    if transcript.get("version") != TRANSCRIPT_VERSION:
        raise ValidationError(f"unsupported transcript version {transcript.get('version')!r}")
    sampler = SamplerConfig(**transcript["sampler"])
    log = [(int(p), str(t)) for p, t in transcript["switch_log"]]
    if not log or log[0][0] != 0:
        raise ValidationError("switch log must start at position 0")
    if any(b[0] <= a[0] for a, b in zip(log, log[1:])):
        raise ValidationError("switch log positions must be strictly increasing")
    session = GenerationSession(model, quantizer, log[0][1], sampler, **kwargs)
    for pos, text in log[1:]:
        session.steps(pos - session.position)
        if session.terminated:
            break
        session.switch_prompt(text)
    if not session.terminated:
        session.steps(int(transcript["length"]) - session.position)
    return session


def load_schedule(path: str | Path) -> dict:
    """Read a transcript, or a plain schedule ``{"segments": [{"prompt", "length"}]}``."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read schedule {path}: {exc}") from exc
    if not isinstance(data, dict) or not ("switch_log" in data or "segments" in data):
        raise ValidationError(f"{path}: expected a transcript or a segments list")
    return data


def finalize(grid: torch.Tensor, quantizer: MotionVQ, stats: NormStats | None = None,
             fps: float = 20.0, eos: int | None = None) -> MotionSequence:
    """Decode a (levels, n) grid to motion, cutting at the first EOS column."""
    grid = torch.as_tensor(grid).long()
    if grid.dim() != 2:
        raise ValidationError("grid must be (levels, n)")
    eos = quantizer.codebook_size if eos is None else eos
    hits = (grid[0] == eos).nonzero()
    if len(hits):
        grid = grid[:, : int(hits[0])]
    if grid.shape[1] == 0:
        raise ValidationError("cannot finalize an empty token grid")
    with torch.no_grad():
        motion = quantizer.eval().decode_tokens(grid).numpy().astype(np.float32)
    seq = MotionSequence(motion, fps=fps)
    return denormalize(seq, stats) if stats is not None else seq

