"""Level-aligned hierarchical causal transformer over residual token grids.

One causal sub-stack per quantization level. Sequence position 0 carries the
condition (prompt embedding plus a per-level embedding); position ``c + 1``
predicts grid column ``c``. Level 0 sees its own tokens shifted by one column.
Level ``l > 0`` additionally sees the coarser tokens of the *same* column and
the final hidden states of level ``l - 1``, so all levels can be trained in one
pass and sampled coarse to fine within a column.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
from torch import nn

from .config import TransformerConfig
from .errors import ContractError, TokenIndexError, ValidationError
from .numerics import softmax_cross_entropy


def rel_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    rel_table: torch.Tensor,
    u: torch.Tensor,
    v_bias: torch.Tensor,
    q_pos: torch.Tensor,
    k_pos: torch.Tensor,
    allowed: torch.Tensor | None = None,
    dropout: nn.Module | None = None,
) -> torch.Tensor:
    """Attention with content, relative-position and global-bias terms.

    q: (B, H, Tq, dh); k, v: (B, H, Tk, dh); rel_table: (R+1, H, dh) indexed by
    the clipped offset q_pos - k_pos; u, v_bias: (H, dh). Keys ahead of the
    query (negative offset) are masked, as are keys where ``allowed`` is False.
    """
    dh = q.shape[-1]
    R = rel_table.shape[0] - 1
    diff = q_pos[:, None] - k_pos[None, :]
    keep = diff >= 0
    if allowed is not None:
        keep = keep & allowed
    offsets = diff.clamp(0, R)
    span = int(offsets.max()) + 1
    table = rel_table[:span].permute(1, 2, 0)  # (H, dh, span)
    content = (q + u[:, None, :]) @ k.transpose(-1, -2)
    by_offset = (q + v_bias[:, None, :]) @ table  # (B, H, Tq, span)
    idx = offsets.expand(*by_offset.shape[:-2], *offsets.shape)
    position = by_offset.gather(-1, idx)
    scores = (content + position) / math.sqrt(dh)
    scores = scores.masked_fill(~keep, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    if dropout is not None:
        weights = dropout(weights)
    return weights @ v


class RelSelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, max_relative: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        inner = heads * self.d_head
        self.qkv = nn.Linear(d_model, 3 * inner)
        self.out = nn.Linear(inner, d_model)
        self.rel = nn.Parameter(torch.randn(max_relative + 1, heads, self.d_head) * 0.02)
        self.u = nn.Parameter(torch.zeros(heads, self.d_head))
        self.v = nn.Parameter(torch.zeros(heads, self.d_head))
        self.drop = nn.Dropout(dropout)

    def project(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        B, T, _ = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, self.d_head).permute(2, 0, 3, 1, 4)
        return q, k, v

    def attend(self, q, k, v, q_pos, k_pos, allowed=None) -> torch.Tensor:
        h = rel_attention(q, k, v, self.rel, self.u, self.v, q_pos, k_pos, allowed, self.drop)
        B, H, T, dh = h.shape
        return self.out(h.transpose(1, 2).reshape(B, T, H * dh))


class Block(nn.Module):
    """Pre-norm attention and feed-forward sublayers with residual connections."""

    def __init__(self, d_model: int, heads: int, ff_mult: int, max_relative: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = RelSelfAttention(d_model, heads, max_relative, dropout)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_mult * d_model), nn.GELU(),
                                nn.Linear(ff_mult * d_model, d_model))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pos, allowed=None):
        q, k, v = self.attn.project(self.ln1(x))
        x = x + self.drop(self.attn.attend(q, k, v, pos, pos, allowed))
        return x + self.drop(self.ff(self.ln2(x)))

    def step(self, x, pos, kv: "_KV", key_pos: torch.Tensor):
        """Attend from one new position over the cached keys plus its own."""
        q, k, v = self.attn.project(self.ln1(x))
        keys, vals = kv.with_new(k, v)
        x = x + self.drop(self.attn.attend(q, keys, vals, pos, key_pos))
        return x + self.drop(self.ff(self.ln2(x)))


class LevelStack(nn.Module):
    def __init__(self, cfg: TransformerConfig, level: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            Block(cfg.d_model, cfg.heads[level], cfg.ff_mult, cfg.max_relative, cfg.dropout)
            for _ in range(cfg.layers[level])
        )
        self.ln = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.codebook_size + 1)


# --- decoding cache -------------------------------------------------------------


@dataclass
class _KV:
    """Keys/values of one layer: a pinned condition slot plus a sliding window."""

    cond: tuple[torch.Tensor, torch.Tensor] | None = None
    win_k: torch.Tensor | None = None
    win_v: torch.Tensor | None = None
    pending: tuple[torch.Tensor, torch.Tensor] | None = None

    def with_new(self, k: torch.Tensor, v: torch.Tensor):
        self.pending = (k, v)
        parts_k = [t for t in (self.cond[0] if self.cond else None, self.win_k, k) if t is not None]
        parts_v = [t for t in (self.cond[1] if self.cond else None, self.win_v, v) if t is not None]
        return torch.cat(parts_k, dim=2), torch.cat(parts_v, dim=2)

    def commit(self, window: int) -> None:
        k, v = self.pending
        self.pending = None
        self.win_k = k if self.win_k is None else torch.cat([self.win_k, k], dim=2)
        self.win_v = v if self.win_v is None else torch.cat([self.win_v, v], dim=2)
        if self.win_k.shape[2] > window:
            self.win_k = self.win_k[:, :, -window:]
            self.win_v = self.win_v[:, :, -window:]


@dataclass
class DecodeCache:
    """Incremental decoding state for one or more parallel streams.

    ``positions`` holds the absolute positions of the windowed entries; the
    condition slot (position 0) is pinned and does not count toward ``window``.
    """

    prompt: torch.Tensor  # (B, d_model)
    window: int
    layers: list[list[_KV]]
    positions: list[int] = field(default_factory=list)
    next_position: int = 1
    prev_tokens: torch.Tensor | None = None  # (B, levels) last emitted column
    last_logits: torch.Tensor | None = None  # (B, levels, K+1) from the latest step

    @property
    def length(self) -> int:
        """Windowed entries currently cached (excludes the condition slot)."""
        return len(self.positions)

    def nbytes(self) -> int:
        total = 0
        for level in self.layers:
            for kv in level:
                for t in (*(kv.cond or ()), kv.win_k, kv.win_v):
                    if t is not None:
                        total += t.numel() * t.element_size()
        return total


Chooser = Callable[[int, torch.Tensor], torch.Tensor]


class RqhcModel(nn.Module):
    def __init__(self, config: TransformerConfig):
        super().__init__()
        config.validate()
        self.config = config
        K, d = config.codebook_size, config.d_model
        self.eos = K
        self.bos = K + 1
        self.tok_emb = nn.ModuleList(nn.Embedding(K + 2, d) for _ in range(config.levels))
        for emb in self.tok_emb:
            nn.init.normal_(emb.weight, std=0.02)
        self.q_emb = nn.Parameter(torch.randn(config.levels, d) * 0.02)
        self.stacks = nn.ModuleList(LevelStack(config, l) for l in range(config.levels))

    @property
    def levels(self) -> int:
        return self.config.levels

    @property
    def num_classes(self) -> int:
        return self.config.codebook_size + 1

    # --- input construction ---------------------------------------------------

    def _check_grid(self, grid: torch.Tensor) -> torch.Tensor:
        if grid.dim() == 2:
            grid = grid.unsqueeze(0)
        if grid.dim() != 3 or grid.shape[1] != self.levels:
            raise ContractError(f"token grid must be (B, {self.levels}, n), got {tuple(grid.shape)}")
        if grid.numel() and (int(grid.min()) < 0 or int(grid.max()) > self.eos):
            raise TokenIndexError(f"grid tokens must lie in [0, {self.eos}] (EOS = {self.eos})")
        return grid.long()

    def _prompt(self, prompt: torch.Tensor, batch: int) -> torch.Tensor:
        p = torch.as_tensor(prompt, dtype=self.q_emb.dtype)
        if p.dim() == 1:
            p = p.unsqueeze(0)
        if p.shape[-1] != self.config.d_model:
            raise ValidationError(f"prompt has dim {p.shape[-1]}, model expects {self.config.d_model}")
        return p.expand(batch, -1) if p.shape[0] == 1 else p

    def build_level_input(self, grid: torch.Tensor, level: int, prompt: torch.Tensor,
                          lower_hidden: torch.Tensor | None = None) -> torch.Tensor:
        """(B, levels, n) grid -> (B, n + 1, d_model) input sequence for one level."""
        grid = self._check_grid(grid)
        B, _, n = grid.shape
        cond = (self._prompt(prompt, B) + self.q_emb[level]).unsqueeze(1)
        bos = torch.full((B, 1), self.bos, dtype=torch.long)
        shifted = torch.cat([bos, grid[:, level, : max(n - 1, 0)]], dim=1)[:, :n]
        x = self.tok_emb[level](shifted)
        if level > 0:
            if lower_hidden is None:
                raise ContractError(f"level {level} needs the hidden states of level {level - 1}")
            for j in range(level):
                x = x + self.tok_emb[j](grid[:, j])
            x = x + lower_hidden[:, 1:]
        return torch.cat([cond, x], dim=1)

    # --- teacher-forced pass ----------------------------------------------------

    def forward_train(self, grid: torch.Tensor, prompt: torch.Tensor,
                      window: int | None = None) -> torch.Tensor:
        """Logits (B, levels, n, K+1) for every column of a complete grid.

        ``window`` limits each query to itself, the condition slot and the
        ``window`` positions before it, which is what a decode cache holding
        ``window`` entries sees.
        """
        grid = self._check_grid(grid)
        n = grid.shape[2]
        pos = torch.arange(n + 1)
        allowed = None
        if window is not None:
            diff = pos[:, None] - pos[None, :]
            allowed = (diff <= window) | (pos[None, :] == 0)
        hidden = None
        logits = []
        for level, stack in enumerate(self.stacks):
            x = self.build_level_input(grid, level, prompt, hidden)
            for block in stack.blocks:
                x = block(x, pos, allowed)
            hidden = stack.ln(x)
            logits.append(stack.head(hidden[:, 1:]))
        return torch.stack(logits, dim=1)

    # --- incremental decoding ---------------------------------------------------

    def new_cache(self, prompt: torch.Tensor, window: int, batch: int = 1) -> DecodeCache:
        if window < 1:
            raise ValidationError("window must be >= 1")
        p = self._prompt(prompt, batch)
        cache = DecodeCache(p, window, [[_KV() for _ in s.blocks] for s in self.stacks])
        self._encode_condition(cache)
        return cache

    @torch.no_grad()
    def _encode_condition(self, cache: DecodeCache) -> None:
        # position 0 only attends to itself, so it can be recomputed in isolation
        pos = torch.tensor([0])
        for level, stack in enumerate(self.stacks):
            x = (cache.prompt + self.q_emb[level]).unsqueeze(1)
            for block, kv in zip(stack.blocks, cache.layers[level]):
                scratch = _KV()
                x = block.step(x, pos, scratch, pos)
                kv.cond = scratch.pending

    def set_condition(self, cache: DecodeCache, prompt: torch.Tensor) -> None:
        """Replace the pinned condition slot; windowed entries are kept."""
        cache.prompt = self._prompt(prompt, cache.prompt.shape[0])
        self._encode_condition(cache)

    @torch.no_grad()
    def forward_step(self, cache: DecodeCache, choose: Chooser, position: int | None = None) -> torch.Tensor:
        """Decode one grid column.

        For each level in order, computes logits (B, K+1) for the next column
        and calls ``choose(level, logits)`` for the (B,) tokens to commit before
        moving to the finer level. Returns the chosen column (B, levels); the
        per-level logits are kept in ``cache.last_logits``.
        """
        if position is not None and position != cache.next_position:
            raise ContractError(f"cache is at position {cache.next_position}, step requested {position}")
        B = cache.prompt.shape[0]
        s = cache.next_position
        pos = torch.tensor([s])
        key_pos = torch.tensor([0, *cache.positions, s])
        prev = cache.prev_tokens
        if prev is None:
            prev = torch.full((B, self.levels), self.bos, dtype=torch.long)
        chosen = torch.empty(B, self.levels, dtype=torch.long)
        hidden = None
        all_logits = []
        for level, stack in enumerate(self.stacks):
            x = self.tok_emb[level](prev[:, level]).unsqueeze(1)
            if level > 0:
                for j in range(level):
                    x = x + self.tok_emb[j](chosen[:, j]).unsqueeze(1)
                x = x + hidden
            for block, kv in zip(stack.blocks, cache.layers[level]):
                x = block.step(x, pos, kv, key_pos)
            hidden = stack.ln(x)
            logits = stack.head(hidden)[:, 0]
            all_logits.append(logits)
            tok = torch.as_tensor(choose(level, logits), dtype=torch.long).reshape(B)
            if int(tok.min()) < 0 or int(tok.max()) > self.eos:
                raise TokenIndexError(f"chosen token outside [0, {self.eos}]")
            chosen[:, level] = tok
        for level in cache.layers:
            for kv in level:
                kv.commit(cache.window)
        cache.positions.append(s)
        del cache.positions[: max(0, len(cache.positions) - cache.window)]
        cache.prev_tokens = chosen
        cache.next_position = s + 1
        cache.last_logits = torch.stack(all_logits, dim=1)
        return chosen


def ce_loss(logits: torch.Tensor, grid: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean token cross-entropy over levels and unmasked columns.

    logits: (B, levels, n, V); grid: (B, levels, n) targets; mask: (B, n).
    """
    if grid.dim() == 2:
        grid = grid.unsqueeze(0)
    if logits.shape[:3] != grid.shape:
        raise ContractError(f"logits {tuple(logits.shape)} do not align with grid {tuple(grid.shape)}")
    per_token = softmax_cross_entropy(logits, grid, reduction="none")
    if mask is None:
        return per_token.mean()
    m = mask[:, None, :].expand_as(per_token)
    count = int(m.sum())
    if count == 0:
        raise ValidationError("mask selects no tokens")
    return per_token[m].sum() / count


def token_accuracy(logits: torch.Tensor, grid: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-level top-1 accuracy over unmasked columns, shape (levels,)."""
    if grid.dim() == 2:
        grid = grid.unsqueeze(0)
    hit = (logits.argmax(-1) == grid).double()
    if mask is None:
        return hit.mean(dim=(0, 2))
    m = mask[:, None, :].double()
    return (hit * m).sum(dim=(0, 2)) / m.sum(dim=(0, 2)).clamp_min(1)
