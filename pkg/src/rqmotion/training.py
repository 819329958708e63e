"""Two-stage training: quantizer first, then the token transformer on frozen codes."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, state_hash
from .config import RunConfig, TrainConfig, parse_config
from .data import Dataset, MotionSequence, NormStats, batch_iter, normalize
from .errors import ContractError, NumericError, ValidationError
from .quantizer import MotionVQ, cross_covariance_norms, vq_loss
from .text import embed_prompt
from .transformer import RqhcModel, ce_loss, token_accuracy

log = logging.getLogger(__name__)


# --- optimizer and schedule --------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update with decoupled weight decay and bias-corrected moments.

    Raises NumericError (leaving params and state untouched) on non-finite grads.
    """
    if len(state.exp_avg) != len(params):
        raise ValidationError("optimizer state does not match the parameter list")
    for g in grads:
        if g is not None and not bool(torch.isfinite(g).all()):
            raise NumericError("non-finite gradient; step skipped")
    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            g = torch.zeros_like(p)
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


def cosine_lr(step: int, total: int, lr_start: float, lr_end: float) -> float:
    """Cosine decay from lr_start at step 0 to lr_end at ``total``; clamped beyond."""
    if total <= 0 or step >= total:
        return lr_end
    if step <= 0:
        return lr_start
    w = 0.5 * (1.0 + math.cos(math.pi * step / total))
    return lr_start * w + lr_end * (1.0 - w)


def clip_grad_norm(grads: Sequence[torch.Tensor | None], max_norm: float) -> float:
    present = [g for g in grads if g is not None]
    total = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in present])))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in present:
            g.mul_(scale)
    return total


# --- metrics log ----------------------------------------------------------------


class MetricsLog:
    """Append-only CSV; the header is fixed by the first row written."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        self._fields: list[str] | None = None
        if self.path is not None and self.path.exists() and self.path.stat().st_size:
            with open(self.path, newline="") as fh:
                self._fields = next(csv.reader(fh))

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is None:
            return
        new_file = self._fields is None
        if new_file:
            self._fields = list(row)
        with open(self.path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self._fields, extrasaction="ignore", restval="")
            if new_file:
                writer.writeheader()
            writer.writerow(row)


def perplexity(indices: torch.Tensor, codebook_size: int) -> float:
    counts = torch.bincount(indices.reshape(-1), minlength=codebook_size).double()
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(torch.exp(-(nz * nz.log()).sum()))


# --- shared trainer plumbing ----------------------------------------------------


class _Trainer:
    config: RunConfig
    train: TrainConfig
    module: torch.nn.Module
    params: list[torch.nn.Parameter]
    opt: AdamState
    step: int
    skipped: int

    def _optimize(self, loss: torch.Tensor, lr: float) -> float | None:
        grads = list(torch.autograd.grad(loss, self.params, allow_unused=True))
        gnorm = None
        if self.train.grad_clip > 0:
            gnorm = clip_grad_norm(grads, self.train.grad_clip)
        try:
            adamw_step(self.params, grads, self.opt, lr, (self.train.beta1, self.train.beta2),
                       self.train.eps, self.train.weight_decay)
        except NumericError:
            self.skipped += 1
            log.warning("step %d skipped: non-finite gradients (%d so far)", self.step, self.skipped)
        return gnorm

    def _optimizer_tensors(self) -> dict[str, torch.Tensor]:
        names = self._param_names()
        out = {"optim.step": torch.tensor([self.opt.step, self.skipped], dtype=torch.int64)}
        for n, m, v in zip(names, self.opt.exp_avg, self.opt.exp_avg_sq):
            out[f"optim.m.{n}"] = m
            out[f"optim.v.{n}"] = v
        out["rng.torch"] = torch.get_rng_state()
        return out

    def _restore_optimizer(self, ckpt: Checkpoint) -> None:
        names = self._param_names()
        self.opt.step, self.skipped = (int(x) for x in ckpt.tensors["optim.step"])
        self.opt.exp_avg = [ckpt.tensors[f"optim.m.{n}"].clone() for n in names]
        self.opt.exp_avg_sq = [ckpt.tensors[f"optim.v.{n}"].clone() for n in names]
        torch.set_rng_state(ckpt.tensors["rng.torch"])

    def _param_names(self) -> list[str]:
        lookup = {id(p): n for n, p in self.module.named_parameters()}
        return [lookup[id(p)] for p in self.params]


# --- stage 1: quantizer -----------------------------------------------------------


class VQTrainer(_Trainer):
    """Owns the quantizer parameters and optimizer state for one training run."""

    def __init__(self, config: RunConfig, dataset: Dataset, metrics: MetricsLog | None = None):
        self.config = config
        self.train = config.train_vq
        self.dataset = dataset
        if dataset.stats is None:
            raise ValidationError("dataset has no normalization stats")
        if dataset.dim != config.vq.dim:
            raise ValidationError(f"dataset has d={dataset.dim}, quantizer expects d={config.vq.dim}")
        torch.manual_seed(self.train.seed)
        self.model = self.module = MotionVQ(config.vq)
        self.params = [p for p in self.model.parameters() if p.requires_grad]
        self.opt = AdamState.for_params(self.params)
        self.reset_gen = torch.Generator().manual_seed(self.train.seed + 1)
        self.step = 0
        self.skipped = 0
        self.metrics = metrics or MetricsLog()
        self._batches = None

    def _next_batch(self):
        if self._batches is None:
            w = self.train.window
            shortest = min(s.length for s in self.dataset.train)
            self._batches = batch_iter(self.dataset, min(self.train.batch, len(self.dataset.train)), w,
                                       self.train.seed, pad=w > shortest, start_step=self.step)
        return next(self._batches)

    def train_step(self) -> dict:
        batch = self._next_batch()
        x, mask = batch.motion, batch.mask
        self.model.train()
        q = self.model.quantizer
        if not bool(q.initialized):
            with torch.no_grad():
                q.init_codebooks(self.model.encode(x), self.reset_gen, mask)
        lr = cosine_lr(self.step, self.train.steps, self.train.lr_start, self.train.lr_end)
        recon, result = self.model(x)
        loss, terms = vq_loss(x, recon, result, q, self.train.beta, self.train.lam, self.train.gamma, mask)
        self._optimize(loss, lr)
        q.clamp_()
        resets = q.ema_update(result, self.reset_gen, mask)
        self.step += 1
        row = {"phase": "train", "step": self.step, "lr": lr, **terms, "recon_l1": terms["recon"], "resets": resets}
        for level in range(q.levels):
            row[f"perplexity_l{level}"] = perplexity(result.indices[level][mask], q.codebook_size)
        for level, c in enumerate(cross_covariance_norms(result, mask)):
            row[f"cov_l{level}_l{level + 1}"] = c
        return row

    def run(self, steps: int | None = None, ckpt_path: str | Path | None = None) -> MotionVQ:
        target = self.train.steps if steps is None else min(self.train.steps, self.step + steps)
        while self.step < target:
            row = self.train_step()
            if self.step % self.train.log_every == 0 or self.step == target:
                self.metrics.append(row)
                log.info("vq step %d loss %.4f recon %.4f", self.step, row["total"], row["recon"])
            if self.train.eval_every and self.step % self.train.eval_every == 0 and self.dataset.eval:
                self.metrics.append({"phase": "eval", "step": self.step, **self.evaluate()})
            if ckpt_path and self.train.ckpt_every and self.step % self.train.ckpt_every == 0:
                self.save(ckpt_path)
        self.model.eval()
        return self.model

    def evaluate(self, split: str = "eval") -> dict:
        from .metrics import recon_report

        rep = recon_report(self.model, self.dataset.split(split), self.dataset.stats)
        out = {"recon_l1": rep.l1}
        for level, c in enumerate(rep.cov_norms):
            out[f"cov_l{level}_l{level + 1}"] = c
        return out

    def checkpoint(self) -> Checkpoint:
        return vq_checkpoint(self.model, self.dataset.stats, self.config, self.step,
                             extra={**self._optimizer_tensors(), "rng.reset": self.reset_gen.get_state()})

    def save(self, path: str | Path) -> None:
        self.checkpoint().save(path)

    @classmethod
    def resume(cls, path: str | Path, dataset: Dataset, metrics: MetricsLog | None = None) -> "VQTrainer":
        ckpt = Checkpoint.load(path)
        trainer = cls(parse_config(ckpt.config), dataset, metrics)
        trainer.model.load_state_dict(ckpt.subset("model."))
        trainer.dataset.stats = NormStats(ckpt.tensors["norm.mean"].numpy(), ckpt.tensors["norm.std"].numpy())
        trainer._restore_optimizer(ckpt)
        trainer.reset_gen.set_state(ckpt.tensors["rng.reset"])
        trainer.step = ckpt.step
        return trainer


def vq_checkpoint(model: MotionVQ, stats: NormStats, config: RunConfig, step: int = 0,
                  extra: dict[str, torch.Tensor] | None = None) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors["norm.mean"] = torch.from_numpy(stats.mean.copy())
    tensors["norm.std"] = torch.from_numpy(stats.std.copy())
    tensors.update(extra or {})
    return Checkpoint(tensors, config.to_text(), step, {"kind": "vq", "fps": config.corpus.fps})


def load_vq(path: str | Path) -> tuple[MotionVQ, NormStats, RunConfig]:
    ckpt = Checkpoint.load(path)
    if ckpt.meta.get("kind") != "vq":
        raise ValidationError(f"{path} is not a quantizer checkpoint")
    config = parse_config(ckpt.config)
    model = MotionVQ(config.vq)
    model.load_state_dict(ckpt.subset("model."))
    model.eval()
    stats = NormStats(ckpt.tensors["norm.mean"].numpy(), ckpt.tensors["norm.std"].numpy())
    return model, stats, config


def train_vq(config: RunConfig, dataset: Dataset, *, steps: int | None = None,
             metrics_path: str | Path | None = None) -> tuple[MotionVQ, MetricsLog]:
    trainer = VQTrainer(config, dataset, MetricsLog(metrics_path))
    model = trainer.run(steps)
    return model, trainer.metrics


# --- stage 2: token transformer ----------------------------------------------------


@dataclass
class TokenCorpus:
    """Frozen-quantizer token grids with their prompt embeddings."""

    grids: list[torch.Tensor]  # each (levels, n)
    prompts: torch.Tensor  # (N, d_model)
    captions: list[str]

    @classmethod
    def build(cls, sequences: Sequence[MotionSequence], quantizer: MotionVQ, stats: NormStats,
              d_model: int, embed_client=None) -> "TokenCorpus":
        if not sequences:
            raise ValidationError("no sequences to tokenize")
        quantizer.eval()
        grids = [quantizer.tokenize(torch.from_numpy(normalize(s, stats).frames)) for s in sequences]
        captions = [s.caption or "motion" for s in sequences]
        prompts = torch.from_numpy(np.stack([embed_prompt(c, d_model, embed_client).vector for c in captions]))
        return cls(grids, prompts, captions)

    def __len__(self) -> int:
        return len(self.grids)


def crop_batch(corpus: TokenCorpus, picks: Sequence[int], window: int, eos: int,
               rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Random contiguous crops of each grid with an EOS column appended at the end.

    Returns (grid (B, levels, w), mask (B, w), prompts (B, d)); w is the
    longest crop in the batch, shorter rows are padded and masked.
    """
    crops = []
    for i in picks:
        g = corpus.grids[i]
        ext = torch.cat([g, torch.full((g.shape[0], 1), eos, dtype=g.dtype)], dim=1)
        n = ext.shape[1]
        start = int(rng.integers(0, n - window + 1)) if n > window else 0
        crops.append(ext[:, start:start + window])
    w = max(c.shape[1] for c in crops)
    levels = crops[0].shape[0]
    grid = torch.zeros(len(crops), levels, w, dtype=torch.long)
    mask = torch.zeros(len(crops), w, dtype=torch.bool)
    for b, c in enumerate(crops):
        grid[b, :, : c.shape[1]] = c
        mask[b, : c.shape[1]] = True
    return grid, mask, corpus.prompts[list(picks)]


class RQHCTrainer(_Trainer):
    """Trains the token transformer against a frozen quantizer."""

    def __init__(self, config: RunConfig, dataset: Dataset, quantizer: MotionVQ,
                 metrics: MetricsLog | None = None, corpus: TokenCorpus | None = None, embed_client=None):
        self.config = config
        self.train = config.train_rqhc
        self.dataset = dataset
        if quantizer.levels != config.rqhc.levels or quantizer.codebook_size != config.rqhc.codebook_size:
            raise ValidationError("transformer levels/codebook size must match the quantizer")
        self.quantizer = quantizer.eval()
        for p in self.quantizer.parameters():
            p.requires_grad_(False)
        self.quantizer_hash = state_hash(self.quantizer)
        torch.manual_seed(self.train.seed)
        self.model = self.module = RqhcModel(config.rqhc)
        self.params = list(self.model.parameters())
        self.opt = AdamState.for_params(self.params)
        self.step = 0
        self.skipped = 0
        self.metrics = metrics or MetricsLog()
        self.embed_client = embed_client
        self.corpus = corpus or TokenCorpus.build(dataset.train, quantizer, dataset.stats, config.rqhc.d_model,
                                                  embed_client)
        self._eval_corpus = None

    def _batch(self):
        rng = np.random.default_rng([self.train.seed, self.step])
        n = len(self.corpus)
        picks = rng.permutation(n)[: self.train.batch] if self.train.batch < n else np.arange(n)
        return crop_batch(self.corpus, picks, self.train.window, self.model.eos, rng)

    def train_step(self) -> dict:
        grid, mask, prompts = self._batch()
        self.model.train()
        lr = cosine_lr(self.step, self.train.steps, self.train.lr_start, self.train.lr_end)
        logits = self.model.forward_train(grid, prompts)
        loss = ce_loss(logits, grid, mask)
        if not bool(torch.isfinite(loss)):
            raise NumericError(f"non-finite cross-entropy at step {self.step}")
        gnorm = self._optimize(loss, lr)
        self.step += 1
        acc = token_accuracy(logits.detach(), grid, mask)
        row = {"phase": "train", "step": self.step, "lr": lr, "ce": float(loss.detach()),
               "grad_norm": gnorm if gnorm is not None else ""}
        for level, a in enumerate(acc.tolist()):
            row[f"acc_l{level}"] = a
        return row

    def run(self, steps: int | None = None, ckpt_path: str | Path | None = None) -> RqhcModel:
        target = self.train.steps if steps is None else min(self.train.steps, self.step + steps)
        while self.step < target:
            row = self.train_step()
            if self.step % self.train.log_every == 0 or self.step == target:
                self.metrics.append(row)
                log.info("rqhc step %d ce %.4f", self.step, row["ce"])
            if self.train.eval_every and self.step % self.train.eval_every == 0 and self.dataset.eval:
                self.metrics.append({"phase": "eval", "step": self.step, **self.evaluate()})
            if ckpt_path and self.train.ckpt_every and self.step % self.train.ckpt_every == 0:
                self.save(ckpt_path)
        if state_hash(self.quantizer) != self.quantizer_hash:
            raise ContractError("quantizer changed during transformer training")
        self.model.eval()
        return self.model

    def evaluate(self, split: str = "eval") -> dict:
        from .metrics import token_eval

        rep = token_eval(self.model, self.quantizer, self.dataset.split(split), self.dataset.stats,
                         self.embed_client)
        out = {"ce": rep.ce}
        for level, a in enumerate(rep.accuracy):
            out[f"acc_l{level}"] = a
        return out

    def checkpoint(self) -> Checkpoint:
        extra = self._optimizer_tensors()
        return rqhc_checkpoint(self.model, self.config, self.quantizer_hash, self.step, extra)

    def save(self, path: str | Path) -> None:
        self.checkpoint().save(path)

    @classmethod
    def resume(cls, path: str | Path, dataset: Dataset, quantizer: MotionVQ,
               metrics: MetricsLog | None = None, embed_client=None) -> "RQHCTrainer":
        ckpt = Checkpoint.load(path)
        trainer = cls(parse_config(ckpt.config), dataset, quantizer, metrics, embed_client=embed_client)
        if ckpt.meta.get("quantizer") != trainer.quantizer_hash:
            raise ValidationError("checkpoint was trained against a different quantizer")
        trainer.model.load_state_dict(ckpt.subset("model."))
        trainer._restore_optimizer(ckpt)
        trainer.step = ckpt.step
        return trainer


def rqhc_checkpoint(model: RqhcModel, config: RunConfig, quantizer_hash: str, step: int = 0,
                    extra: dict[str, torch.Tensor] | None = None) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra or {})
    return Checkpoint(tensors, config.to_text(), step, {"kind": "rqhc", "quantizer": quantizer_hash})


def load_rqhc(path: str | Path, quantizer: MotionVQ | None = None) -> tuple[RqhcModel, RunConfig]:
    ckpt = Checkpoint.load(path)
    if ckpt.meta.get("kind") != "rqhc":
        raise ValidationError(f"{path} is not a transformer checkpoint")
    if quantizer is not None and ckpt.meta.get("quantizer") != state_hash(quantizer):
        raise ValidationError(f"{path} was trained against a different quantizer")
    config = parse_config(ckpt.config)
    model = RqhcModel(config.rqhc)
    model.load_state_dict(ckpt.subset("model."))
    return model.eval(), config


def train_rqhc(config: RunConfig, dataset: Dataset, quantizer: MotionVQ, *, steps: int | None = None,
               metrics_path: str | Path | None = None) -> tuple[RqhcModel, MetricsLog]:
    trainer = RQHCTrainer(config, dataset, quantizer, MetricsLog(metrics_path))
    model = trainer.run(steps)
    return model, trainer.metrics
