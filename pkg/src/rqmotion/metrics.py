"""Evaluator-free metrics: reconstruction, codebook usage, teacher-forced token fit."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import MotionSequence, NormStats, normalize
from .errors import ValidationError
from .quantizer import MotionVQ, decorrelation_loss

REPORT_HEADER = (
    "Evaluator-free metrics only. FID, R-Precision, MM-Dist and MultiModality are NOT "
    "implemented (they need pretrained text-motion evaluator networks); recon L1 is a "
    "reconstruction error, not FID."
)


@dataclass
class ReconReport:
    l1: float  # mean |m - m_hat| over frames and features
    l1_per_frame: float  # mean over frames of the per-frame L1 norm
    l2_per_frame: float  # mean over frames of the per-frame L2 norm
    residual_norms: list[float]  # mean ||r^l|| for l = 0..L+1
    cov_norms: list[float]  # ||Cov(phi^l, r^{l+1})||_F for l = 0..L-1
    frames: int


@dataclass
class CodebookStats:
    histograms: np.ndarray  # (levels, K) assignment counts
    perplexity: list[float]
    dead: list[int]


@dataclass
class TokenReport:
    ce: float
    accuracy: list[float]
    ce_per_level: list[float]
    tokens: int


def _check(split: Sequence[MotionSequence]) -> None:
    if not split:
        raise ValidationError("split is empty")


def error_norms(motion: np.ndarray, recon: np.ndarray) -> tuple[float, float, float]:
    """(mean abs error, mean per-frame L1, mean per-frame L2) of two (T, d) arrays."""
    diff = np.abs(np.asarray(motion, np.float64) - np.asarray(recon, np.float64))
    return float(diff.mean()), float(diff.sum(-1).mean()), float(np.sqrt((diff ** 2).sum(-1)).mean())


@torch.no_grad()
def recon_report(vq: MotionVQ, split: Sequence[MotionSequence], stats: NormStats) -> ReconReport:
    """Frame-weighted reconstruction metrics in normalized feature space."""
    _check(split)
    vq.eval()
    abs_sum = l1_sum = l2_sum = 0.0
    frames = 0
    feat = 0
    phis: list[list[torch.Tensor]] = []
    nexts: list[list[torch.Tensor]] = []
    res_sums = None
    for seq in split:
        x = torch.from_numpy(normalize(seq, stats).frames)
        recon, result = vq(x)
        diff = (recon.double() - x.double()).abs()
        abs_sum += float(diff.sum())
        l1_sum += float(diff.sum(-1).sum())
        l2_sum += float(diff.pow(2).sum(-1).sqrt().sum())
        frames += x.shape[0]
        feat += x.numel()
        norms = [float(r.double().norm(dim=-1).sum()) for r in result.residuals]
        res_sums = norms if res_sums is None else [a + b for a, b in zip(res_sums, norms)]
        for level in range(len(result.phis) - 1):
            if len(phis) <= level:
                phis.append([])
                nexts.append([])
            phis[level].append(result.phis[level].double())
            nexts[level].append(result.residuals[level + 1].double())
    cov = []
    for p, r in zip(phis, nexts):
        cat_p, cat_r = torch.cat(p), torch.cat(r)
        cov.append(float(decorrelation_loss(cat_p, cat_r).sqrt()) if len(cat_p) >= 2 else 0.0)
    return ReconReport(abs_sum / feat, l1_sum / frames, l2_sum / frames,
                       [s / frames for s in res_sums], cov, frames)


def perplexity_from_counts(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 1.0
    p = counts[counts > 0] / total
    return float(math.exp(-(p * np.log(p)).sum()))


@torch.no_grad()
def codebook_stats(vq: MotionVQ, split: Sequence[MotionSequence], stats: NormStats) -> CodebookStats:
    """Exact assignment histograms; a code is dead if nothing in the split maps to it."""
    _check(split)
    vq.eval()
    hist = np.zeros((vq.levels, vq.codebook_size), dtype=np.int64)
    for seq in split:
        grid = vq.tokenize(torch.from_numpy(normalize(seq, stats).frames)).numpy()
        for level in range(vq.levels):
            hist[level] += np.bincount(grid[level], minlength=vq.codebook_size)
    return CodebookStats(hist, [perplexity_from_counts(h) for h in hist], [int((h == 0).sum()) for h in hist])


@torch.no_grad()
def token_eval(model, vq: MotionVQ, split: Sequence[MotionSequence], stats: NormStats,
               embed_client=None) -> TokenReport:
    """Teacher-forced CE and top-1 accuracy, EOS column included, token-weighted."""
    from .training import TokenCorpus
    from .numerics import softmax_cross_entropy

    _check(split)
    model.eval()
    corpus = TokenCorpus.build(split, vq, stats, model.config.d_model, embed_client)
    ce_sum = np.zeros(model.levels)
    hits = np.zeros(model.levels)
    count = 0
    for grid, prompt in zip(corpus.grids, corpus.prompts):
        full = torch.cat([grid, torch.full((grid.shape[0], 1), model.eos, dtype=grid.dtype)], dim=1)
        logits = model.forward_train(full, prompt)[0]
        ce = softmax_cross_entropy(logits, full, reduction="none")
        ce_sum += ce.sum(-1).numpy()
        hits += (logits.argmax(-1) == full).sum(-1).numpy()
        count += full.shape[1]
    per_level = ce_sum / count
    return TokenReport(float(per_level.mean()), (hits / count).tolist(), per_level.tolist(), count * model.levels)


def write_report(path: str | Path, recon: ReconReport | None = None, books: CodebookStats | None = None,
                 tokens: TokenReport | None = None) -> str:
    """Write a metric,level,value CSV and return the human-readable summary."""
    rows: list[tuple[str, str, float]] = []
    if recon is not None:
        rows += [("recon_l1", "", recon.l1), ("recon_l1_per_frame", "", recon.l1_per_frame),
                 ("recon_l2_per_frame", "", recon.l2_per_frame)]
        rows += [("residual_norm", str(l), v) for l, v in enumerate(recon.residual_norms)]
        rows += [("cov_norm", f"{l}-{l + 1}", v) for l, v in enumerate(recon.cov_norms)]
    if books is not None:
        rows += [("perplexity", str(l), v) for l, v in enumerate(books.perplexity)]
        rows += [("dead_codes", str(l), v) for l, v in enumerate(books.dead)]
    if tokens is not None:
        rows.append(("token_ce", "", tokens.ce))
        rows += [("token_ce", str(l), v) for l, v in enumerate(tokens.ce_per_level)]
        rows += [("token_acc", str(l), v) for l, v in enumerate(tokens.accuracy)]
    with open(path, "w", newline="") as fh:
        fh.write(f"# {REPORT_HEADER}\n")
        writer = csv.writer(fh)
        writer.writerow(["metric", "level", "value"])
        for name, level, value in rows:
            writer.writerow([name, level, f"{value:.6g}"])
    lines = [REPORT_HEADER, ""]
    for name, level, value in rows:
        lines.append(f"{name + ('[' + level + ']' if level else ''):<24} {value:.6g}")
    return "\n".join(lines)
