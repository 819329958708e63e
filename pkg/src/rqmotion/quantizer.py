"""Scale-adaptive residual vector quantizer with stride-1 convolutional autoencoder.

Each quantization level applies a learnable diagonal affine map to its input
residual, snaps the result to the nearest code, and maps the code back through
the inverse affine. Codebooks are learned by exponential moving averages of the
scaled residuals; the affine parameters, encoder and decoder by gradient.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import VQConfig
from .errors import ContractError, NumericError, TokenIndexError, ValidationError
from .numerics import assert_finite, discrete, stop_gradient


class ResBlock(nn.Module):
    def __init__(self, channels: int, kernel: int, dropout: float):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(channels, channels, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.drop(self.conv2(F.gelu(self.conv1(F.gelu(x)))))


class ConvStack(nn.Module):
    """in-conv -> residual blocks -> out-conv, all stride 1 and length preserving."""

    def __init__(self, c_in: int, hidden: int, c_out: int, blocks: int, kernel: int, dropout: float):
        super().__init__()
        self.inp = nn.Conv1d(c_in, hidden, kernel, padding=kernel // 2)
        self.blocks = nn.Sequential(*[ResBlock(hidden, kernel, dropout) for _ in range(blocks)])
        self.out = nn.Conv1d(hidden, c_out, kernel, padding=kernel // 2)

    @property
    def receptive_radius(self) -> int:
        convs = [self.inp, self.out] + [b.conv1 for b in self.blocks] + [b.conv2 for b in self.blocks]
        return sum(c.kernel_size[0] // 2 for c in convs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (B, T, C) in and out
        h = self.blocks(self.inp(x.transpose(1, 2)))
        return self.out(F.gelu(h)).transpose(1, 2)


@dataclass
class LevelOutput:
    index: torch.Tensor  # (N,) code ids
    q: torch.Tensor  # (N, d) chosen codes, scaled space
    phi: torch.Tensor  # (N, d) decoded contribution
    next_residual: torch.Tensor  # (N, d)
    scaled: torch.Tensor  # (N, d) affine-transformed input residual


@dataclass
class QuantizeResult:
    indices: torch.Tensor  # (levels, *lead)
    z_hat: torch.Tensor  # (*lead, d)
    residuals: list[torch.Tensor]  # r^0 .. r^{L+1}, each (*lead, d)
    phis: list[torch.Tensor]  # phi^0 .. phi^L
    scaled: list[torch.Tensor]  # W^l r^l + b^l

    @property
    def residual_norms(self) -> list[float]:
        return [float(r.detach().norm(dim=-1).mean()) for r in self.residuals]


def nearest_code(x: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """argmin_k ||x - c_k||, ties resolved to the lowest index."""
    x64 = x.detach().to(torch.float64)
    c64 = codebook.detach().to(torch.float64)
    dist = (x64 * x64).sum(-1, keepdim=True) - 2.0 * x64 @ c64.T + (c64 * c64).sum(-1)
    return dist.argmin(dim=-1)


class QuantizerStack(nn.Module):
    """Per-level codebooks (EMA buffers) and diagonal affine maps (parameters)."""

    def __init__(self, levels: int, codebook_size: int, dim: int, *, ema_decay: float = 0.99,
                 dead_threshold: float = 1.0, reset_patience: int = 256, eps_inv: float = 1e-4,
                 learnable_affine: bool = True):
        super().__init__()
        self.levels = levels
        self.codebook_size = codebook_size
        self.dim = dim
        self.ema_decay = ema_decay
        self.dead_threshold = dead_threshold
        self.reset_patience = reset_patience
        self.eps_inv = eps_inv
        self.w = nn.Parameter(torch.ones(levels, dim), requires_grad=learnable_affine)
        self.b = nn.Parameter(torch.zeros(levels, dim), requires_grad=learnable_affine)
        self.register_buffer("codebooks", torch.randn(levels, codebook_size, dim))
        self.register_buffer("ema_counts", torch.ones(levels, codebook_size))
        self.register_buffer("ema_sums", self.codebooks.clone())
        self.register_buffer("unused_steps", torch.zeros(levels, codebook_size, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    @property
    def learnable_affine(self) -> bool:
        return self.w.requires_grad

    def affine_parameters(self) -> list[nn.Parameter]:
        return [self.w, self.b]

    @torch.no_grad()
    def clamp_(self) -> None:
        """Keep every |w_i| >= eps_inv so the inverse affine stays defined."""
        sign = torch.where(self.w >= 0, 1.0, -1.0)
        self.w.copy_(sign * self.w.abs().clamp_min(self.eps_inv))

    def _check_invertible(self, level: int) -> None:
        if bool((self.w[level].abs() < self.eps_inv).any()):
            raise ContractError(f"level {level} scale below eps_inv; clamp_() was skipped")

    def phi_from_codes(self, level: int, q: torch.Tensor) -> torch.Tensor:
        return (q - self.b[level]) / self.w[level]

    def quantize_level(self, r: torch.Tensor, level: int) -> LevelOutput:
        if not 0 <= level < self.levels:
            raise ValidationError(f"level {level} outside [0, {self.levels})")
        self._check_invertible(level)
        scaled = r * self.w[level] + self.b[level]
        index = discrete(nearest_code(scaled, self.codebooks[level]))
        q = self.codebooks[level][index]
        phi = self.phi_from_codes(level, q)
        return LevelOutput(index, q, phi, r - phi, scaled)

    def quantize_all(self, r0: torch.Tensor) -> QuantizeResult:
        lead = r0.shape[:-1]
        r = r0.reshape(-1, self.dim)
        residuals, phis, scaled, indices = [r0], [], [], []
        z_hat = torch.zeros_like(r)
        for level in range(self.levels):
            out = self.quantize_level(r, level)
            z_hat = z_hat + out.phi
            r = out.next_residual
            indices.append(out.index.reshape(lead))
            phis.append(out.phi.reshape(*lead, self.dim))
            scaled.append(out.scaled.reshape(*lead, self.dim))
            residuals.append(r.reshape(*lead, self.dim))
        return QuantizeResult(torch.stack(indices), z_hat.reshape(*lead, self.dim), residuals, phis, scaled)

    def dequantize(self, indices: torch.Tensor) -> torch.Tensor:
        """Rebuild z_hat from a (levels, *lead) index grid."""
        if indices.shape[0] != self.levels:
            raise ValidationError(f"token grid has {indices.shape[0]} levels, quantizer has {self.levels}")
        if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= self.codebook_size):
            raise TokenIndexError(f"token index outside [0, {self.codebook_size})")
        lead = indices.shape[1:]
        z_hat = torch.zeros(int(np.prod(lead)), self.dim, dtype=self.codebooks.dtype)
        for level in range(self.levels):
            q = self.codebooks[level][indices[level].reshape(-1)]
            z_hat = z_hat + self.phi_from_codes(level, q)
        return z_hat.reshape(*lead, self.dim)

    # --- codebook learning -------------------------------------------------

    @torch.no_grad()
    def init_codebooks(self, r0: torch.Tensor, generator: torch.Generator | None = None,
                       mask: torch.Tensor | None = None) -> None:
        """Seed each level's codebook with scaled residuals sampled from one batch."""
        r = r0.detach().reshape(-1, self.dim)
        if mask is not None:
            r = r[mask.reshape(-1)]
        n = r.shape[0]
        for level in range(self.levels):
            scaled = r * self.w[level] + self.b[level]
            if n >= self.codebook_size:
                pick = torch.randperm(n, generator=generator)[: self.codebook_size]
            else:
                pick = torch.randint(n, (self.codebook_size,), generator=generator)
            self.codebooks[level] = scaled[pick]
            self.ema_sums[level] = scaled[pick]
            self.ema_counts[level] = 1.0
            self.unused_steps[level] = 0
            r = r - self.quantize_level(r, level).phi
        self.initialized.fill_(True)

    @torch.no_grad()
    def ema_update(self, result: QuantizeResult, generator: torch.Generator | None = None,
                   mask: torch.Tensor | None = None) -> int:
        """Move codes toward the mean of their assigned scaled residuals; reset dead codes.

        Returns the number of codes reset.
        """
        K, delta = self.codebook_size, self.ema_decay
        resets = 0
        for level in range(self.levels):
            idx = result.indices[level].reshape(-1)
            s = result.scaled[level].detach().reshape(-1, self.dim)
            if mask is not None:
                keep = mask.reshape(-1)
                idx, s = idx[keep], s[keep]
            counts = torch.bincount(idx, minlength=K).to(s.dtype)
            sums = torch.zeros(K, self.dim, dtype=s.dtype).index_add_(0, idx, s)
            self.ema_counts[level].mul_(delta).add_((1 - delta) * counts)
            self.ema_sums[level].mul_(delta).add_((1 - delta) * sums)
            self.codebooks[level] = self.ema_sums[level] / self.ema_counts[level].clamp_min(1e-6)[:, None]
            self.unused_steps[level] = torch.where(counts > 0, 0, self.unused_steps[level] + 1)
            dead = (self.ema_counts[level] < self.dead_threshold) | (self.unused_steps[level] >= self.reset_patience)
            n_dead = int(dead.sum())
            if n_dead and s.shape[0]:
                rows = s[torch.randint(s.shape[0], (n_dead,), generator=generator)]
                self.codebooks[level][dead] = rows
                self.ema_sums[level][dead] = rows
                self.ema_counts[level][dead] = 1.0
                self.unused_steps[level][dead] = 0
                resets += n_dead
        return resets


class MotionVQ(nn.Module):
    """Encoder, residual quantizer stack, and decoder."""

    def __init__(self, config: VQConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = ConvStack(config.dim, config.hidden, config.d_latent, config.blocks,
                                 config.kernel, config.dropout)
        self.quantizer = QuantizerStack(
            config.levels, config.codebook_size, config.d_latent, ema_decay=config.ema_decay,
            dead_threshold=config.dead_threshold, reset_patience=config.reset_patience,
            eps_inv=config.eps_inv, learnable_affine=config.learnable_affine,
        )
        self.decoder = ConvStack(config.d_latent, config.hidden, config.dim, config.blocks,
                                 config.kernel, config.dropout)

    @property
    def levels(self) -> int:
        return self.config.levels

    @property
    def codebook_size(self) -> int:
        return self.config.codebook_size

    def encode(self, motion: torch.Tensor) -> torch.Tensor:
        """(B, T, d) or (T, d) normalized motion -> latents of the same length."""
        assert_finite(motion, "encoder input")
        squeeze = motion.dim() == 2
        z = self.encoder(motion.unsqueeze(0) if squeeze else motion)
        return z.squeeze(0) if squeeze else z

    def decode(self, z_hat: torch.Tensor) -> torch.Tensor:
        squeeze = z_hat.dim() == 2
        m = self.decoder(z_hat.unsqueeze(0) if squeeze else z_hat)
        return m.squeeze(0) if squeeze else m

    def decode_tokens(self, indices: torch.Tensor) -> torch.Tensor:
        """(levels, n) or (levels, B, n) code grid -> motion."""
        return self.decode(self.quantizer.dequantize(indices))

    def forward(self, motion: torch.Tensor) -> tuple[torch.Tensor, QuantizeResult]:
        """Training pass with straight-through gradients from the decoder to the encoder."""
        r0 = self.encode(motion)
        result = self.quantizer.quantize_all(r0)
        z_st = result.z_hat + (r0 - stop_gradient(r0))
        return self.decode(z_st), result

    @torch.no_grad()
    def tokenize(self, motion: torch.Tensor) -> torch.Tensor:
        """Normalized (T, d) motion -> (levels, T) code grid, eval mode."""
        return self.quantizer.quantize_all(self.encode(motion)).indices


# --- losses -------------------------------------------------------------------


def decorrelation_loss(phi: torch.Tensor, r_next: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius norm of the biased (divisor N) sample cross-covariance."""
    if phi.shape != r_next.shape or phi.dim() != 2:
        raise ValidationError(f"need matching (N, d) samples, got {tuple(phi.shape)} and {tuple(r_next.shape)}")
    n = phi.shape[0]
    if n < 2:
        raise ValidationError("decorrelation needs at least two samples")
    x = phi - phi.mean(dim=0)
    y = r_next - r_next.mean(dim=0)
    cov = x.T @ y / n
    return (cov * cov).sum()


def cross_covariance_norms(result: QuantizeResult, mask: torch.Tensor | None = None) -> list[float]:
    """||Cov(phi^l, r^{l+1})||_F for l = 0..L-1 (not squared)."""
    out = []
    for level in range(len(result.phis) - 1):
        phi = _flat(result.phis[level], mask).detach()
        nxt = _flat(result.residuals[level + 1], mask).detach()
        out.append(float(decorrelation_loss(phi.double(), nxt.double()).sqrt()))
    return out


def _flat(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    flat = x.reshape(-1, x.shape[-1])
    return flat if mask is None else flat[mask.reshape(-1)]


def vq_loss(
    motion: torch.Tensor,
    recon: torch.Tensor,
    result: QuantizeResult,
    stack: QuantizerStack,
    beta: float,
    lam: float,
    gamma: float,
    mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Modulation + commitment + cross-level decorrelation + L1 reconstruction.

    Reconstruction and commitment are means over unmasked elements; the
    modulation term sums squared deviations from the identity affine.
    """
    if mask is None:
        mask = torch.ones(motion.shape[:-1], dtype=torch.bool)
    m = mask.reshape(-1)
    recon_term = (_flat(motion, mask) - _flat(recon, mask)).abs().mean()
    modulation = ((stack.w - 1.0) ** 2).sum() + (stack.b ** 2).sum()
    commitment = sum(
        ((_flat(result.residuals[l], mask) - stop_gradient(_flat(result.phis[l], mask))) ** 2).mean()
        for l in range(stack.levels)
    )
    n_valid = int(m.sum())
    if stack.levels > 1 and n_valid >= 2:
        decor = sum(
            decorrelation_loss(_flat(result.phis[l], mask), _flat(result.residuals[l + 1], mask))
            for l in range(stack.levels - 1)
        )
    else:
        decor = torch.zeros((), dtype=motion.dtype)
    terms = {"modulation": modulation, "commitment": commitment, "decorrelation": decor, "recon": recon_term}
    for name, value in terms.items():
        if not bool(torch.isfinite(value)):
            raise NumericError(f"non-finite {name} term in vq loss")
    total = gamma * modulation + beta * commitment + lam * decor + recon_term
    breakdown = {name: float(v.detach()) for name, v in terms.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown


# --- file formats ---------------------------------------------------------------

_TOKEN_HEADER = struct.Struct("<III")  # levels, n, K


def write_tokens(path: str | Path, indices: torch.Tensor | np.ndarray, codebook_size: int) -> None:
    grid = np.asarray(indices, dtype=np.int64)
    if grid.ndim != 2:
        raise ValidationError("token grid must be (levels, n)")
    if grid.size and (grid.min() < 0 or grid.max() >= codebook_size):
        raise TokenIndexError(f"token index outside [0, {codebook_size})")
    with open(path, "wb") as fh:
        fh.write(_TOKEN_HEADER.pack(grid.shape[0], grid.shape[1], codebook_size))
        fh.write(grid.astype("<u2").tobytes(order="C"))


def read_tokens(path: str | Path) -> tuple[torch.Tensor, int]:
    raw = Path(path).read_bytes()
    if len(raw) < _TOKEN_HEADER.size:
        raise ValidationError(f"{path}: truncated token header")
    levels, n, K = _TOKEN_HEADER.unpack_from(raw)
    body = raw[_TOKEN_HEADER.size:]
    if len(body) != levels * n * 2:
        raise ValidationError(f"{path}: expected {levels * n * 2} payload bytes, found {len(body)}")
    grid = np.frombuffer(body, dtype="<u2").reshape(levels, n).astype(np.int64)
    if grid.size and grid.max() >= K:
        raise TokenIndexError(f"{path}: token index >= K={K}")
    return torch.from_numpy(grid), K


def dump_codebooks(stack: QuantizerStack, path: str | Path, usage: torch.Tensor | None = None) -> None:
    """CSV of (level, code, usage, l2_norm); usage defaults to the EMA counters."""
    usage = stack.ema_counts if usage is None else usage
    norms = stack.codebooks.norm(dim=-1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "code", "usage", "l2_norm"])
        for level in range(stack.levels):
            for code in range(stack.codebook_size):
                writer.writerow([level, code, f"{float(usage[level, code]):.6g}", f"{float(norms[level, code]):.6g}"])
