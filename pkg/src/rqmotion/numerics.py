"""Tensor arithmetic helpers and a finite-difference gradient harness.

Dense arithmetic and reverse-mode differentiation come from torch; this module
pins the dtype conventions, adds a stop-gradient that can be frozen for
finite-difference checks, and provides the checker itself.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import torch

from .errors import DimensionError, NumericError, TokenIndexError

DTYPE = torch.float32


def tensor(data, requires_grad: bool = False, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=dtype).clone()
    t.requires_grad_(requires_grad)
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul inner extents disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def assert_finite(x: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"non-finite values in {name}")
    return x


# --- stop-gradient with record/replay -------------------------------------
#
# Autograd treats stop-gradient outputs and argmin choices as constants at the
# evaluation point. A finite-difference probe must do the same, otherwise it
# measures a different function. ``record_constants`` captures every such
# constant during one evaluation and ``replay_constants`` feeds them back, in
# call order, to later evaluations.


class _ConstTape(threading.local):
    def __init__(self) -> None:
        self.mode: str | None = None
        self.values: list[torch.Tensor] = []
        self.cursor = 0


_tape = _ConstTape()


def _through_tape(value: torch.Tensor) -> torch.Tensor:
    if _tape.mode == "record":
        _tape.values.append(value)
        return value
    if _tape.mode == "replay":
        if _tape.cursor >= len(_tape.values):
            raise NumericError("replayed computation requested more constants than were recorded")
        out = _tape.values[_tape.cursor]
        _tape.cursor += 1
        return out
    return value


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Identity forward, zero backward."""
    return _through_tape(x.detach().clone() if _tape.mode == "record" else x.detach())


def discrete(indices: torch.Tensor) -> torch.Tensor:
    """Mark a discrete choice (e.g. argmin code ids) as a constant of the evaluation point."""
    return _through_tape(indices)


@contextmanager
def _tape_mode(mode: str, values: list[torch.Tensor]):
    prev = (_tape.mode, _tape.values, _tape.cursor)
    _tape.mode, _tape.values, _tape.cursor = mode, values, 0
    try:
        yield values
    finally:
        _tape.mode, _tape.values, _tape.cursor = prev


def record_constants():
    """Context manager collecting every stop-gradient / discrete value in call order."""
    return _tape_mode("record", [])


def replay_constants(values: list[torch.Tensor]):
    """Context manager substituting previously recorded constants, in call order."""
    return _tape_mode("replay", values)


# --- losses -----------------------------------------------------------------


def softmax_cross_entropy(
    logits: torch.Tensor, target, reduction: str = "mean"
) -> torch.Tensor:
    """-log softmax(logits)[target] over the last axis.

    ``target`` may be an int (single distribution) or an integer tensor whose
    shape matches ``logits.shape[:-1]``. Accumulation is done in float64 and
    the result cast back to the logits dtype.
    """
    V = logits.shape[-1]
    if V < 2:
        raise DimensionError("softmax_cross_entropy needs at least two classes")
    target = torch.as_tensor(target, dtype=torch.long)
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= V):
        raise TokenIndexError(f"target outside [0, {V})")
    logp = torch.log_softmax(logits.to(torch.float64), dim=-1)
    nll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    if reduction == "none":
        return nll.to(logits.dtype)
    if reduction == "sum":
        return nll.sum().to(logits.dtype)
    return nll.mean().to(logits.dtype)


# --- gradient verification --------------------------------------------------


def check_gradients(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor] | Iterable[torch.Tensor],
    eps: float = 1e-3,
) -> float:
    """Compare autograd against central differences; return the worst relative error.

    ``f`` is re-evaluated with each scalar of each parameter nudged by +/-eps.
    The error for a parameter tensor is ``||analytic - numeric|| /
    (||numeric|| + 1e-8)`` and the maximum across tensors is returned.
    Stop-gradient values and discrete choices made through :func:`stop_gradient`
    and :func:`discrete` are pinned to the unperturbed evaluation.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    with record_constants() as recorded:
        out = f()
    if out.numel() != 1:
        raise DimensionError("check_gradients needs a scalar-valued computation")
    if not math.isfinite(float(out.detach())):
        raise NumericError("non-finite value at the evaluation point")
    grads = torch.autograd.grad(out, params, allow_unused=True)

    def evaluate() -> float:
        with replay_constants(recorded), torch.no_grad():
            val = float(f())
        if not math.isfinite(val):
            raise NumericError("non-finite value during finite differencing")
        return val

    worst = 0.0
    for p, g in zip(params, grads):
        analytic = torch.zeros_like(p) if g is None else g.detach()
        numeric = torch.zeros_like(p)
        flat = p.data.view(-1)
        num_flat = numeric.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * eps)
        err = float(torch.linalg.vector_norm(analytic - numeric)) / (
            float(torch.linalg.vector_norm(numeric)) + 1e-8
        )
        worst = max(worst, err)
    return worst
