"""Dense tensor primitives with reverse-mode gradients.

Everything here operates on ``torch.Tensor``; torch's autograd tape is the
computation record. The functions add the shape contracts, the numerically
stable formulations and the degenerate-input handling the encoders and losses
rely on, plus a finite-difference gradient checker that re-runs at float64.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple

import torch
import torch.nn.functional as F

LAYER_NORM_EPS = 1e-5
NORMALIZE_EPS = 1e-12


class DimensionError(ValueError):
    """Raised when operand extents are incompatible."""


class EvaluationError(RuntimeError):
    """Raised when a function under gradient check is not finite."""


def _check_axis(x: torch.Tensor, axis: int) -> int:
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"axis {axis} out of range for shape {tuple(x.shape)}")
    return axis % x.dim()


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents disagree: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    axis = _check_axis(x, axis)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def logsumexp(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    axis = _check_axis(x, axis)
    m = x.amax(dim=axis, keepdim=True).detach()
    return (x - m).exp().sum(dim=axis).log() + m.squeeze(axis)


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor,
    bias: torch.Tensor,
    eps: float = LAYER_NORM_EPS,
) -> torch.Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layer_norm gain {tuple(gain.shape)} / bias {tuple(bias.shape)} "
            f"do not match normalized extent {width}"
        )
    return F.layer_norm(x, (width,), gain, bias, eps)


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    scale: float | None = None,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """softmax(q kᵀ · scale) v over the last two axes.

    ``mask`` is boolean, broadcastable to ``(..., Lq, Lk)``; False entries are
    excluded. A query row with no admissible key yields zeros.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(
            f"attention key extents disagree: q {tuple(q.shape)} vs k {tuple(k.shape)}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"attention sequence extents disagree: k {tuple(k.shape)} vs v {tuple(v.shape)}"
        )
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    if mask is None:
        return F.scaled_dot_product_attention(q, k, v, scale=scale)
    # the fused kernel yields NaN on fully masked rows: open them, then zero the result
    any_key = mask.any(dim=-1, keepdim=True)
    out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask | ~any_key, scale=scale)
    return out * any_key.to(out.dtype)


def attention_reference(q, k, v, scale=None, mask=None):
    """Unfused softmax(q kᵀ · scale) v, used to cross-check ``attention``."""
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    logits = matmul(q, k.transpose(-1, -2)) * scale
    if mask is None:
        return matmul(softmax(logits, -1), v)
    any_key = mask.any(dim=-1, keepdim=True)
    logits = logits.masked_fill(~mask, float("-inf")).masked_fill(~any_key, 0.0)
    return matmul(softmax(logits, -1) * any_key, v)


class Normalized(NamedTuple):
    values: torch.Tensor
    degenerate: torch.Tensor


def l2_normalize(
    x: torch.Tensor, axis: int = -1, eps: float = NORMALIZE_EPS
) -> Normalized:
    """Scale every slice along ``axis`` to unit Euclidean norm.

    Zero slices come back as zeros and are marked in ``degenerate``.
    """
    axis = _check_axis(x, axis)
    sq = (x * x).sum(dim=axis, keepdim=True)
    values = x / torch.sqrt(sq + eps)
    return Normalized(values, (sq == 0).squeeze(axis))


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = 1e-3,
) -> float:
    """Worst relative error of autograd vs central differences, in float64.

    ``f`` must accept a float64 tensor and return a scalar tensor. The
    relative error for a coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    x64 = x.detach().to(torch.float64).clone().requires_grad_(True)
    y = f(x64)
    if y.numel() != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {tuple(y.shape)}")
    if not torch.isfinite(y).all():
        raise EvaluationError(f"function value is not finite: {y.item()}")
    (analytic,) = torch.autograd.grad(y, x64)

    flat = x64.detach().clone().reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = f(flat.view_as(x64)).item()
            flat[i] = orig - step
            lo = f(flat.view_as(x64)).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2 * step)
    analytic = analytic.reshape(-1)
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(1e-8, dtype=torch.float64))
    return float(((analytic - numeric).abs() / denom).max())
