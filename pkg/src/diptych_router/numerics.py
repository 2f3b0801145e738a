"""Dense float32 kernels with reverse-mode gradients.

The tape and gradient accumulation are torch autograd; this module pins down
the handful of operations the model depends on and the exact semantics of the
additive attention mask.
"""

from __future__ import annotations

import logging

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

# exp(BLOCKED - max) underflows to exactly 0 in float32 while |logit| <= 1e4
BLOCKED = -1e9
MAX_LOGIT = 1e4
LN_EPS = 1e-5


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs matrices, got shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def fully_blocked_rows(mask: Tensor) -> Tensor:
    """Boolean tensor over rows: True where every entry of the row is blocked."""
    return (mask <= BLOCKED / 2).all(dim=-1)


def softmax_masked(logits: Tensor, mask: Tensor) -> Tensor:
    """Row-wise softmax of ``logits + mask``.

    ``mask`` holds 0 (open) or BLOCKED and may broadcast over leading batch
    dimensions. Blocked positions come out as exactly 0, so the result and its
    gradient do not depend on the logits stored there. A row with no open
    entry is returned as zeros and reported through the module logger.
    """
    if mask.shape[-2:] != logits.shape[-2:]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match logits {tuple(logits.shape)}")
    out = torch.softmax(logits + mask, dim=-1)
    dead = fully_blocked_rows(mask)
    if bool(dead.any()):
        logger.warning("softmax_masked: %d fully blocked row(s) returned as zeros", int(dead.sum()))
        out = out.masked_fill(dead.unsqueeze(-1).expand_as(out), 0.0)
    return out


def layer_norm(x: Tensor, scale: Tensor | None = None, shift: Tensor | None = None) -> Tensor:
    d = x.shape[-1]
    if scale is not None and scale.shape[-1] != d:
        raise ValueError(f"scale has {scale.shape[-1]} features, input has {d}")
    if shift is not None and shift.shape[-1] != d:
        raise ValueError(f"shift has {shift.shape[-1]} features, input has {d}")
    return F.layer_norm(x, (d,), scale, shift, eps=LN_EPS)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it."""
    if loss.numel() != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()
