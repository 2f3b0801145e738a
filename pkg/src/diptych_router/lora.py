"""Segment-gated dual-branch LoRA.

Every adapted projection carries a frozen base ``nn.Linear`` and two low-rank
branches. Which branch (if any) touches a token row depends only on the
row's segment kind:

    prompt          -> none (the base weights alone)
    noise           -> image branch (low rank)
    condition rows  -> subject branch (high rank)

With ``dual=False`` a single branch (the subject one) is applied to every row,
which is the "no bias mitigation" ablation.
"""

from __future__ import annotations

import enum
import math

import numpy as np
import torch
from torch import nn

from .layout import Kind
from .numerics import Tensor


class Branch(enum.IntEnum):
    NONE = 0
    SUBJECT = 1
    IMAGE = 2


def gate(kind: Kind | int, dual: bool = True) -> Branch:
    try:
        kind = Kind(int(kind))
    except ValueError:
        raise ValueError(f"unknown segment label {kind!r}") from None
    if not dual:
        return Branch.SUBJECT
    if kind == Kind.PROMPT:
        return Branch.NONE
    if kind == Kind.NOISE:
        return Branch.IMAGE
    return Branch.SUBJECT


def gate_codes(kinds, dual: bool = True) -> np.ndarray:
    return np.array([gate(k, dual) for k in np.asarray(kinds).reshape(-1)], dtype=np.int64).reshape(np.shape(kinds))


class LoraBranch(nn.Module):
    """delta(x) = (alpha / r) * up(down(x)), with ``up`` starting at zero."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float | None = None):
        super().__init__()
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.down = nn.Parameter(torch.randn(rank, d_in) / math.sqrt(d_in))
        self.up = nn.Parameter(torch.zeros(d_out, rank))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def forward(self, x: Tensor) -> Tensor:
        return (x @ self.down.t()) @ self.up.t() * self.scale


class GatedLinear(nn.Module):
    def __init__(self, d_in: int, d_out: int, subject_rank: int = 8, image_rank: int = 2, dual: bool = True):
        super().__init__()
        if dual and subject_rank <= image_rank:
            raise ValueError(f"subject rank ({subject_rank}) must exceed image rank ({image_rank})")
        self.dual = dual
        self.base = nn.Linear(d_in, d_out)
        self.subject = LoraBranch(d_in, d_out, subject_rank)
        self.image = LoraBranch(d_in, d_out, image_rank) if dual else None

    def forward(self, x: Tensor, codes: Tensor) -> Tensor:
        """``codes`` holds a Branch value per row, broadcastable to x[..., :1]."""
        out = self.base(x)
        subject_rows = (codes == Branch.SUBJECT).unsqueeze(-1)
        if bool(subject_rows.any()):
            out = torch.where(subject_rows, out + self.subject(x), out)
        if self.image is not None:
            image_rows = (codes == Branch.IMAGE).unsqueeze(-1)
            if bool(image_rows.any()):
                out = torch.where(image_rows, out + self.image(x), out)
        return out

    def lora_branches(self) -> dict[str, LoraBranch]:
        branches = {"subject": self.subject}
        if self.image is not None:
            branches["image"] = self.image
        return branches


def gated_project(x: Tensor, labels, layer: GatedLinear) -> Tensor:
    """Project rows of ``x`` (..., L, d_in) with the branch chosen by each row's segment label."""
    labels = np.asarray(labels)
    if labels.shape[-1] != x.shape[-2]:
        raise ValueError(f"{labels.shape[-1]} labels for {x.shape[-2]} rows")
    codes = torch.from_numpy(gate_codes(labels, layer.dual))
    return layer(x, codes)


def trainable_parameters(module: nn.Module) -> list[nn.Parameter]:
    """LoRA branch matrices only; base weights are never included."""
    params = []
    for sub in module.modules():
        if isinstance(sub, LoraBranch):
            params.extend([sub.down, sub.up])
    return params


def freeze_base(module: nn.Module) -> None:
    """Switch off gradients for everything except LoRA branches."""
    lora = {id(p) for p in trainable_parameters(module)}
    for p in module.parameters():
        p.requires_grad_(id(p) in lora)
