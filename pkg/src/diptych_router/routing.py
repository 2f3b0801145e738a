"""Static and dynamic attention routing.

The static mask cuts prompt <-> condition traffic and traffic between
different conditions. The dynamic mask is recomputed from each layer's
attention: every noise token is assigned to the condition whose prompt
mention it attends to most, and its attention to the other conditions is cut.
Both are boolean "blocked" matrices that are OR-ed and then turned into the
additive mask fed to the masked softmax.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .imageio import write_pgm
from .layout import PromptSpanTable, SequenceLayout
from .numerics import BLOCKED, Tensor


@dataclass(frozen=True)
class FlowMask:
    """Blocked-pair matrix of shape (..., L, L); True means attention is cut."""

    blocked: Tensor
    layout: SequenceLayout

    def __post_init__(self):
        L = self.layout.L
        if self.blocked.dtype != torch.bool or tuple(self.blocked.shape[-2:]) != (L, L):
            raise ValueError(f"expected bool (..., {L}, {L}) mask, got {self.blocked.dtype} {tuple(self.blocked.shape)}")

    @classmethod
    def empty(cls, layout: SequenceLayout) -> "FlowMask":
        return cls(torch.zeros(layout.L, layout.L, dtype=torch.bool), layout)

    def additive(self, dtype=torch.float32) -> Tensor:
        zeros = torch.zeros(self.blocked.shape, dtype=dtype)
        return zeros.masked_fill(self.blocked, BLOCKED)

    def count(self) -> int:
        return int(self.blocked.sum())

    def to_pgm(self, path: str | Path) -> None:
        """blocked -> 0, open -> 255."""
        if self.blocked.ndim != 2:
            raise ValueError("only a single L×L mask can be written as PGM")
        write_pgm(path, np.where(self.blocked.numpy(), 0, 255).astype(np.uint8))


def build_static_mask(layout: SequenceLayout) -> FlowMask:
    L, cl = layout.L, layout.cond_len
    blocked = torch.zeros(L, L, dtype=torch.bool)
    if layout.c == 0:
        return FlowMask(blocked, layout)
    prompt = layout.prompt
    blocked[prompt, :cl] = True
    blocked[:cl, prompt] = True
    block_id = torch.arange(cl) // layout.l_prime
    blocked[:cl, :cl] = block_id[:, None] != block_id[None, :]
    return FlowMask(blocked, layout)


def compute_similarity(q_x: Tensor, k_t: Tensor, d: int | None = None) -> Tensor:
    """Noise-to-prompt attention ``softmax(Q_X K_T^T / sqrt(d))``, shape (..., n, m)."""
    if k_t.shape[-2] == 0:
        raise ValueError("similarity needs at least one prompt token")
    d = q_x.shape[-1] if d is None else d
    if d <= 0:
        raise ValueError("d must be positive")
    return torch.softmax(q_x @ k_t.transpose(-1, -2) / math.sqrt(d), dim=-1)


@dataclass(frozen=True)
class AffinityMatrix:
    values: Tensor  # (..., n, c)

    def to_json(self) -> list:
        return self.values.detach().to(torch.float64).tolist()

    def to_pgm(self, path: str | Path, k: int, grid: tuple[int, int]) -> None:
        write_pgm(path, affinity_image(self.values, k, grid))


def affinity_image(values: Tensor, k: int, grid: tuple[int, int]) -> np.ndarray:
    """Pixel (y, x) = 255 * S*[token at (y, x), k] over the noise-token grid."""
    col = values[..., k].detach().to(torch.float64).numpy()
    if col.ndim != 1 or col.shape[0] != grid[0] * grid[1]:
        raise ValueError(f"cannot map {col.shape} affinities onto grid {grid}")
    return np.rint(np.clip(col, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(grid)


def compute_affinity(S: Tensor, spans: PromptSpanTable, c: int) -> AffinityMatrix:
    """Average the similarity over each condition's prompt span: (..., n, m) -> (..., n, c)."""
    if c < 1:
        raise ValueError("affinity needs at least one condition")
    spans.validate(S.shape[-1], c)
    cols = [S[..., p : p + length].mean(dim=-1) for p, length in spans]
    return AffinityMatrix(torch.stack(cols, dim=-1))


def span_pooling_matrix(spans: PromptSpanTable, m: int, dtype=torch.float32) -> Tensor:
    """(m, c) matrix P with S @ P == compute_affinity(S).values."""
    pool = torch.zeros(m, len(spans), dtype=dtype)
    for k, (p, length) in enumerate(spans):
        pool[p : p + length, k] = 1.0 / length
    return pool


def route(affinity: AffinityMatrix | Tensor) -> Tensor:
    """Index of the highest-affinity condition per noise token; ties go to the lowest index."""
    values = affinity.values if isinstance(affinity, AffinityMatrix) else affinity
    # torch.argmax returns the first maximal index
    return torch.argmax(values, dim=-1)


def build_dynamic_mask(assignment: Tensor, layout: SequenceLayout) -> FlowMask:
    """Block noise row i from every condition column outside block ``assignment[i]``.

    ``assignment`` has shape (..., n); the mask gets the same leading dims.
    """
    assignment = torch.as_tensor(assignment, dtype=torch.long)
    if assignment.shape[-1] != layout.n:
        raise ValueError(f"assignment covers {assignment.shape[-1]} tokens, layout has n={layout.n}")
    lead = tuple(assignment.shape[:-1])
    blocked = torch.zeros(lead + (layout.L, layout.L), dtype=torch.bool)
    if layout.c == 0 or layout.n == 0:
        return FlowMask(blocked, layout)
    if bool(((assignment < 0) | (assignment >= layout.c)).any()):
        raise ValueError(f"assignment entries must lie in [0, {layout.c})")
    block_id = torch.arange(layout.cond_len) // layout.l_prime
    blocked[..., layout.noise, : layout.cond_len] = block_id != assignment.unsqueeze(-1)
    return FlowMask(blocked, layout)


def combine(first: FlowMask, second: FlowMask) -> FlowMask:
    if first.layout != second.layout:
        raise ValueError("cannot combine masks built for different layouts")
    return FlowMask(first.blocked | second.blocked, first.layout)


def audit_routing(mask: FlowMask, expected_open: int | None = None) -> None:
    """Check that each noise row sees exactly ``expected_open`` condition columns.

    With the default (``l_prime``) the open columns must also sit in a single
    condition block, i.e. routing is one-to-one. Raises AssertionError.
    """
    layout = mask.layout
    if layout.c == 0:
        return
    expected_open = layout.l_prime if expected_open is None else expected_open
    rows = mask.blocked[..., layout.noise, : layout.cond_len]
    open_cols = ~rows
    counts = open_cols.sum(dim=-1)
    if not bool((counts == expected_open).all()):
        bad = sorted(set(counts.flatten().tolist()) - {expected_open})
        raise AssertionError(f"noise rows see {bad} condition columns, expected {expected_open}")
    if expected_open == layout.l_prime:
        per_block = open_cols.reshape(*open_cols.shape[:-1], layout.c, layout.l_prime).any(dim=-1)
        if not bool((per_block.sum(dim=-1) == 1).all()):
            raise AssertionError("a noise row sees condition columns from more than one block")


def export_affinity_json(path: str | Path, affinity: AffinityMatrix) -> None:
    Path(path).write_text(json.dumps(affinity.to_json()), encoding="utf-8")
