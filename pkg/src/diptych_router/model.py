"""Toy multi-modal diffusion transformer.

Condition images, condition prompts, the target prompt and the noisy target
are embedded into one token sequence and processed by a stack of blocks that
run masked self-attention over all of it. Pixels are patchified directly;
there is no VAE.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import routing
from .layout import Kind, PromptSpanTable, SequenceLayout, segment_kinds
from .lora import GatedLinear, gate_codes
from .numerics import Tensor, layer_norm, softmax_masked
from .vocab import VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 4
    layers: int = 4
    patch: int = 4
    image_edge: int = 32
    cond_edge: int = 16
    vocab: int = VOCAB_SIZE
    max_m: int = 16
    m_prime: int = 4
    mlp_ratio: int = 4
    subject_rank: int = 8
    image_rank: int = 2
    dual_lora: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if (self.d // self.heads) % 2 or self.d % 4:
            raise ValueError("d must be a multiple of 4 and the head width even")
        for name in ("image_edge", "cond_edge"):
            if getattr(self, name) % self.patch:
                raise ValueError(f"{name}={getattr(self, name)} is not divisible by patch={self.patch}")

    @property
    def n(self) -> int:
        return (self.image_edge // self.patch) ** 2

    @property
    def n_prime(self) -> int:
        return (self.cond_edge // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch

    def layout(self, c: int) -> SequenceLayout:
        return SequenceLayout(c, self.n_prime, self.m_prime, self.max_m, self.n)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "ModelConfig":
        return cls(**payload)


@dataclass
class Routing:
    """Per-call routing switches and optional recorders."""

    static: bool = True
    dynamic: bool = True
    per_head: bool = False
    audit: bool = False
    trace: list | None = None


class TokenBatch(NamedTuple):
    tokens: Tensor  # (B, L, d)
    layout: SequenceLayout
    kinds: np.ndarray  # (L,) Kind codes


# ---------------------------------------------------------------- patches


def patchify(image: Tensor, patch: int) -> Tensor:
    """(..., H, W, 3) -> (..., H/p * W/p, 3 p^2), tokens in row-major grid order."""
    *lead, H, W, C = image.shape
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} is not divisible by patch {patch}")
    gh, gw = H // patch, W // patch
    x = image.reshape(*lead, gh, patch, gw, patch, C)
    x = x.transpose(-4, -3)  # (..., gh, gw, p, p, C)
    return x.reshape(*lead, gh * gw, patch * patch * C)


def unpatchify(tokens: Tensor, patch: int, height: int, width: int) -> Tensor:
    *lead, n, _ = tokens.shape
    gh, gw = height // patch, width // patch
    if n != gh * gw:
        raise ValueError(f"{n} tokens cannot tile a {height}x{width} image with patch {patch}")
    x = tokens.reshape(*lead, gh, gw, patch, patch, 3)
    x = x.transpose(-4, -3)
    return x.reshape(*lead, height, width, 3)


# -------------------------------------------------------------- positions


class Positions(NamedTuple):
    grid: np.ndarray  # (L, 2) (y, x) in pixels for image tokens, NaN for text
    text: np.ndarray  # (L,) sequential index for text tokens, -1 for image tokens


def embed_positions(layout: SequenceLayout, config: ModelConfig) -> Positions:
    """Noise tokens sit on the target grid; condition k is shifted right by (k+1) image widths."""
    p = config.patch
    grid = np.full((layout.L, 2), np.nan)
    text = np.full(layout.L, -1, dtype=np.int64)

    def cells(edge):
        g = edge // p
        ys, xs = np.divmod(np.arange(g * g), g)
        return np.stack([ys * p, xs * p], axis=1).astype(np.float64)

    cond_cells = cells(config.cond_edge)[: layout.n_prime]
    for k in range(layout.c):
        sl = layout.condition_image(k)
        grid[sl] = cond_cells + np.array([0.0, (k + 1) * config.image_edge])
        text[layout.condition_text(k)] = np.arange(layout.m_prime)
    text[layout.prompt] = np.arange(layout.m)
    grid[layout.noise] = cells(config.image_edge)[: layout.n]
    return Positions(grid, text)


def sinusoid(values: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = values.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def position_features(layout: SequenceLayout, config: ModelConfig) -> Tensor:
    pos = embed_positions(layout, config)
    d = config.d
    feats = torch.zeros(layout.L, d, dtype=torch.float64)
    is_img = ~np.isnan(pos.grid[:, 0])
    if is_img.any():
        g = torch.from_numpy(pos.grid[is_img])
        feats[torch.from_numpy(is_img)] = torch.cat([sinusoid(g[:, 0], d // 2, 256.0), sinusoid(g[:, 1], d // 2, 256.0)], dim=-1)
    is_txt = pos.text >= 0
    if is_txt.any():
        feats[torch.from_numpy(is_txt)] = sinusoid(torch.from_numpy(pos.text[is_txt]).double(), d, 64.0)
    return feats.float()


# ----------------------------------------------------------------- blocks


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale.unsqueeze(-2)) + shift.unsqueeze(-2)


class MMABlock(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d
        self.heads = config.heads
        lora = dict(subject_rank=config.subject_rank, image_rank=config.image_rank, dual=config.dual_lora)
        self.ada = nn.Linear(d, 6 * d)
        self.q = GatedLinear(d, d, **lora)
        self.k = GatedLinear(d, d, **lora)
        self.v = GatedLinear(d, d, **lora)
        self.o = GatedLinear(d, d, **lora)
        self.fc1 = GatedLinear(d, config.mlp_ratio * d, **lora)
        self.fc2 = GatedLinear(config.mlp_ratio * d, d, **lora)

    def split(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        return x.reshape(B, L, self.heads, d // self.heads).transpose(1, 2)

    def forward(
        self,
        x: Tensor,
        t_emb: Tensor,
        codes: Tensor,
        static: routing.FlowMask,
        pool: Tensor | None = None,
        route: Routing | None = None,
    ) -> Tensor:
        """One block. ``pool`` (B, m, c) span-averaging matrices enable dynamic routing."""
        layout = static.layout
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(F.silu(t_emb)).chunk(6, dim=-1)

        h = modulate(layer_norm(x), shift1, scale1)
        q, k, v = self.split(self.q(h, codes)), self.split(self.k(h, codes)), self.split(self.v(h, codes))
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])  # (B, H, L, L)

        mask = static
        if pool is not None and layout.c > 0:
            mask = routing.combine(static, self._dynamic_mask(logits, pool, layout, route))
        if route is not None and route.audit and layout.c > 0:
            expected = layout.l_prime if (pool is not None and layout.c > 0) else layout.c * layout.l_prime
            routing.audit_routing(mask, expected)
        additive = mask.additive(logits.dtype)
        if additive.ndim == 3:
            additive = additive.unsqueeze(1)

        attn = softmax_masked(logits, additive)
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        x = x + gate1.unsqueeze(-2) * self.o(out, codes)

        h = modulate(layer_norm(x), shift2, scale2)
        return x + gate2.unsqueeze(-2) * self.fc2(F.gelu(self.fc1(h, codes)), codes)

    def _dynamic_mask(self, logits: Tensor, pool: Tensor, layout: SequenceLayout, route: Routing | None) -> routing.FlowMask:
        with torch.no_grad():
            # the noise->prompt slice of the raw logits is Q_X K_T^T / sqrt(d_head)
            S = torch.softmax(logits[..., layout.noise, layout.prompt], dim=-1)  # (B, H, n, m)
            per_head = route is not None and route.per_head
            if not per_head:
                S = S.mean(dim=1)
                aff = S @ pool
            else:
                aff = S @ pool.unsqueeze(1)
            assignment = routing.route(aff)
            if route is not None and route.trace is not None:
                route.trace.append((aff.detach().clone(), assignment.clone()))
        return routing.build_dynamic_mask(assignment, layout)


class TimestepEmbedding(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))

    def forward(self, t: Tensor) -> Tensor:
        return self.mlp(sinusoid(t * 1000.0, self.d).to(self.mlp[0].weight.dtype))


class ToyMMDiT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d
        self.patch_embed = nn.Linear(config.patch_dim, d)
        self.text_embed = nn.Embedding(config.vocab, d)
        self.kind_embed = nn.Embedding(len(Kind), d)
        self.t_embed = TimestepEmbedding(d)
        self.blocks = nn.ModuleList(MMABlock(config) for _ in range(config.layers))
        self.final_ada = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, config.patch_dim)
        self._pos_cache: dict[SequenceLayout, Tensor] = {}
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for block in self.blocks:
            nn.init.zeros_(block.ada.weight)
            nn.init.zeros_(block.ada.bias)
        nn.init.normal_(self.text_embed.weight, std=0.5)
        nn.init.normal_(self.kind_embed.weight, std=0.5)
        nn.init.zeros_(self.final_ada.weight)
        nn.init.zeros_(self.final_ada.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def positions(self, layout: SequenceLayout) -> Tensor:
        if layout not in self._pos_cache:
            self._pos_cache[layout] = position_features(layout, self.config)
        return self._pos_cache[layout].to(self.patch_embed.weight.dtype)

    def embed(self, x_t: Tensor, cond_images: Tensor | None, cond_tokens: Tensor | None, prompt: Tensor) -> TokenBatch:
        cfg = self.config
        B = x_t.shape[0]
        c = 0 if cond_images is None else cond_images.shape[1]
        layout = cfg.layout(c)
        if prompt.shape != (B, cfg.max_m):
            raise ValueError(f"prompt tokens must have shape ({B}, {cfg.max_m}), got {tuple(prompt.shape)}")
        parts = []
        for k in range(c):
            parts.append(self.patch_embed(patchify(cond_images[:, k], cfg.patch)))
            parts.append(self.text_embed(cond_tokens[:, k]))
        parts.append(self.text_embed(prompt))
        parts.append(self.patch_embed(patchify(x_t, cfg.patch)))
        kinds = segment_kinds(layout)
        tokens = torch.cat(parts, dim=1) + self.positions(layout) + self.kind_embed(torch.from_numpy(kinds))
        return TokenBatch(tokens, layout, kinds)

    def run_blocks(
        self,
        batch: TokenBatch,
        t: Tensor,
        spans: Sequence[PromptSpanTable] | None,
        route: Routing,
    ) -> Tensor:
        layout = batch.layout
        t_emb = self.t_embed(t)
        codes = torch.from_numpy(gate_codes(batch.kinds, self.config.dual_lora))
        static = routing.build_static_mask(layout) if route.static else routing.FlowMask.empty(layout)
        pool = None
        if route.dynamic and layout.c >= 1:
            if spans is None or len(spans) != t.shape[0]:
                raise ValueError("dynamic routing needs one span table per sample")
            pool = torch.stack([routing.span_pooling_matrix(s, layout.m) for s in spans]).to(batch.tokens.dtype)
        x = batch.tokens
        for block in self.blocks:
            x = block(x, t_emb, codes, static, pool, route)
        return x

    def forward(
        self,
        x_t: Tensor,
        t: Tensor,
        cond_images: Tensor | None,
        cond_tokens: Tensor | None,
        prompt: Tensor,
        spans: Sequence[PromptSpanTable] | None = None,
        route: Routing | None = None,
    ) -> Tensor:
        """Velocity for the noisy target ``x_t`` (B, H, W, 3) at times ``t`` (B,)."""
        cfg = self.config
        route = route or Routing()
        if spans is not None:
            for s in spans:
                s.validate(cfg.max_m, 0 if cond_images is None else cond_images.shape[1])
        batch = self.embed(x_t, cond_images, cond_tokens, prompt)
        x = self.run_blocks(batch, t, spans, route)
        noise = x[:, batch.layout.noise]
        shift, scale = self.final_ada(F.silu(self.t_embed(t))).chunk(2, dim=-1)
        out = self.head(modulate(layer_norm(noise), shift, scale))
        return unpatchify(out, cfg.patch, x_t.shape[1], x_t.shape[2])


def mma_block(batch: TokenBatch, mask: routing.FlowMask, t_emb: Tensor, block: MMABlock, dual: bool = True) -> Tensor:
    """Apply one block with a fixed flow mask (no dynamic routing)."""
    codes = torch.from_numpy(gate_codes(batch.kinds, dual))
    return block(batch.tokens, t_emb, codes, mask)
