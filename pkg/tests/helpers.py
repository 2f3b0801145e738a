"""Shared builders for model-level tests."""

import torch

from diptych_router.layout import PromptSpanTable
from diptych_router.model import ToyMMDiT


def randomize(model: ToyMMDiT, seed: int = 0, scale: float = 0.3) -> ToyMMDiT:
    """Give every parameter (zero-initialised gates and LoRA ups included) a random value."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * scale)
    return model


def random_inputs(config, batch: int, c: int, seed: int = 0, dtype=torch.float32, amplitude: float = 1.0):
    """Random noisy target, conditions, prompt and spans (condition k mentioned at k*m')."""
    g = torch.Generator().manual_seed(seed)
    e, ce, mp = config.image_edge, config.cond_edge, config.m_prime
    x_t = (torch.rand(batch, e, e, 3, generator=g, dtype=torch.float64) * 2 - 1) * amplitude
    t = torch.rand(batch, generator=g, dtype=torch.float64)
    prompt = torch.randint(0, config.vocab, (batch, config.max_m), generator=g)
    cond_images = cond_tokens = spans = None
    if c > 0:
        cond_images = (torch.rand(batch, c, ce, ce, 3, generator=g, dtype=torch.float64) * 2 - 1) * amplitude
        cond_tokens = torch.stack([prompt[:, k * mp:(k + 1) * mp] for k in range(c)], dim=1)
        spans = [PromptSpanTable.of([(k * mp, mp) for k in range(c)])] * batch
        cond_images = cond_images.to(dtype)
    return x_t.to(dtype), t.to(dtype), cond_images, cond_tokens, prompt, spans
