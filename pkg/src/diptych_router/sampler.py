"""Euler sampling of the learned velocity field, with optional affinity tracing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .imageio import write_pgm
from .layout import PromptSpanTable
from .model import Routing, ToyMMDiT
from .routing import AffinityMatrix, affinity_image
from .trainer import from_model_space, to_model_space
from .vocab import pad


@dataclass
class SampleRequest:
    cond_images: list[np.ndarray]
    cond_prompts: list[list[int]]
    prompt: list[int]
    spans: PromptSpanTable | None = None
    steps: int = 20
    seed: int = 0
    static_routing: bool = True
    dynamic_routing: bool = True
    trace: bool = False
    trace_every: int = 5
    audit: bool = False

    @property
    def c(self) -> int:
        return len(self.cond_images)

    def resolved_spans(self) -> PromptSpanTable:
        if self.spans is not None:
            return self.spans
        return find_spans(self.prompt, self.cond_prompts)


@dataclass
class TraceEntry:
    step: int
    t: float
    layer: int
    affinity: AffinityMatrix  # (n, c)
    assignment: torch.Tensor  # (n,)


@dataclass
class SampleResult:
    image: np.ndarray
    trace: list[TraceEntry] = field(default_factory=list)


def find_spans(prompt: Sequence[int], cond_prompts: Sequence[Sequence[int]]) -> PromptSpanTable:
    """Locate each condition's prompt inside the target prompt (first unused occurrence)."""
    prompt = list(prompt)
    used = np.zeros(len(prompt), dtype=bool)
    spans = []
    for k, cp in enumerate(cond_prompts):
        cp = list(cp)
        for p in range(len(prompt) - len(cp) + 1):
            if prompt[p : p + len(cp)] == cp and not used[p : p + len(cp)].any():
                used[p : p + len(cp)] = True
                spans.append((p, len(cp)))
                break
        else:
            raise ValueError(f"condition {k} prompt {cp} is not mentioned in the target prompt {prompt}")
    return PromptSpanTable.of(spans)


def _check_request(model: ToyMMDiT, req: SampleRequest) -> PromptSpanTable:
    cfg = model.config
    if len(req.cond_prompts) != req.c:
        raise ValueError(f"{req.c} condition images but {len(req.cond_prompts)} condition prompts")
    if len(req.prompt) > cfg.max_m:
        raise ValueError(f"prompt has {len(req.prompt)} tokens, budget is {cfg.max_m}")
    for k, (im, cp) in enumerate(zip(req.cond_images, req.cond_prompts)):
        if np.shape(im) != (cfg.cond_edge, cfg.cond_edge, 3):
            raise ValueError(f"condition {k} image has shape {np.shape(im)}, expected {(cfg.cond_edge, cfg.cond_edge, 3)}")
        if len(cp) != cfg.m_prime:
            raise ValueError(f"condition {k} prompt has {len(cp)} tokens, expected {cfg.m_prime}")
    if req.steps < 1:
        raise ValueError("steps must be >= 1")
    if req.c == 0:
        return PromptSpanTable.of([])
    spans = req.resolved_spans()
    spans.validate(len(req.prompt), req.c)
    for k, ((p, length), cp) in enumerate(zip(spans, req.cond_prompts)):
        if list(req.prompt[p : p + length]) != list(cp):
            raise ValueError(f"span {k} = ({p}, {length}) does not point at condition {k}'s prompt")
    return spans


@torch.no_grad()
def sample_many(model: ToyMMDiT, requests: Sequence[SampleRequest]) -> list[SampleResult]:
    """Sample a batch of requests that share condition count, steps and switches."""
    if not requests:
        return []
    first = requests[0]
    for r in requests[1:]:
        if (r.c, r.steps, r.static_routing, r.dynamic_routing, r.trace, r.trace_every, r.audit) != (
            first.c, first.steps, first.static_routing, first.dynamic_routing, first.trace, first.trace_every, first.audit):
            raise ValueError("batched requests must share c, steps, switches and trace settings")
    spans = [_check_request(model, r) for r in requests]
    cfg = model.config
    c = first.c
    x = torch.stack([
        torch.randn((cfg.image_edge, cfg.image_edge, 3), generator=torch.Generator().manual_seed(r.seed))
        for r in requests
    ])
    prompt = torch.tensor([pad(r.prompt, cfg.max_m) for r in requests], dtype=torch.long)
    cond_images = cond_tokens = None
    if c > 0:
        cond_images = torch.stack([torch.stack([to_model_space(im) for im in r.cond_images]) for r in requests])
        cond_tokens = torch.tensor([r.cond_prompts for r in requests], dtype=torch.long)
    traces: list[list[TraceEntry]] = [[] for _ in requests]
    grid = torch.linspace(1.0, 0.0, first.steps + 1)
    was_training = model.training
    model.eval()
    for step in range(first.steps):
        t, t_next = float(grid[step]), float(grid[step + 1])
        record = first.trace and c > 0 and step % first.trace_every == 0
        route = Routing(static=first.static_routing, dynamic=first.dynamic_routing, audit=first.audit,
                        trace=[] if record else None)
        tt = torch.full((len(requests),), t)
        v = model(x, tt, cond_images, cond_tokens, prompt, spans if c > 0 else None, route)
        if record:
            for layer, (aff, assign) in enumerate(route.trace):
                for b in range(len(requests)):
                    traces[b].append(TraceEntry(step, t, layer, AffinityMatrix(aff[b]), assign[b]))
        x = x + (t_next - t) * v
    model.train(was_training)
    return [SampleResult(from_model_space(x[b]), traces[b]) for b in range(len(requests))]


def sample(model: ToyMMDiT, req: SampleRequest) -> SampleResult:
    return sample_many(model, [req])[0]


def export_trace(trace: Sequence[TraceEntry], directory: str | Path, grid: tuple[int, int]) -> list[Path]:
    """One PGM per (step, layer, condition) plus ``trace.json``."""
    if not trace:
        raise ValueError("empty trace")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written, records = [], []
    for entry in trace:
        values = entry.affinity.values
        for k in range(values.shape[-1]):
            path = directory / f"step{entry.step:03d}_layer{entry.layer:02d}_cond{k}.pgm"
            write_pgm(path, affinity_image(values, k, grid))
            written.append(path)
        records.append({
            "step": entry.step,
            "t": entry.t,
            "layer": entry.layer,
            "assignment": entry.assignment.tolist(),
            "affinity": entry.affinity.to_json(),
        })
    (directory / "trace.json").write_text(json.dumps(records), encoding="utf-8")
    return written
