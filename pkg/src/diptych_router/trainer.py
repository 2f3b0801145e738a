"""Rectified-flow objective, text-to-image base pretraining and the three-stage LoRA curriculum."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Corpus, TrainingSample, curriculum_batch, make_diptych, single_sample
from .layout import PromptSpanTable
from .lora import freeze_base, trainable_parameters
from .model import ModelConfig, Routing, ToyMMDiT
from .numerics import backward
from .vocab import pad

logger = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainConfig:
    stage_iters: tuple[int, int, int] = (2000, 1000, 1000)
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    static_routing: bool = True
    dynamic_routing: bool = True
    diptych: bool = True
    dual_lora: bool = True
    debug: bool = False
    base_checkpoint: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.stage_iters = tuple(int(i) for i in self.stage_iters)
        if len(self.stage_iters) != 3 or any(i < 0 for i in self.stage_iters):
            raise ValueError(f"stage_iters must be three counts >= 0, got {self.stage_iters}")
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_json(self.model)
        if self.model.dual_lora != self.dual_lora:
            self.model = replace(self.model, dual_lora=self.dual_lora)

    def to_json(self) -> dict:
        out = asdict(self)
        out["stage_iters"] = list(self.stage_iters)
        return out

    @classmethod
    def from_json(cls, payload: dict) -> "TrainConfig":
        return cls(**payload)

    def routing(self) -> Routing:
        return Routing(static=self.static_routing, dynamic=self.dynamic_routing, audit=self.debug)


@dataclass
class PretrainConfig:
    iters: int = 10000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    composite: float = 0.5  # share of two-subject side-by-side targets
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_json(self.model)
        if not 0.0 <= self.composite <= 1.0:
            raise ValueError(f"composite share must lie in [0, 1], got {self.composite}")

    def to_json(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ batches


def to_model_space(image) -> torch.Tensor:
    return torch.as_tensor(np.asarray(image), dtype=torch.float32) * 2.0 - 1.0


def from_model_space(x: torch.Tensor) -> np.ndarray:
    return ((x.detach().to(torch.float32) + 1.0) / 2.0).clamp(0.0, 1.0).numpy()


@dataclass
class Batch:
    target: torch.Tensor  # (B, H, W, 3) model space
    cond_images: torch.Tensor | None  # (B, c, e, e, 3)
    cond_tokens: torch.Tensor | None  # (B, c, m')
    prompt: torch.Tensor  # (B, m)
    spans: list[PromptSpanTable]

    @property
    def c(self) -> int:
        return 0 if self.cond_images is None else self.cond_images.shape[1]


def collate(samples: Sequence[TrainingSample], config: ModelConfig, text_only: bool = False) -> Batch:
    """Stack samples that share a condition count. ``text_only`` drops the conditions (c = 0)."""
    cs = {0 if text_only else s.c for s in samples}
    if len(cs) != 1:
        raise ValueError(f"cannot collate mixed condition counts {sorted(cs)}")
    c = cs.pop()
    target = torch.stack([to_model_space(s.target_image) for s in samples])
    prompt = torch.tensor([pad(s.target_prompt, config.max_m) for s in samples], dtype=torch.long)
    if c == 0:
        return Batch(target, None, None, prompt, [])
    cond_images = torch.stack([torch.stack([to_model_space(im) for im in s.cond_images]) for s in samples])
    for s in samples:
        for p in s.cond_prompts:
            if len(p) != config.m_prime:
                raise ValueError(f"condition prompt has {len(p)} tokens, model expects {config.m_prime}")
    cond_tokens = torch.tensor([s.cond_prompts for s in samples], dtype=torch.long)
    return Batch(target, cond_images, cond_tokens, prompt, [s.spans for s in samples])


def group_by_c(samples: Sequence[TrainingSample]) -> list[list[TrainingSample]]:
    groups: dict[int, list[TrainingSample]] = {}
    for s in samples:
        groups.setdefault(s.c, []).append(s)
    return [groups[c] for c in sorted(groups)]


# --------------------------------------------------------------- objective


def flow_loss(
    model: ToyMMDiT,
    batch: Batch,
    generator: torch.Generator,
    route: Routing | None = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """Rectified-flow MSE on the noisy target only.

    x_t = (1 - t) x0 + t eps, target velocity eps - x0. Condition and prompt
    tokens carry no reconstruction term.
    """
    x0 = batch.target
    B = x0.shape[0]
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    t = torch.rand(B, generator=generator, dtype=x0.dtype)
    tb = t.view(B, 1, 1, 1)
    x_t = (1 - tb) * x0 + tb * eps
    v = model(x_t, t, batch.cond_images, batch.cond_tokens, batch.prompt, batch.spans or None, route)
    sq = (v - (eps - x0)) ** 2
    return sq.mean() if reduction == "mean" else sq.sum()


def mixed_loss(model: ToyMMDiT, samples: Sequence[TrainingSample], generator: torch.Generator, route: Routing) -> torch.Tensor:
    """Mean per-pixel loss over a batch whose samples may differ in condition count."""
    total, count = 0.0, 0
    for group in group_by_c(samples):
        batch = collate(group, model.config)
        total = total + flow_loss(model, batch, generator, route, reduction="sum")
        count += batch.target.numel()
    return total / count


def check_finite(loss: torch.Tensor, where: str) -> None:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericalAbort(f"non-finite loss {value} at {where}")


def set_single_threaded() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def make_model(config: ModelConfig, seed: int, base_checkpoint: str | None = None) -> ToyMMDiT:
    torch.manual_seed(seed)
    if base_checkpoint is None:
        return ToyMMDiT(config)
    model, _ = load_checkpoint(base_checkpoint, config)
    return model


# ---------------------------------------------------------------- pretrain


def pretrain_sample(corpus: Corpus, rng: np.random.Generator, composite: float) -> TrainingSample:
    """A text-to-image target: one subject, or two side by side (random or same-category pair)."""
    if len(corpus.subjects) < 2 or rng.random() >= composite:
        return single_sample(corpus.pick(int(rng.integers(len(corpus.subjects))), rng))
    if corpus.pairable and rng.random() < 0.5:
        category = corpus.pairable[rng.integers(len(corpus.pairable))]
        i, j = rng.choice(corpus.by_category[category], size=2, replace=False)
    else:
        i, j = rng.choice(len(corpus.subjects), size=2, replace=False)
    return make_diptych(corpus.pick(int(i), rng), corpus.pick(int(j), rng))


def pretrain(config: PretrainConfig, corpus: Corpus, out: str | Path | None = None) -> ToyMMDiT:
    """Full-parameter text-to-image training (c = 0): the stand-in for a pretrained backbone.

    Targets mix single subjects with two-subject side-by-side scenes so the
    backbone can already lay out a multi-subject prompt from text alone.
    """
    torch.manual_seed(config.seed)
    model = ToyMMDiT(config.model)
    lora = {id(p) for p in trainable_parameters(model)}
    params = [p for p in model.parameters() if id(p) not in lora]
    for p in model.parameters():
        p.requires_grad_(id(p) not in lora)
    opt = torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: min(1.0, (i + 1) / 200) * 0.5 * (1 + math.cos(math.pi * i / max(config.iters, 1))))
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    route = Routing(static=False, dynamic=False)
    rows = []
    for it in range(1, config.iters + 1):
        samples = [pretrain_sample(corpus, rng, config.composite) for _ in range(config.batch_size)]
        loss = flow_loss(model, collate(samples, config.model, text_only=True), gen, route)
        check_finite(loss, f"pretrain iter {it}")
        opt.zero_grad(set_to_none=True)
        backward(loss)
        opt.step()
        sched.step()
        rows.append((it, 0, float(loss.detach())))
        if it % 250 == 0:
            logger.info("pretrain iter %d loss %.4f", it, np.mean([r[2] for r in rows[-250:]]))
    if out is not None:
        out = Path(out)
        save_checkpoint(out, model, step=config.iters, stage="base", extra={"pretrain": config.to_json()})
        _write_loss_csv(out.with_suffix(".loss.csv"), rows)
    return model


# ------------------------------------------------------------------- train


@dataclass
class TrainResult:
    model: ToyMMDiT
    losses: list[tuple[int, int, float]]
    checkpoints: list[Path]


def _write_loss_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "stage", "loss"])
        for it, stage, loss in rows:
            w.writerow([it, stage, repr(float(loss))])


def train(config: TrainConfig, corpus: Corpus, out: str | Path | None = None, on_step=None) -> TrainResult:
    """Run stages 1 -> 2 -> 3, optimising only the LoRA branches.

    A checkpoint is written at every stage boundary when ``out`` is given,
    along with ``loss.csv``. ``on_step(iter, stage, loss, samples)`` is an
    optional observer.
    """
    model = make_model(config.model, config.seed, config.base_checkpoint)
    freeze_base(model)
    params = trainable_parameters(model)
    opt = torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    route = config.routing()
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    losses: list[tuple[int, int, float]] = []
    checkpoints: list[Path] = []
    it = 0
    started = time.time()
    for stage, iters in zip((1, 2, 3), config.stage_iters):
        for _ in range(iters):
            it += 1
            samples = [curriculum_batch(stage, corpus, rng, config.diptych) for _ in range(config.batch_size)]
            loss = mixed_loss(model, samples, gen, route)
            check_finite(loss, f"iter {it} (stage {stage})")
            opt.zero_grad(set_to_none=True)
            backward(loss)
            opt.step()
            value = float(loss.detach())
            losses.append((it, stage, value))
            if on_step is not None:
                on_step(it, stage, value, samples)
            if it % 250 == 0:
                logger.info("iter %d stage %d loss %.4f (%.0fs)", it, stage, np.mean([r[2] for r in losses[-250:]]), time.time() - started)
        if out is not None:
            checkpoints.append(save_checkpoint(out / f"stage{stage}.ckpt", model, step=it, stage=stage,
                                               extra={"train": config.to_json()}))
    if out is not None:
        _write_loss_csv(out / "loss.csv", losses)
    return TrainResult(model, losses, checkpoints)


def load_train_config(path: str | Path) -> TrainConfig:
    return TrainConfig.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
