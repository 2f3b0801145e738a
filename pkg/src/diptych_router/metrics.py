"""Desk-scale fidelity metrics and the ablation table.

``identity_similarity`` is a fixed random-projection stand-in for a learned
image encoder; ``attribute_match`` exploits the known subject colours of the
synthetic domain to measure attribute leakage between subjects.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from . import vocab
from .data import Corpus, SubjectSpec, make_composite
from .model import ToyMMDiT
from .sampler import SampleRequest, sample_many

PALETTE = list(vocab.COLORS)
SAT_MIN = 0.45
VAL_MIN = 0.35
EMBED_GRID = 16
EMBED_PATCH = 4
EMBED_DIM = 256
EMBED_SEED = 20240517
CHROMA_DEADZONE = 0.08

VARIANTS = ("full", "no-diptych", "no-bias-mitigation", "no-dynamic-routing")
SCENARIOS = ("c1", "c2_random", "c2_same", "c3")


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    rgb = np.asarray(image, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx, mn = rgb.max(axis=-1), rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4)) * 60.0
    h = np.where(delta > 0, h, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


PALETTE_HUES = np.array([rgb_to_hsv(np.array(vocab.COLORS[c]))[0] for c in PALETTE])


def palette_classes(image: np.ndarray) -> np.ndarray:
    """Nearest palette index by hue for saturated pixels, -1 elsewhere."""
    hsv = rgb_to_hsv(image)
    diff = np.abs(hsv[..., 0:1] - PALETTE_HUES)
    diff = np.minimum(diff, 360.0 - diff)
    cls = diff.argmin(axis=-1)
    fg = (hsv[..., 1] >= SAT_MIN) & (hsv[..., 2] >= VAL_MIN)
    return np.where(fg, cls, -1)


# ---------------------------------------------------------------- identity


_PROJECTION = np.random.default_rng(EMBED_SEED).normal(size=(3 * EMBED_PATCH**2, EMBED_DIM)) / np.sqrt(3 * EMBED_PATCH**2)


def resize(image: np.ndarray, edge: int = EMBED_GRID) -> np.ndarray:
    x = torch.as_tensor(np.asarray(image, dtype=np.float64)).permute(2, 0, 1)[None]
    if x.shape[-2:] == (edge, edge):
        return np.asarray(image, dtype=np.float64)
    x = F.interpolate(x, size=(edge, edge), mode="bilinear", align_corners=False, antialias=True)
    return x[0].permute(1, 2, 0).numpy()


def embed(image: np.ndarray) -> np.ndarray:
    """Mean over patches of tanh(random projection of chroma).

    Chroma (pixel minus its grey level) with a small dead zone drops
    background luminance and tint. Every step is odd, so embed(-x) = -embed(x).
    """
    x = resize(image)
    x = x - x.mean(axis=-1, keepdims=True)
    x = np.sign(x) * np.maximum(np.abs(x) - CHROMA_DEADZONE, 0.0)
    g = EMBED_GRID // EMBED_PATCH
    patches = x.reshape(g, EMBED_PATCH, g, EMBED_PATCH, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, -1)
    return np.tanh(patches @ _PROJECTION).mean(axis=0)


def identity_similarity(gen_region: np.ndarray, ref_image: np.ndarray) -> float:
    a, b = embed(gen_region), embed(ref_image)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# --------------------------------------------------------------- attributes


@dataclass
class RegionEntry:
    condition: int
    region: tuple[int, int]  # column range [x0, x1)
    color: str | None
    texture_score: float
    expected: str
    match: bool


@dataclass
class RegionReport:
    entries: list[RegionEntry]

    @property
    def match_rate(self) -> float:
        return float(np.mean([e.match for e in self.entries])) if self.entries else 0.0


def strip_bounds(width: int, c: int, k: int) -> tuple[int, int]:
    return (k * width) // c, ((k + 1) * width) // c


def dominant_blob(image: np.ndarray) -> tuple[str | None, np.ndarray]:
    """Palette colour of the largest connected same-colour blob, and that blob's mask."""
    cls = palette_classes(image)
    best, best_size, best_mask = None, 0, np.zeros(cls.shape, dtype=bool)
    for idx in np.unique(cls[cls >= 0]):
        labels, count = ndimage.label(cls == idx)
        if count == 0:
            continue
        sizes = np.bincount(labels.ravel())[1:]
        j = int(sizes.argmax())
        if sizes[j] > best_size:
            best, best_size, best_mask = PALETTE[int(idx)], int(sizes[j]), labels == j + 1
    return best, best_mask


def texture_score(image: np.ndarray, blob: np.ndarray) -> float:
    """Fraction of light, weakly saturated pixels inside the blob's bounding box."""
    if not blob.any():
        return 0.0
    ys, xs = np.nonzero(blob)
    box = image[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
    hsv = rgb_to_hsv(box)
    light = (hsv[..., 2] > 0.8) & (hsv[..., 1] > 0.1) & (hsv[..., 1] < SAT_MIN)
    return float(light.mean())


def attribute_match(gen_image: np.ndarray, specs: Sequence[SubjectSpec]) -> RegionReport:
    """Condition k is read from the k-th of c vertical strips (the prompt's column order)."""
    c = len(specs)
    width = gen_image.shape[1]
    entries = []
    for k, spec in enumerate(specs):
        x0, x1 = strip_bounds(width, c, k)
        region = gen_image[:, x0:x1]
        color, blob = dominant_blob(region)
        entries.append(RegionEntry(k, (x0, x1), color, texture_score(region, blob), spec.color, color == spec.color))
    return RegionReport(entries)


def region_similarity(gen_image: np.ndarray, cond_images: Sequence[np.ndarray]) -> float:
    c = len(cond_images)
    width = gen_image.shape[1]
    sims = []
    for k, ref in enumerate(cond_images):
        x0, x1 = strip_bounds(width, c, k)
        sims.append(identity_similarity(gen_image[:, x0:x1], ref))
    return float(np.mean(sims))


# ------------------------------------------------------------------- suite


@dataclass
class TestCase:
    scenario: str
    subjects: list[int]


def make_cases(testset: Corpus, scenario: str, count: int, seed: int) -> list[TestCase]:
    rng = np.random.default_rng([seed, SCENARIOS.index(scenario)])
    n = len(testset.subjects)
    cases = []
    for _ in range(count):
        if scenario == "c1":
            picks = [int(rng.integers(n))]
        elif scenario == "c2_random":
            picks = [int(i) for i in rng.choice(n, size=2, replace=False)]
        elif scenario == "c2_same":
            cat = testset.pairable[rng.integers(len(testset.pairable))]
            picks = [int(i) for i in rng.choice(testset.by_category[cat], size=2, replace=False)]
        elif scenario == "c3":
            picks = [int(i) for i in rng.choice(n, size=3, replace=False)]
        else:
            raise ValueError(f"unknown scenario {scenario!r}")
        cases.append(TestCase(scenario, picks))
    return cases


def case_request(testset: Corpus, case: TestCase, seed: int, steps: int, static: bool, dynamic: bool) -> tuple[SampleRequest, list[SubjectSpec]]:
    samples = [testset.samples[testset.views[j][0]] for j in case.subjects]
    if len(samples) == 1:
        s = samples[0]
        cond_images, cond_prompts, prompt = [s.cond_image], [s.cond_prompt], list(s.cond_prompt)
    else:
        comp = make_composite(samples)
        cond_images, cond_prompts, prompt = comp.cond_images, comp.cond_prompts, comp.target_prompt
    req = SampleRequest(cond_images, cond_prompts, prompt, steps=steps, seed=seed,
                        static_routing=static, dynamic_routing=dynamic)
    return req, [s.spec for s in samples]


def variant_switches(variant: str) -> tuple[bool, bool]:
    """(static, dynamic) routing at sampling time for an ablation variant."""
    return variant != "no-bias-mitigation", variant != "no-dynamic-routing"


def sample_seed(case_index: int, seed_index: int) -> int:
    return 1000 * seed_index + case_index


def eval_suite(
    models: Mapping[str, ToyMMDiT],
    testset: Corpus,
    scenarios: Sequence[str] = SCENARIOS,
    cases: int = 32,
    seeds: int = 4,
    steps: int = 20,
    case_seed: int = 0,
    batch: int = 64,
) -> list[dict]:
    """Per-(variant, scenario, seed) rows with mean identity similarity and attribute match.

    ``models`` maps variant name to model. "no-dynamic-routing" reuses the
    "full" model with routing switched off at sampling time when it is not
    supplied explicitly.
    """
    models = dict(models)
    if "full" in models and "no-dynamic-routing" not in models:
        models["no-dynamic-routing"] = models["full"]
    rows = []
    for variant in [v for v in VARIANTS if v in models]:
        model = models[variant]
        static, dynamic = variant_switches(variant)
        for scenario in scenarios:
            test_cases = make_cases(testset, scenario, cases, case_seed)
            jobs = []
            for si in range(seeds):
                for ci, case in enumerate(test_cases):
                    req, specs = case_request(testset, case, sample_seed(ci, si), steps, static, dynamic)
                    jobs.append((si, req, specs))
            results = []
            for start in range(0, len(jobs), batch):
                chunk = jobs[start : start + batch]
                results.extend(sample_many(model, [j[1] for j in chunk]))
            for si in range(seeds):
                sims, matches = [], []
                for (s, req, specs), res in zip(jobs, results):
                    if s != si:
                        continue
                    sims.append(region_similarity(res.image, req.cond_images))
                    matches.append(attribute_match(res.image, specs).match_rate)
                rows.append({"variant": variant, "scenario": scenario, "seed": si,
                             "identity_sim": float(np.mean(sims)), "attr_match": float(np.mean(matches))})
    return rows


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Average over seeds: one row per (variant, scenario)."""
    keys = []
    for r in rows:
        key = (r["variant"], r["scenario"])
        if key not in keys:
            keys.append(key)
    table = []
    for variant, scenario in keys:
        sel = [r for r in rows if r["variant"] == variant and r["scenario"] == scenario]
        table.append({"variant": variant, "scenario": scenario,
                      "identity_sim": float(np.mean([r["identity_sim"] for r in sel])),
                      "attr_match": float(np.mean([r["attr_match"] for r in sel]))})
    return table


def write_metrics_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "scenario", "seed", "identity_sim", "attr_match"])
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in w.fieldnames})
