"""Synthetic single-subject corpus, diptych construction and curriculum sampling."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import vocab
from .imageio import load_png, save_png
from .layout import PromptSpanTable

IMAGE_EDGE = 32
COND_EDGE = 16
SUPERSAMPLE = 3


@dataclass(frozen=True)
class SubjectSpec:
    category: str
    color: str
    texture: str
    seed: int

    def __post_init__(self):
        if self.category not in vocab.CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.color not in vocab.COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.texture not in vocab.TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")

    def prompt(self, another: bool = False) -> list[int]:
        lead = vocab.ANOTHER if another else vocab.A
        return [lead, vocab.TOKEN_ID[self.color], vocab.TOKEN_ID[self.texture], vocab.TOKEN_ID[self.category]]

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SingleSample:
    spec: SubjectSpec
    view: int
    cond_image: np.ndarray  # (COND_EDGE, COND_EDGE, 3)
    target_image: np.ndarray  # (IMAGE_EDGE, IMAGE_EDGE, 3)
    cond_prompt: list[int]
    target_prompt: list[int]


@dataclass
class TrainingSample:
    cond_images: list[np.ndarray]
    cond_prompts: list[list[int]]
    target_image: np.ndarray
    target_prompt: list[int]  # unpadded
    spans: PromptSpanTable
    pairing: str  # "single" | "random" | "same_category"
    specs: list[SubjectSpec] = field(default_factory=list)

    @property
    def c(self) -> int:
        return len(self.cond_images)


# ------------------------------------------------------------------ shapes


def _shape_mask(category: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership test in subject-local coordinates (u right, v down, both in [-1, 1])."""
    if category == "ball":
        return u**2 + v**2 <= 1.0
    if category == "cup":
        body = (v >= -0.8) & (v <= 0.9) & (np.abs(u + 0.15) <= 0.5 - 0.12 * (v + 0.8) / 1.7)
        r2 = (u - 0.5) ** 2 + (v - 0.05) ** 2
        return body | ((r2 <= 0.38**2) & (r2 >= 0.2**2) & (u > 0.3))
    if category == "hat":
        brim = (np.abs(u) <= 1.0) & (v >= 0.5) & (v <= 0.8)
        dome = (u**2 / 0.6**2 + (v - 0.5) ** 2 / 1.1**2 <= 1.0) & (v <= 0.5)
        return brim | dome
    if category == "star":
        r = np.hypot(u, v)
        theta = np.arctan2(v, u) + np.pi / 2
        frac = np.abs(((theta / (2 * np.pi / 5)) % 1.0) - 0.5) * 2  # 1 at tips, 0 between
        return r <= 0.45 + 0.55 * frac**1.5
    if category == "fish":
        body = (u + 0.2) ** 2 / 0.75**2 + v**2 / 0.5**2 <= 1.0
        tail = (u >= 0.45) & (u <= 1.0) & (np.abs(v) <= (u - 0.45) * 1.1)
        return body | tail
    if category == "box":
        return (np.abs(u) <= 0.85) & (np.abs(v) <= 0.85)
    if category == "tree":
        canopy = (v >= -1.0) & (v <= 0.5) & (np.abs(u) <= (v + 1.0) / 1.5 * 0.9)
        trunk = (np.abs(u) <= 0.16) & (v > 0.5) & (v <= 1.0)
        return canopy | trunk
    if category == "house":
        walls = (np.abs(u) <= 0.75) & (v >= 0.0) & (v <= 1.0)
        roof = (v >= -1.0) & (v < 0.0) & (np.abs(u) <= (v + 1.0) * 0.95)
        return walls | roof
    if category == "heart":
        x, y = u * 1.15, -(v * 1.15 - 0.15)
        return (x**2 + y**2 - 1.0) ** 3 - x**2 * y**3 <= 0.0
    if category == "moon":
        return (u**2 + v**2 <= 1.0) & ((u - 0.5) ** 2 + (v + 0.15) ** 2 > 0.75**2)
    raise ValueError(f"unknown category {category!r}")


def _texture_mask(texture: str, u: np.ndarray, v: np.ndarray, phase: float) -> np.ndarray:
    """True where the light accent colour replaces the subject colour."""
    if texture == "solid":
        return np.zeros_like(u, dtype=bool)
    if texture == "striped":
        return ((v * 2.5 + phase) % 1.0) < 0.4
    if texture == "dotted":
        gu = (u * 2.5 + phase) % 1.0 - 0.5
        gv = (v * 2.5 + phase) % 1.0 - 0.5
        return gu**2 + gv**2 <= 0.22**2
    raise ValueError(f"unknown texture {texture!r}")


def _draw(canvas: np.ndarray, spec: SubjectSpec, cx: float, cy: float, half: float, angle: float, aspect: float, phase: float) -> None:
    """Paint the subject into ``canvas`` (edge x edge x 3, modified in place) with supersampled coverage."""
    edge = canvas.shape[0]
    s = SUPERSAMPLE
    coords = (np.arange(edge * s) + 0.5) / s
    py, px = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = (px - cx) / half, (py - cy) / half
    cos, sin = np.cos(angle), np.sin(angle)
    u = (cos * dx + sin * dy) / aspect
    v = -sin * dx + cos * dy
    inside = _shape_mask(spec.category, u, v)
    accent = _texture_mask(spec.texture, u, v, phase) & inside
    base = np.array(vocab.COLORS[spec.color])
    light = 0.35 * base + 0.65
    color = np.where(accent[..., None], light, base)
    cover = inside.reshape(edge, s, edge, s).mean(axis=(1, 3))[..., None]
    paint = (color * inside[..., None]).reshape(edge, s, edge, s, 3).sum(axis=(1, 3)) / (s * s)
    canvas *= 1.0 - cover
    canvas += paint


def _background(rng: np.random.Generator, edge: int) -> np.ndarray:
    """Low-saturation gradient with mild noise; never reads as a palette colour."""
    level = rng.uniform(0.3, 0.75)
    tint = rng.uniform(-0.06, 0.06, size=3)
    gy, gx = rng.uniform(-0.15, 0.15, size=2)
    ramp = np.linspace(-0.5, 0.5, edge)
    img = level + tint + gy * ramp[:, None, None] + gx * ramp[None, :, None]
    img = img + rng.normal(0.0, 0.02, size=(edge, edge, 3))
    return np.clip(img, 0.0, 1.0)


def _subject_shape_params(spec: SubjectSpec) -> tuple[float, float]:
    rng = np.random.default_rng([spec.seed, 0])
    return rng.uniform(0.85, 1.15), rng.uniform(0.0, 1.0)  # aspect, texture phase


def render_condition(spec: SubjectSpec, edge: int = COND_EDGE) -> np.ndarray:
    aspect, phase = _subject_shape_params(spec)
    canvas = np.ones((edge, edge, 3))
    _draw(canvas, spec, edge / 2, edge / 2, 0.32 * edge, 0.0, aspect, phase)
    return canvas.astype(np.float32)


def render_target(spec: SubjectSpec, view: int, edge: int = IMAGE_EDGE) -> np.ndarray:
    aspect, phase = _subject_shape_params(spec)
    rng = np.random.default_rng([spec.seed, 1, view])
    canvas = _background(rng, edge)
    half = rng.uniform(0.2, 0.32) * edge
    margin = half * 1.05
    cx, cy = rng.uniform(margin, edge - margin, size=2)
    angle = rng.uniform(-0.3, 0.3)
    _draw(canvas, spec, cx, cy, half, angle, aspect, phase)
    return canvas.astype(np.float32)


def render_subject(spec: SubjectSpec, view: int = 0, image_edge: int = IMAGE_EDGE, cond_edge: int = COND_EDGE) -> SingleSample:
    prompt = spec.prompt()
    return SingleSample(
        spec=spec,
        view=view,
        cond_image=render_condition(spec, cond_edge),
        target_image=render_target(spec, view, image_edge),
        cond_prompt=prompt,
        target_prompt=list(prompt),
    )


# ---------------------------------------------------------------- diptychs


def downscale_width(image: np.ndarray, factor: int) -> np.ndarray:
    h, w, ch = image.shape
    if w % factor:
        raise ValueError(f"width {w} is not divisible by {factor}")
    return image.reshape(h, w // factor, factor, ch).mean(axis=2).astype(np.float32)


def single_sample(sample: SingleSample) -> TrainingSample:
    return TrainingSample(
        cond_images=[sample.cond_image],
        cond_prompts=[list(sample.cond_prompt)],
        target_image=sample.target_image,
        target_prompt=list(sample.target_prompt),
        spans=PromptSpanTable.of([(0, len(sample.target_prompt))]),
        pairing="single",
        specs=[sample.spec],
    )


def make_composite(samples: Sequence[SingleSample], pairing: str | None = None) -> TrainingSample:
    """Side-by-side composite of c >= 2 distinct subjects with a c-column prompt.

    A repeated category gets ANOTHER in place of the leading article, both in
    its condition prompt and in its mention inside the target prompt.
    """
    c = len(samples)
    if c < 2:
        raise ValueError("a composite needs at least two subjects")
    specs = [s.spec for s in samples]
    if len(set(specs)) != c:
        raise ValueError("composite subjects must be distinct")
    seen: set[str] = set()
    cond_prompts, target_prompt, spans = [], [], []
    for marker, spec in zip(vocab.column_markers(c), specs):
        prompt = spec.prompt(another=spec.category in seen)
        seen.add(spec.category)
        target_prompt.append(marker)
        spans.append((len(target_prompt), len(prompt)))
        target_prompt.extend(prompt)
        cond_prompts.append(prompt)
    wide = np.concatenate([s.target_image for s in samples], axis=1)
    if pairing is None:
        pairing = "same_category" if len({s.category for s in specs}) == 1 else "random"
    return TrainingSample(
        cond_images=[s.cond_image for s in samples],
        cond_prompts=cond_prompts,
        target_image=downscale_width(wide, c),
        target_prompt=target_prompt,
        spans=PromptSpanTable.of(spans),
        pairing=pairing,
        specs=specs,
    )


def make_diptych(a: SingleSample, b: SingleSample) -> TrainingSample:
    return make_composite([a, b])


# ------------------------------------------------------------------ corpus


def random_specs(count: int, seed: int) -> list[SubjectSpec]:
    rng = np.random.default_rng(seed)
    seeds = rng.choice(2**31 - 1, size=count, replace=False)
    return [
        SubjectSpec(
            category=str(rng.choice(vocab.CATEGORIES)),
            color=str(rng.choice(list(vocab.COLORS))),
            texture=str(rng.choice(vocab.TEXTURES)),
            seed=int(s),
        )
        for s in seeds
    ]


class Corpus:
    """Single-subject samples grouped by subject, with views as extra renders."""

    def __init__(self, samples: Sequence[SingleSample]):
        if not samples:
            raise ValueError("empty corpus")
        self.samples = list(samples)
        by_spec: dict[SubjectSpec, list[int]] = {}
        for i, s in enumerate(self.samples):
            by_spec.setdefault(s.spec, []).append(i)
        self.subjects = list(by_spec)
        self.views = [by_spec[s] for s in self.subjects]
        by_cat: dict[str, list[int]] = {}
        for j, spec in enumerate(self.subjects):
            by_cat.setdefault(spec.category, []).append(j)
        self.by_category = {k: v for k, v in by_cat.items()}
        self.pairable = sorted(k for k, v in by_cat.items() if len(v) >= 2)

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def generate(cls, subjects: int, seed: int, views: int = 4, image_edge: int = IMAGE_EDGE, cond_edge: int = COND_EDGE) -> "Corpus":
        specs = random_specs(subjects, seed)
        return cls([render_subject(s, v, image_edge, cond_edge) for s in specs for v in range(views)])

    def pick(self, subject: int, rng: np.random.Generator) -> SingleSample:
        options = self.views[subject]
        return self.samples[options[rng.integers(len(options))]]


def curriculum_batch(stage: int, corpus: Corpus, rng: np.random.Generator, diptych: bool = True) -> TrainingSample:
    """Stage 1: singles. Stage 2: 80% random-pair diptychs, 20% singles. Stage 3: same-category diptychs."""
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    n_subjects = len(corpus.subjects)
    if stage == 1 or not diptych or n_subjects < 2:
        return single_sample(corpus.pick(int(rng.integers(n_subjects)), rng))
    if stage == 2:
        if rng.random() >= 0.8:
            return single_sample(corpus.pick(int(rng.integers(n_subjects)), rng))
        i, j = rng.choice(n_subjects, size=2, replace=False)
        return make_diptych(corpus.pick(int(i), rng), corpus.pick(int(j), rng))
    if not corpus.pairable:
        raise ValueError("stage 3 needs two subjects of one category")
    category = corpus.pairable[rng.integers(len(corpus.pairable))]
    i, j = rng.choice(corpus.by_category[category], size=2, replace=False)
    return make_diptych(corpus.pick(int(i), rng), corpus.pick(int(j), rng))


# ------------------------------------------------------------------- disk


def _write_sample(directory: Path, sample: SingleSample) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_png(directory / "cond_0.png", sample.cond_image)
    save_png(directory / "target.png", sample.target_image)
    meta = {
        "prompt_tokens": sample.target_prompt,
        "cond_prompts": [sample.cond_prompt],
        "spans": [[0, len(sample.target_prompt)]],
        "specs": [sample.spec.to_json()],
        "pairing": "single",
        "view": sample.view,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def build_dataset(out: str | Path, subjects: int = 512, seed: int = 0, views: int = 4, test_subjects: int = 64,
                  image_edge: int = IMAGE_EDGE, cond_edge: int = COND_EDGE) -> Path:
    """Render train and held-out test splits to ``out/{train,test}/sample_XXXXX``."""
    out = Path(out)
    specs = random_specs(subjects + test_subjects, seed)
    splits = {"train": specs[:subjects], "test": specs[subjects:]}
    for split, split_specs in splits.items():
        idx = 0
        for spec in split_specs:
            for view in range(views):
                _write_sample(out / split / f"sample_{idx:05d}", render_subject(spec, view, image_edge, cond_edge))
                idx += 1
    info = {"seed": seed, "subjects": subjects, "test_subjects": test_subjects, "views": views,
            "image_edge": image_edge, "cond_edge": cond_edge, "vocab": list(vocab.TOKENS)}
    (out / "dataset.json").write_text(json.dumps(info, indent=1), encoding="utf-8")
    return out


def load_split(directory: str | Path) -> Corpus:
    directory = Path(directory)
    dirs = sorted(p for p in directory.glob("sample_*") if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no samples under {directory}")
    samples = []
    for d in dirs:
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
        samples.append(SingleSample(
            spec=SubjectSpec(**meta["specs"][0]),
            view=int(meta.get("view", 0)),
            cond_image=load_png(d / "cond_0.png"),
            target_image=load_png(d / "target.png"),
            cond_prompt=list(meta["cond_prompts"][0]),
            target_prompt=list(meta["prompt_tokens"]),
        ))
    return Corpus(samples)


def load_corpus(root: str | Path, split: str = "train") -> Corpus:
    root = Path(root)
    if not (root / split).is_dir():
        raise FileNotFoundError(f"dataset split {root / split} does not exist")
    return load_split(root / split)
