"""Index bookkeeping for the composite sequence.

Token order is ``[CI_0; CT_0; ...; CI_{c-1}; CT_{c-1}; T; X]``: per condition
its image tokens then its text tokens, followed by the target prompt and the
noisy target image.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np


class Kind(enum.IntEnum):
    CONDITION_IMAGE = 0
    CONDITION_TEXT = 1
    PROMPT = 2
    NOISE = 3


class Segment(NamedTuple):
    kind: Kind
    condition: int | None = None


@dataclass(frozen=True)
class SequenceLayout:
    c: int
    n_prime: int
    m_prime: int
    m: int
    n: int

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")

    @property
    def l_prime(self) -> int:
        return self.m_prime + self.n_prime

    @property
    def l(self) -> int:
        return self.m + self.n

    @property
    def L(self) -> int:
        return self.c * self.l_prime + self.l

    @property
    def cond_len(self) -> int:
        """Length of the whole condition region."""
        return self.c * self.l_prime

    def condition_block(self, k: int) -> slice:
        self._check_condition(k)
        return slice(k * self.l_prime, (k + 1) * self.l_prime)

    def condition_image(self, k: int) -> slice:
        self._check_condition(k)
        start = k * self.l_prime
        return slice(start, start + self.n_prime)

    def condition_text(self, k: int) -> slice:
        self._check_condition(k)
        start = k * self.l_prime + self.n_prime
        return slice(start, start + self.m_prime)

    @property
    def prompt(self) -> slice:
        return slice(self.cond_len, self.cond_len + self.m)

    @property
    def noise(self) -> slice:
        return slice(self.cond_len + self.m, self.L)

    def _check_condition(self, k: int) -> None:
        if not 0 <= k < self.c:
            raise IndexError(f"condition {k} outside [0, {self.c})")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "SequenceLayout":
        return cls(**{k: int(payload[k]) for k in ("c", "n_prime", "m_prime", "m", "n")})


def build_layout(c: int, n_prime: int, m_prime: int, m: int, n: int) -> SequenceLayout:
    return SequenceLayout(c, n_prime, m_prime, m, n)


def classify(layout: SequenceLayout, index: int) -> Segment:
    if not 0 <= index < layout.L:
        raise IndexError(f"index {index} outside [0, {layout.L})")
    if index < layout.cond_len:
        k, offset = divmod(index, layout.l_prime)
        kind = Kind.CONDITION_IMAGE if offset < layout.n_prime else Kind.CONDITION_TEXT
        return Segment(kind, k)
    if index < layout.cond_len + layout.m:
        return Segment(Kind.PROMPT)
    return Segment(Kind.NOISE)


def condition_of_column(layout: SequenceLayout, j: int) -> int:
    if not 0 <= j < layout.cond_len:
        raise IndexError(f"column {j} is not in the condition region [0, {layout.cond_len})")
    return j // layout.l_prime


def segment_kinds(layout: SequenceLayout) -> np.ndarray:
    """Vectorised ``classify``: int array of Kind codes, length L."""
    kinds = np.empty(layout.L, dtype=np.int64)
    for k in range(layout.c):
        kinds[layout.condition_image(k)] = Kind.CONDITION_IMAGE
        kinds[layout.condition_text(k)] = Kind.CONDITION_TEXT
    kinds[layout.prompt] = Kind.PROMPT
    kinds[layout.noise] = Kind.NOISE
    return kinds


@dataclass(frozen=True)
class PromptSpanTable:
    """Per condition ``(p_k, l_k)``: where condition k is mentioned in the prompt."""

    spans: tuple[tuple[int, int], ...]

    @classmethod
    def of(cls, spans: Sequence[Sequence[int]]) -> "PromptSpanTable":
        return cls(tuple((int(p), int(length)) for p, length in spans))

    def __len__(self) -> int:
        return len(self.spans)

    def __iter__(self):
        return iter(self.spans)

    def __getitem__(self, k: int) -> tuple[int, int]:
        return self.spans[k]

    def validate(self, m: int, c: int | None = None) -> None:
        if c is not None and len(self.spans) != c:
            raise ValueError(f"expected {c} spans, got {len(self.spans)}")
        covered = np.zeros(m, dtype=bool)
        for k, (p, length) in enumerate(self.spans):
            if length < 1:
                raise ValueError(f"span {k} is empty")
            if p < 0 or p + length > m:
                raise ValueError(f"span {k} = ({p}, {length}) exceeds prompt length {m}")
            if covered[p : p + length].any():
                raise ValueError(f"span {k} overlaps an earlier span")
            covered[p : p + length] = True

    def to_json(self) -> list[list[int]]:
        return [list(s) for s in self.spans]
