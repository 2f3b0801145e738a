"""Closed synthetic vocabulary shared by prompts, the text embedding and the CLI tokenizer."""

from __future__ import annotations

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.10, 0.10),
    "orange": (0.95, 0.55, 0.10),
    "yellow": (0.95, 0.90, 0.10),
    "green": (0.15, 0.75, 0.20),
    "cyan": (0.10, 0.80, 0.85),
    "blue": (0.15, 0.25, 0.90),
    "purple": (0.55, 0.15, 0.85),
    "pink": (0.95, 0.30, 0.65),
}
TEXTURES = ("solid", "striped", "dotted")
CATEGORIES = ("ball", "cup", "hat", "star", "fish", "box", "tree", "house", "heart", "moon")

SPECIAL = ("<pad>", "a", "another", "left", "middle", "right")

TOKENS: tuple[str, ...] = SPECIAL + tuple(COLORS) + TEXTURES + CATEGORIES
TOKEN_ID: dict[str, int] = {tok: i for i, tok in enumerate(TOKENS)}
VOCAB_SIZE = len(TOKENS)

PAD = TOKEN_ID["<pad>"]
A = TOKEN_ID["a"]
ANOTHER = TOKEN_ID["another"]
LEFT = TOKEN_ID["left"]
MIDDLE = TOKEN_ID["middle"]
RIGHT = TOKEN_ID["right"]


def tokenize(text: str) -> list[int]:
    words = text.lower().replace(",", " ").split()
    unknown = [w for w in words if w not in TOKEN_ID]
    if unknown:
        raise ValueError(f"unknown word(s) {unknown}; vocabulary is {list(TOKENS[1:])}")
    return [TOKEN_ID[w] for w in words]


def detokenize(ids) -> str:
    return " ".join(TOKENS[int(i)] for i in ids if int(i) != PAD)


def column_markers(c: int) -> list[int]:
    """Column marker tokens that open each mention in a c-column prompt."""
    if c == 1:
        return []
    if c == 2:
        return [LEFT, RIGHT]
    return [LEFT] + [MIDDLE] * (c - 2) + [RIGHT]


def pad(ids: list[int], length: int) -> list[int]:
    if len(ids) > length:
        raise ValueError(f"prompt of {len(ids)} tokens exceeds budget {length}")
    return list(ids) + [PAD] * (length - len(ids))
