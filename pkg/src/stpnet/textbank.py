"""Four-category lesion phrase bank and a frozen toy text encoder."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import InvalidArgumentError

CATEGORIES = ("Infection", "Num", "LeftLoc", "RightLoc")
CATEGORY_SIZES = (2, 2, 8, 8)

_INFECTION = ["Unilateral pulmonary infection", "Bilateral pulmonary infection"]
_NUM = ["One infected area", "Multiple infected areas"]
# ordering of the occupied-thirds patterns; index 0 means no lesion
_LOC_PREFIXES = [
    None,
    "Upper",
    "Middle",
    "Lower",
    "Upper lower",
    "Upper middle",
    "Middle lower",
    "Upper middle lower",
]


def _loc_phrases(side: str) -> List[str]:
    return [
        f"No lesion in {side} lung" if p is None else f"{p} {side} lung"
        for p in _LOC_PREFIXES
    ]


@dataclass(frozen=True)
class TextBank:
    """Ordered phrase lists for the four description categories."""

    domain: str
    categories: Tuple[Tuple[str, ...], ...]

    def __post_init__(self):
        sizes = tuple(len(c) for c in self.categories)
        if sizes != CATEGORY_SIZES:
            raise InvalidArgumentError(f"category sizes {sizes} != {CATEGORY_SIZES}")
        flat = self.phrases()
        if len(set(flat)) != len(flat):
            raise InvalidArgumentError("phrases in a bank must be unique")

    def phrases(self) -> List[str]:
        return [p for cat in self.categories for p in cat]

    def phrase(self, category: int, index: int) -> str:
        """``category`` is 1-based (1..4); ``index`` is 0-based."""
        _check_index(category, index)
        return self.categories[category - 1][index]

    def to_text(self) -> str:
        lines = [f"# domain: {self.domain}"]
        for name, cat in zip(CATEGORIES, self.categories):
            lines.append(f"[{name}]")
            lines.extend(cat)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TextBank":
        domain = "custom"
        cats: Dict[str, List[str]] = {}
        current = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line[1:].strip().startswith("domain:"):
                    domain = line.split(":", 1)[1].strip()
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in CATEGORIES:
                    raise InvalidArgumentError(f"unknown category header {line!r}")
                cats[current] = []
            elif current is None:
                raise InvalidArgumentError("phrase before any category header")
            else:
                cats[current].append(line)
        missing = [c for c in CATEGORIES if c not in cats]
        if missing:
            raise InvalidArgumentError(f"missing categories {missing}")
        return cls(domain, tuple(tuple(cats[c]) for c in CATEGORIES))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TextBank":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def build_text_bank(domain: str = "lung") -> TextBank:
    """Phrase database for ``"lung"`` or ``"polyp"`` images.

    The polyp bank is the lung bank with the token ``lung`` replaced.
    """
    if domain not in ("lung", "polyp"):
        raise InvalidArgumentError(f"unknown domain {domain!r}")
    cats = [_INFECTION, _NUM, _loc_phrases("left"), _loc_phrases("right")]
    if domain == "polyp":
        cats = [[_replace_token(p, "lung", "polyp") for p in c] for c in cats]
    return TextBank(domain, tuple(tuple(c) for c in cats))


def _replace_token(phrase: str, old: str, new: str) -> str:
    return " ".join(new if tok == old else tok for tok in phrase.split())


def _check_index(category: int, index: int) -> None:
    if not 1 <= category <= 4:
        raise InvalidArgumentError(f"category must be 1..4, got {category}")
    if not 0 <= index < CATEGORY_SIZES[category - 1]:
        raise InvalidArgumentError(
            f"index {index} out of range for category {CATEGORIES[category - 1]}"
        )


@dataclass(frozen=True)
class TextFeature:
    tokens: np.ndarray  # [L, D]; padding rows are zero
    n_tokens: int
    category: int
    index: int
    pooled: np.ndarray = field(repr=False)


def token_vector(token: str, seed: int, dim: int) -> np.ndarray:
    """Frozen embedding of one lowercase token (pure function of token and seed)."""
    key = zlib.crc32(token.lower().encode("utf-8"))
    return np.random.default_rng([seed, key]).standard_normal(dim)


def pool_tokens(feature: TextFeature) -> np.ndarray:
    """Mean over the non-padding token rows."""
    if feature.n_tokens < 1:
        raise InvalidArgumentError("feature has no non-padding tokens")
    return feature.tokens[: feature.n_tokens].mean(axis=0)


def encode_phrase(phrase: str, seed: int = 0, length: int = 8, dim: int = 32) -> np.ndarray:
    """Token matrix [length, dim] and the number of real tokens."""
    toks = phrase.lower().split()[:length]
    out = np.zeros((length, dim))
    for i, tok in enumerate(toks):
        out[i] = token_vector(tok, seed, dim)
    return out, len(toks)


def encode_text(
    bank: TextBank, category: int, index: int, seed: int = 0, length: int = 8, dim: int = 32
) -> TextFeature:
    tokens, n = encode_phrase(bank.phrase(category, index), seed, length, dim)
    tokens.setflags(write=False)
    feat = TextFeature(tokens, n, category, index, pooled=np.empty(0))
    pooled = pool_tokens(feat)
    pooled.setflags(write=False)
    object.__setattr__(feat, "pooled", pooled)
    return feat


class EncodedBank:
    """All phrases of a bank passed through the frozen encoder.

    ``tokens[i]`` is [n_i, L, D] and ``pooled[i]`` is [n_i, D] for 0-based
    category ``i``.  Arrays are read-only; nothing here is ever trained.
    """

    def __init__(self, bank: TextBank, seed: int = 0, length: int = 8, dim: int = 32):
        self.bank, self.seed, self.length, self.dim = bank, seed, length, dim
        self.features = [
            [encode_text(bank, c + 1, j, seed, length, dim) for j in range(CATEGORY_SIZES[c])]
            for c in range(4)
        ]
        self.tokens = [np.stack([f.tokens for f in cat]) for cat in self.features]
        self.pooled = [np.stack([f.pooled for f in cat]) for cat in self.features]
        for arr in self.tokens + self.pooled:
            arr.setflags(write=False)
