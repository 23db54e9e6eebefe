"""Image encoder, cosine-similarity text retrieval and prompt recombination."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, InvalidArgumentError, NumericError
from .nn import Conv2d, ConvBNReLU, Linear, Module, ModuleList
from .textbank import CATEGORIES, EncodedBank, TextFeature

# Infection, Num, LeftLoc, RightLoc
DEFAULT_ORDER = (0, 1, 2, 3)
SWAPPED_ORDER = (0, 1, 3, 2)


class RetrievalEncoder(Module):
    """Four conv stages; stage-4 features are upsampled, joined with stage 3,
    mapped per position, max-pooled globally and projected to the text width."""

    def __init__(
        self, in_channels: int = 1, widths=(16, 32, 64, 128), hidden: int = 128, dim: int = 32, coords: bool = False
    ):
        super().__init__()
        self.in_channels = in_channels
        self.coords = coords
        chans = (in_channels + (2 if coords else 0),) + tuple(widths)
        self.stages = ModuleList(ConvBNReLU(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.mlp = Conv2d(widths[2] + widths[3], hidden, 1)
        self.proj = Linear(hidden, dim)

    def forward(self, img: Tensor) -> Tensor:
        if img.ndim != 4 or img.shape[1] != self.in_channels:
            raise InvalidArgumentError(
                f"expected images [B,{self.in_channels},H,W], got {img.shape}"
            )
        if img.shape[2] % 16 or img.shape[3] % 16:
            raise InvalidArgumentError("image height and width must be divisible by 16")
        feats = []
        h = ad.concat([img, _coord_channels(img)], axis=1) if self.coords else img
        for stage in self.stages:
            h = ad.maxpool2d(stage(h), 2)
            feats.append(h)
        v_l, v_h = feats[2], feats[3]
        z = ad.concat([ad.upsample2x(v_h, "bilinear"), v_l], axis=1)
        z = self.mlp(z).max(axis=(2, 3))
        return self.proj(z)


def _coord_channels(img: Tensor) -> Tensor:
    """Fixed row and column ramps in [-1, 1], one pair per image."""
    B, _, H, W = img.shape
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    grid = np.broadcast_to(np.stack([yy, xx]).astype(img.dtype), (B, 2, H, W))
    return Tensor(np.ascontiguousarray(grid))


def encode_image(img: Tensor, enc: RetrievalEncoder) -> Tensor:
    """F_v for a batch of images, shape [B, D]."""
    return enc(img)


def cosine_similarities(f_v: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Cosine between one vector [D] and each row of ``candidates`` [n, D]."""
    f_v = np.asarray(f_v, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    nv = np.linalg.norm(f_v)
    nc = np.linalg.norm(candidates, axis=-1)
    if nv == 0 or np.any(nc == 0):
        raise NumericError("cosine similarity with a zero-norm vector")
    return candidates @ f_v / (nc * nv)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def score_category(f_v: np.ndarray, bank_features: np.ndarray, tau: float = 0.07) -> np.ndarray:
    """Temperature-softmax over the cosine similarities of one category."""
    if tau <= 0:
        raise InvalidArgumentError("tau must be positive")
    return _softmax(cosine_similarities(f_v, bank_features) / tau)


@dataclass
class CategoryRetrieval:
    category: int  # 1..4
    cosines: np.ndarray
    scores: np.ndarray
    j_star: int
    feature: TextFeature


@dataclass
class RetrievalResult:
    categories: List[CategoryRetrieval]
    recombined: Optional[List[np.ndarray]] = None

    @property
    def j_star(self) -> Tuple[int, ...]:
        return tuple(c.j_star for c in self.categories)

    def report(self, bank) -> str:
        """Score listing: one line per candidate, the retrieved row starred."""
        lines = []
        for c in self.categories:
            lines.append(f"[{CATEGORIES[c.category - 1]}]")
            for j, s in enumerate(c.scores):
                mark = "*" if j == c.j_star else " "
                lines.append(f" {mark} {bank.phrase(c.category, j):<32s} {s:.4f}")
        return "\n".join(lines)


def retrieve(f_v: np.ndarray, bank: EncodedBank, tau: float = 0.07) -> RetrievalResult:
    """Top-ranked phrase per category for one image feature (no gradient)."""
    f_v = np.asarray(f_v.data if isinstance(f_v, Tensor) else f_v)
    if f_v.ndim != 1 or f_v.shape[0] != bank.dim:
        raise InvalidArgumentError(f"F_v must be a [{bank.dim}] vector")
    if tau <= 0:
        raise InvalidArgumentError("tau must be positive")
    cats = []
    for c in range(4):
        cos = cosine_similarities(f_v, bank.pooled[c])
        scores = _softmax(cos / tau)
        j = int(np.argmax(scores))
        cats.append(CategoryRetrieval(c + 1, cos, scores, j, bank.features[c][j]))
    return RetrievalResult(cats)


def recombine_features(features: Sequence[np.ndarray], order: Sequence[int] = DEFAULT_ORDER) -> List[np.ndarray]:
    """Running means of the retrieved token grids in the given category order.

    Each mean is summed in fixed category order, so permuting ``order`` only
    changes the prefixes whose membership changes.
    """
    if len(features) != 4:
        raise ContractViolation("recombination needs all four retrieved features")
    out = []
    for i in range(1, 5):
        members = sorted(order[:i])
        acc = features[members[0]].copy()
        for m in members[1:]:
            acc = acc + features[m]
        out.append(acc / i)
    return out


def recombine(result: RetrievalResult, order: Sequence[int] = DEFAULT_ORDER) -> List[np.ndarray]:
    if result is None or len(result.categories) != 4:
        raise ContractViolation("recombine called before retrieval")
    result.recombined = recombine_features([c.feature.tokens for c in result.categories], order)
    return result.recombined


def batch_text_features(
    indices: np.ndarray, bank: EncodedBank, order: Sequence[int] = DEFAULT_ORDER
) -> List[np.ndarray]:
    """F_text,1..4 as [B, L, D] arrays from per-sample phrase indices [B, 4]."""
    indices = np.asarray(indices)
    feats = [bank.tokens[c][indices[:, c]] for c in range(4)]
    return recombine_features(feats, order)
