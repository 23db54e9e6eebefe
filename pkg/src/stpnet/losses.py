"""Segmentation / retrieval / focal objectives and mask metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgumentError

DICE_EPS = 1e-6


def _check_binary(gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt)
    if not np.isin(gt, (0, 1)).all():
        raise InvalidArgumentError("ground truth must be binary")
    return gt


def soft_dice(p: Tensor, y: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Per-sample soft Dice over all non-batch axes, shape [B]."""
    axes = tuple(range(1, p.ndim))
    y = Tensor(np.asarray(y, dtype=p.dtype))
    inter = (p * y).sum(axis=axes)
    return (inter * 2.0 + eps) / (p.sum(axis=axes) + y.sum(axis=axes) + eps)


def seg_loss(logits: Tensor, gt: np.ndarray) -> Tensor:
    """(1 - soft Dice) averaged over the batch plus pixel-mean binary cross-entropy."""
    gt = _check_binary(gt)
    if gt.shape != logits.shape:
        raise InvalidArgumentError(f"mask shape {gt.shape} != logits shape {logits.shape}")
    y = gt.astype(logits.dtype)
    p = logits.sigmoid()
    dice_term = (1.0 - soft_dice(p, y)).mean()
    # BCE(sigmoid(z), y) = softplus(z) - y * z
    bce = (ad.softplus(logits) - logits * Tensor(y)).mean()
    return dice_term + bce


def _positives(positives, n_categories: int, sizes: Sequence[int]) -> np.ndarray:
    pos = np.asarray(positives, dtype=np.int64)
    if pos.ndim == 1:
        pos = pos[None]
    if pos.shape[1] != n_categories:
        raise InvalidArgumentError(f"need {n_categories} positive indices per sample")
    for c, n in enumerate(sizes):
        if np.any(pos[:, c] < 0) or np.any(pos[:, c] >= n):
            raise InvalidArgumentError(f"positive index out of range for category {c + 1}")
    return pos


def _pick(logp: Tensor, idx: np.ndarray) -> Tensor:
    onehot = np.zeros(logp.shape, dtype=logp.dtype)
    onehot[np.arange(len(idx)), idx] = 1.0
    return (logp * Tensor(onehot)).sum(axis=-1)


def retrieval_terms(
    f_v: Tensor, bank_features: Sequence[np.ndarray], positives, tau: float = 0.07
) -> List[Tensor]:
    """Per-category contrastive terms, each averaged over the batch."""
    if tau <= 0:
        raise InvalidArgumentError("tau must be positive")
    if f_v.ndim == 1:
        f_v = f_v.reshape(1, -1)
    pos = _positives(positives, len(bank_features), [len(b) for b in bank_features])
    v = ad.cosine_normalize(f_v)
    terms = []
    for c, cand in enumerate(bank_features):
        cand = np.asarray(cand, dtype=np.float64)
        t = cand / np.linalg.norm(cand, axis=1, keepdims=True)
        sims = v @ Tensor(t.T.astype(f_v.dtype))
        logp = ad.log_softmax(sims * (1.0 / tau), axis=-1)
        terms.append(-_pick(logp, pos[:, c]).mean())
    return terms


def retrieval_loss(f_v: Tensor, bank_features: Sequence[np.ndarray], positives, tau: float = 0.07) -> Tensor:
    terms = retrieval_terms(f_v, bank_features, positives, tau)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def focal_terms(logits: Sequence[Tensor], positives, gamma: float = 2.0) -> List[Tensor]:
    """Per-category ``-(1 - p*)^gamma log p*`` averaged over the batch."""
    if gamma < 0:
        raise InvalidArgumentError("gamma must be >= 0")
    pos = _positives(positives, len(logits), [l.shape[-1] for l in logits])
    terms = []
    for c, z in enumerate(logits):
        if z.ndim == 1:
            z = z.reshape(1, -1)
        logp = _pick(ad.log_softmax(z, axis=-1), pos[:, c])
        if gamma == 0:
            terms.append(-logp.mean())
        else:
            weight = (1.0 - logp.exp()) ** gamma
            terms.append(-(weight * logp).mean())
    return terms


def focal_loss(f_v: Tensor, heads: Sequence[Callable[[Tensor], Tensor]], positives, gamma: float = 2.0) -> Tensor:
    terms = focal_terms([h(f_v) for h in heads], positives, gamma)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def cross_entropy(logits: Sequence[Tensor], positives) -> Tensor:
    """Sum over categories of batch-mean ``-log softmax(z)[positive]``."""
    pos = _positives(positives, len(logits), [l.shape[-1] for l in logits])
    total = None
    for c, z in enumerate(logits):
        if z.ndim == 1:
            z = z.reshape(1, -1)
        term = -_pick(ad.softmax(z, axis=-1), pos[:, c]).log().mean()
        total = term if total is None else total + term
    return total


@dataclass
class LossReport:
    seg: float
    retrieval: float
    focal: float
    mix: float
    retrieval_terms: List[float] = field(default_factory=list)
    total: Optional[Tensor] = field(default=None, repr=False)

    def as_dict(self) -> Dict[str, float]:
        return {"seg": self.seg, "retrieval": self.retrieval, "focal": self.focal, "mix": self.mix}


def mix_loss(seg, retrieval, focal, lambdas=(1.0, 1.0, 1.0)):
    """Weighted sum; works on floats or tensors.  Zero-weight terms are dropped."""
    total = None
    for lam, term in zip(lambdas, (seg, retrieval, focal)):
        if lam == 0 or term is None:
            continue
        part = term * lam if lam != 1 else term
        total = part if total is None else total + part
    return 0.0 if total is None else total


def compute_losses(
    model,
    out,
    masks: np.ndarray,
    labels: np.ndarray,
    bank,
    lambdas=(1.0, 1.0, 1.0),
    tau: float = 0.07,
    gamma: float = 2.0,
) -> LossReport:
    """All three objectives for one forward pass of :class:`StpnetModel`."""
    seg = seg_loss(out.logits, masks)
    ret_terms, ret = [], None
    if lambdas[1] != 0:
        ret_terms = retrieval_terms(out.f_v, bank.pooled, labels, tau)
        ret = ret_terms[0]
        for t in ret_terms[1:]:
            ret = ret + t
    foc = None
    if lambdas[2] != 0:
        fterms = focal_terms(model.focal_logits(out.f_v), labels, gamma)
        foc = fterms[0]
        for t in fterms[1:]:
            foc = foc + t
    total = mix_loss(seg, ret, foc, lambdas)
    return LossReport(
        seg=seg.item(),
        retrieval=ret.item() if ret is not None else 0.0,
        focal=foc.item() if foc is not None else 0.0,
        mix=total.item(),
        retrieval_terms=[t.item() for t in ret_terms],
        total=total,
    )


# -------------------------------------------------------------------- metrics
def metrics(pred: np.ndarray, gt: np.ndarray) -> Dict[str, float]:
    """Dice, IoU, precision and recall of two binary masks.

    Both empty counts as a perfect match; an empty denominator otherwise
    yields 0.
    """
    p = _check_binary(pred).astype(bool)
    y = _check_binary(gt).astype(bool)
    if p.shape != y.shape:
        raise InvalidArgumentError("pred and gt shapes differ")
    np_, ny = int(p.sum()), int(y.sum())
    if np_ == 0 and ny == 0:
        return {"dice": 1.0, "iou": 1.0, "precision": 1.0, "recall": 1.0}
    inter = int(np.logical_and(p, y).sum())
    union = np_ + ny - inter
    return {
        "dice": 2 * inter / (np_ + ny),
        "iou": inter / union,
        "precision": inter / np_ if np_ else 0.0,
        "recall": inter / ny if ny else 0.0,
    }
