"""Training loop, evaluation and the Adam optimizer."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, no_grad
from .blocks import StpnetConfig, StpnetModel
from .errors import InvalidArgumentError, NumericError
from .losses import compute_losses, metrics
from .synthgen import SegDataset
from .textbank import CATEGORIES, CATEGORY_SIZES, EncodedBank

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    teacher_force_text: bool = False
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidArgumentError("lr must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise InvalidArgumentError("batch_size, max_epochs and patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class EvalReport:
    split: str
    n: int
    dice: float
    iou: float
    precision: float
    recall: float
    retrieval_top1: List[float]

    @property
    def retrieval_mean(self) -> float:
        return float(np.mean(self.retrieval_top1))

    def to_record(self) -> dict:
        rec = {k: v for k, v in asdict(self).items() if k != "retrieval_top1"}
        rec.update({f"top1_{c}": a for c, a in zip(CATEGORIES, self.retrieval_top1)})
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=False)


def predict_batches(model: StpnetModel, bank: EncodedBank, images: np.ndarray, batch_size: int = 32):
    """Eval-mode logits and retrieved indices for ``images`` [N,1,H,W]."""
    was_training = model.training
    model.eval()
    logits, jstars = [], []
    try:
        with no_grad():
            for lo in range(0, len(images), batch_size):
                x = Tensor(images[lo:lo + batch_size].astype(model.dtype))
                out = model(x, bank)
                logits.append(out.logits.data)
                jstars.extend(r.j_star for r in out.retrieval)
    finally:
        model.train(was_training)
    return np.concatenate(logits), np.array(jstars, dtype=np.int64).reshape(-1, 4)


def evaluate(model: StpnetModel, bank: EncodedBank, dataset: SegDataset, split: str = "test", batch_size: int = 32) -> EvalReport:
    cfg = model.cfg
    if dataset.images.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise InvalidArgumentError(
            f"dataset images {dataset.images.shape[1:]} do not match the model config"
        )
    logits, jstars = predict_batches(model, bank, dataset.images, batch_size)
    preds = (logits > 0).astype(np.uint8)
    per = [metrics(p, g) for p, g in zip(preds, dataset.masks)]
    agg = {k: float(np.mean([m[k] for m in per])) for k in ("dice", "iou", "precision", "recall")}
    top1 = [float(np.mean(jstars[:, c] == dataset.labels[:, c])) for c in range(4)]
    return EvalReport(split, len(dataset), retrieval_top1=top1, **agg)


def check_label_coverage(dataset: SegDataset) -> List[str]:
    warnings = []
    for c, n in enumerate(CATEGORY_SIZES):
        seen = set(np.unique(dataset.labels[:, c]).tolist())
        missing = sorted(set(range(n)) - seen)
        if missing:
            warnings.append(f"{CATEGORIES[c]}: no samples with label(s) {missing}")
    return warnings


@dataclass
class TrainResult:
    model: StpnetModel
    history: List[dict]
    best_epoch: int
    best_val_dice: float


def train(
    train_cfg: TrainConfig,
    model_cfg: StpnetConfig,
    train_set: SegDataset,
    val_set: Optional[SegDataset] = None,
    bank: Optional[EncodedBank] = None,
    log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Optimize the mixed objective; keep the weights with the best validation Dice."""
    from .blocks import build_model

    model, default_bank = build_model(model_cfg)
    bank = bank or default_bank
    for w in check_label_coverage(train_set):
        logger.warning("training set missing labels: %s", w)
    lambdas = (model_cfg.lambda1, model_cfg.lambda2, model_cfg.lambda3)
    opt = Adam(model.parameters(), train_cfg.lr, (train_cfg.beta1, train_cfg.beta2), train_cfg.adam_eps)
    rng = np.random.default_rng([train_cfg.seed, 0x5EED])
    n = len(train_set)
    bs = train_cfg.batch_size
    history: List[dict] = []
    best_state, best_dice, best_epoch, stale = None, -1.0, -1, 0
    step, last_loss = 0, None
    model.train()
    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        sums = {"seg": 0.0, "retrieval": 0.0, "focal": 0.0, "mix": 0.0}
        batches = 0
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            if len(idx) * model_cfg.image_size ** 2 // 256 < 2:
                continue  # deepest batch norm needs at least two values per channel
            x = Tensor(train_set.images[idx].astype(model.dtype))
            labels = train_set.labels[idx].astype(np.int64)
            try:
                out = model(x, bank, text_indices=labels if train_cfg.teacher_force_text else None)
                rep = compute_losses(model, out, train_set.masks[idx], labels, bank, lambdas, model_cfg.tau, model_cfg.gamma)
                if not np.isfinite(rep.mix):
                    raise NumericError("loss is not finite")
                opt.zero_grad()
                rep.total.backward()
            except NumericError as exc:
                raise NumericError(
                    f"training diverged at epoch {epoch}, step {step}: {exc}; last finite loss {last_loss}"
                ) from exc
            opt.step()
            step += 1
            last_loss = rep.mix
            for k in sums:
                sums[k] += getattr(rep, k)
            batches += 1
        record = {"epoch": epoch, "step": step}
        record.update({f"train_{k}": v / max(batches, 1) for k, v in sums.items()})
        if val_set is not None:
            ev = evaluate(model, bank, val_set, "val", train_cfg.eval_batch_size)
            record.update({f"val_{k}": v for k, v in ev.to_record().items() if k not in ("split", "n")})
            val_dice = ev.dice
        else:
            val_dice = -record["train_mix"]
        if val_dice > best_dice:
            best_dice, best_epoch, stale = val_dice, epoch, 0
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        else:
            stale += 1
        record["best_val_dice"] = best_dice
        history.append(record)
        logger.info("%s (%.1fs)", json.dumps(record), time.perf_counter() - t0)
        if log is not None:
            log(record)
        if stale >= train_cfg.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_dice)
