"""Finite-difference gradient checks over every primitive, block and loss."""
from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .blocks import SSM, EnBlock, MTBlock, StpnetConfig, UpBlock, UTrans
from .blocks import build_model
from .losses import compute_losses, cross_entropy, focal_loss, retrieval_loss, seg_loss
from .nn import Linear, Module
from .retrieval import RetrievalEncoder, batch_text_features
from .textbank import CATEGORY_SIZES, EncodedBank, build_text_bank

# Small 32x32 model used for gradient checks.
REDUCED_CONFIG = StpnetConfig(
    base_channels=(4, 8, 8, 8, 8),
    image_size=32,
    text_len=4,
    text_dim=8,
    heads=2,
    mlp_ratio=2,
    retrieval_widths=(4, 4, 8, 8),
    retrieval_hidden=8,
)

Case = Tuple[Callable[[], Tensor], List[Tensor]]


def _leaf(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64, requires_grad=True)


def _f64(module: Module, seed: int) -> Module:
    module.reset_parameters(seed)
    return module.astype(np.float64).train()


def _weighted(out: Tensor, rng) -> Tensor:
    # A plain sum after batch norm has zero gradient; random weights avoid that.
    return (out * Tensor(rng.standard_normal(out.shape))).sum()


def _text(cfg: StpnetConfig, rng, batch: int) -> List[np.ndarray]:
    bank = EncodedBank(build_text_bank(cfg.domain), cfg.text_seed, cfg.text_len, cfg.text_dim)
    idx = np.stack([rng.integers(0, n, batch) for n in CATEGORY_SIZES], axis=1)
    return batch_text_features(idx, bank, cfg.loc_order)


def _primitive_cases(rng) -> Dict[str, Case]:
    cases: Dict[str, Case] = {}
    x = _leaf(rng, (2, 3, 8, 8))
    w = _leaf(rng, (4, 3, 3, 3))
    b = _leaf(rng, (4,))
    r = rng.standard_normal((2, 4, 8, 8))
    cases["conv2d"] = (lambda: (ad.conv2d(x, w, b, padding=1) * Tensor(r)).sum(), [x, w, b])
    xd = _leaf(rng, (1, 2, 8, 8))
    wd = _leaf(rng, (2, 2, 3, 3))
    rd = rng.standard_normal((1, 2, 8, 8))
    cases["conv2d_dilated"] = (lambda: (ad.conv2d(xd, wd, padding=6, dilation=6) * Tensor(rd)).sum(), [xd, wd])
    wdw = _leaf(rng, (3, 1, 3, 3))
    rdw = rng.standard_normal((2, 3, 8, 8))
    cases["conv2d_depthwise"] = (lambda: (ad.conv2d(x, wdw, padding=1, groups=3) * Tensor(rdw)).sum(), [x, wdw])
    rp = rng.standard_normal((2, 3, 4, 4))
    cases["maxpool2d"] = (lambda: (ad.maxpool2d(x, 2) * Tensor(rp)).sum(), [x])
    g, be = _leaf(rng, (3,)), _leaf(rng, (3,))
    rb = rng.standard_normal(x.shape)
    cases["batchnorm2d"] = (
        lambda: (ad.batchnorm2d(x, g, be, np.zeros(3), np.ones(3), True) * Tensor(rb)).sum(),
        [x, g, be],
    )
    q, k, v = (_leaf(rng, (2, 5, 8)) for _ in range(3))
    ra = rng.standard_normal((2, 5, 8))
    cases["scaled_dot_attention"] = (lambda: (ad.scaled_dot_attention(q, k, v, 2) * Tensor(ra)).sum(), [q, k, v])
    t = _leaf(rng, (8, 16))
    lg, lb = _leaf(rng, (16,)), _leaf(rng, (16,))
    rl = rng.standard_normal((8, 16))
    cases["layer_norm"] = (lambda: (ad.layer_norm(t, lg, lb) * Tensor(rl)).sum(), [t, lg, lb])
    cases["gelu"] = (lambda: (ad.gelu(t) * Tensor(rl)).sum(), [t])
    cases["softmax"] = (lambda: (ad.softmax(t) * Tensor(rl)).sum(), [t])
    u = _leaf(rng, (1, 2, 8, 8))
    ru = rng.standard_normal((1, 2, 16, 16))
    cases["upsample2x_bilinear"] = (lambda: (ad.upsample2x(u, "bilinear") * Tensor(ru)).sum(), [u])
    return cases


def _block_cases(cfg: StpnetConfig, rng, batch: int = 2) -> Dict[str, Case]:
    ch, s = cfg.base_channels, cfg.image_size
    text = _text(cfg, rng, batch)
    cases: Dict[str, Case] = {}

    en = _f64(EnBlock(cfg.in_channels, ch[0]), cfg.seed)
    img = _leaf(rng, (batch, cfg.in_channels, s, s))
    r = rng.standard_normal((batch, ch[0], s, s))
    cases["EnBlock"] = (lambda: (en(img) * Tensor(r)).sum(), [img] + en.parameters())

    mt = _f64(MTBlock(ch[0], ch[1]), cfg.seed)
    x0 = _leaf(rng, (batch, ch[0], s, s))
    r1 = rng.standard_normal((batch, ch[1], s // 2, s // 2))
    cases["MTBlock"] = (lambda: (mt(x0, text[0]) * Tensor(r1)).sum(), [x0] + mt.parameters())

    ssm = _f64(SSM(ch[1], cfg.dilations), cfg.seed)
    # The output projection starts at zero; randomize it so every branch is exercised.
    ssm.out.weight.data[...] = rng.standard_normal(ssm.out.weight.shape) * 0.5
    x1 = _leaf(rng, (batch, ch[1], s // 2, s // 2))
    cases["SSM"] = (lambda: (ssm(x1) * Tensor(r1)).sum(), [x1] + ssm.parameters())

    stage = cfg.utrans_stages[0]
    n = s >> stage
    ut = _f64(UTrans(ch[stage], n * n, cfg.text_dim, cfg.heads, cfg.mlp_ratio), cfg.seed)
    x2 = _leaf(rng, (batch, ch[stage], n, n))
    r2 = rng.standard_normal(x2.shape)
    t2 = text[min(stage + 1, 4) - 1]
    cases["UTrans"] = (lambda: (ut(x2, t2) * Tensor(r2)).sum(), [x2] + ut.parameters())

    up = _f64(UpBlock(ch[4], ch[3], ch[3]), cfg.seed)
    x4 = _leaf(rng, (batch, ch[4], s // 16, s // 16))
    sk = _leaf(rng, (batch, ch[3], s // 8, s // 8))
    r3 = rng.standard_normal((batch, ch[3], s // 8, s // 8))
    cases["UpBlock"] = (lambda: (up(x4, sk) * Tensor(r3)).sum(), [x4, sk] + up.parameters())

    enc = _f64(
        RetrievalEncoder(cfg.in_channels, cfg.retrieval_widths, cfg.retrieval_hidden, cfg.text_dim, cfg.retrieval_coords),
        cfg.seed,
    )
    img2 = _leaf(rng, (batch, cfg.in_channels, s, s))
    rv = rng.standard_normal((batch, cfg.text_dim))
    cases["RetrievalEncoder"] = (lambda: (enc(img2) * Tensor(rv)).sum(), [img2] + enc.parameters())
    return cases


def _loss_cases(cfg: StpnetConfig, rng, batch: int = 13) -> Dict[str, Case]:
    bank = EncodedBank(build_text_bank(cfg.domain), cfg.text_seed, cfg.text_len, cfg.text_dim)
    labels = np.stack([rng.integers(0, n, batch) for n in CATEGORY_SIZES], axis=1)
    cases: Dict[str, Case] = {}

    logits = _leaf(rng, (batch, 1, 8, 8), 2.0)
    gt = (rng.random((batch, 1, 8, 8)) < 0.4).astype(np.uint8)
    cases["seg_loss"] = (lambda: seg_loss(logits, gt), [logits])

    f_v = _leaf(rng, (batch, cfg.text_dim))
    cases["retrieval_loss"] = (lambda: retrieval_loss(f_v, bank.pooled, labels, cfg.tau), [f_v])

    heads = [_f64(Linear(cfg.text_dim, n), cfg.seed + i) for i, n in enumerate(CATEGORY_SIZES)]
    hp = [p for h in heads for p in h.parameters()]
    cases["focal_loss"] = (lambda: focal_loss(f_v, heads, labels, cfg.gamma), [f_v] + hp)
    zs = [_leaf(rng, (batch, n)) for n in CATEGORY_SIZES]
    cases["cross_entropy"] = (lambda: cross_entropy(zs, labels), zs)
    return cases


def run_gradient_suite(
    cfg: StpnetConfig = REDUCED_CONFIG,
    n_samples: int = 100,
    eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    include: Optional[List[str]] = None,
    log: Optional[Callable[[str], None]] = None,
) -> List[GradCheckReport]:
    """Run every check; ``include`` restricts to the named cases."""
    rng = np.random.default_rng(seed)
    cases: Dict[str, Case] = {}
    cases.update(_primitive_cases(rng))
    cases.update(_block_cases(cfg, rng))
    cases.update(_loss_cases(cfg, rng))
    reports = []
    for name, (f, params) in cases.items():
        if include is not None and name not in include:
            continue
        t0 = time.perf_counter()
        rep = grad_check(f, params, eps=eps, tol=tol, n_samples=n_samples, seed=seed, name=name)
        reports.append(rep)
        if log is not None:
            log(f"{rep} [{time.perf_counter() - t0:.1f}s]")
    return reports


def model_mix_check(
    cfg: StpnetConfig = REDUCED_CONFIG, n_samples: int = 200, eps: float = 1e-5, tol: float = 1e-3, seed: int = 0
) -> GradCheckReport:
    """End-to-end check of the mixed loss w.r.t. a sample of all model parameters.

    Text is teacher-forced so that a perturbation cannot flip a retrieval
    argmax and make the objective discontinuous.  With hundreds of thousands
    of ReLU and max-pool units, some eps-perturbations cross a kink; those
    coordinates are detected from their one-sided slopes and replaced.
    """
    rng = np.random.default_rng(seed)
    model, bank = build_model(cfg)
    model.astype(np.float64).train()
    for m in model.modules():
        if isinstance(m, SSM):
            m.out.weight.data[...] = rng.standard_normal(m.out.weight.shape) * 0.5
    s = cfg.image_size
    img = Tensor(rng.standard_normal((2, cfg.in_channels, s, s)))
    masks = (rng.random((2, 1, s, s)) < 0.3).astype(np.uint8)
    labels = np.stack([rng.integers(0, n, 2) for n in CATEGORY_SIZES], axis=1)
    lambdas = (cfg.lambda1, cfg.lambda2, cfg.lambda3)

    def f():
        out = model(img, bank, text_indices=labels)
        return compute_losses(model, out, masks, labels, bank, lambdas, cfg.tau, cfg.gamma).total

    return grad_check(
        f, model.parameters(), eps=eps, tol=tol, n_samples=n_samples, seed=seed,
        name="StpnetModel L_mix", kink_tol=tol,
    )


def suite_names(cfg: StpnetConfig = REDUCED_CONFIG) -> List[str]:
    rng = np.random.default_rng(0)
    return list(_primitive_cases(rng)) + list(_block_cases(cfg, rng)) + list(_loss_cases(cfg, rng))
