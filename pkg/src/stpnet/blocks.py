"""Segmentation network: EnBlock, MTBlock, SSM, UTrans, UpBlock and the full model."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgumentError
from .nn import BatchNorm2d, Conv2d, ConvBNReLU, LayerNorm, Linear, Module, ModuleList, Parameter
from .retrieval import DEFAULT_ORDER, SWAPPED_ORDER, RetrievalEncoder, RetrievalResult, batch_text_features, retrieve
from .textbank import CATEGORY_SIZES, EncodedBank


@dataclass(frozen=True)
class StpnetConfig:
    in_channels: int = 1
    base_channels: Tuple[int, ...] = (16, 32, 64, 128, 256)
    image_size: int = 64
    text_len: int = 8
    text_dim: int = 32
    text_seed: int = 0
    domain: str = "lung"
    heads: int = 4
    dilations: Tuple[int, ...] = (6, 12, 18)
    utrans_stages: Tuple[int, ...] = (2, 3, 4)
    mlp_ratio: int = 4
    retrieval_widths: Tuple[int, ...] = (16, 32, 64, 128)
    retrieval_hidden: int = 128
    retrieval_coords: bool = False
    tau: float = 0.07
    gamma: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    seed: int = 0
    no_text: bool = False
    no_ssm: bool = False
    no_utrans_text: bool = False
    swap_loc_order: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.base_channels) != 5:
            raise InvalidArgumentError("base_channels needs 5 entries")
        if self.image_size % 16:
            raise InvalidArgumentError("image_size must be divisible by 16")
        for s in self.utrans_stages:
            if s not in (1, 2, 3, 4):
                raise InvalidArgumentError("utrans_stages must be within 1..4")
            if self.base_channels[s] % self.heads:
                raise InvalidArgumentError(
                    f"stage {s} width {self.base_channels[s]} not divisible by {self.heads} heads"
                )
        if len(self.retrieval_widths) != 4:
            raise InvalidArgumentError("retrieval_widths needs 4 entries")
        if self.tau <= 0:
            raise InvalidArgumentError("tau must be positive")

    @property
    def loc_order(self) -> Tuple[int, ...]:
        return SWAPPED_ORDER if self.swap_loc_order else DEFAULT_ORDER

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StpnetConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known}
        return cls(**kw)


class EnBlock(Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.c1 = ConvBNReLU(cin, cout)
        self.c2 = ConvBNReLU(cout, cout)

    def forward(self, img: Tensor) -> Tensor:
        return self.c2(self.c1(img))


def text_global_mean(f_text: np.ndarray) -> np.ndarray:
    """Scalar mean of each [L, D] text grid; input [..., L, D]."""
    return np.asarray(f_text).mean(axis=(-2, -1))


class MTBlock(Module):
    """Concatenate a constant text channel, then maxpool -> BN -> conv3x3 -> ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.bn = BatchNorm2d(cin + 1)
        self.conv = Conv2d(cin + 1, cout, 3, padding=1)

    def forward(self, x: Tensor, f_text: np.ndarray) -> Tensor:
        B, C, H, W = x.shape
        if H % 2 or W % 2:
            raise InvalidArgumentError("MTBlock needs even spatial dims")
        tbar = text_global_mean(f_text).astype(x.dtype).reshape(B, 1, 1, 1)
        const = Tensor(np.broadcast_to(tbar, (B, 1, H, W)).copy())
        z = ad.maxpool2d(ad.concat([x, const], axis=1), 2)
        return self.conv(self.bn(z)).relu()


class SSM(Module):
    """Spatial gate plus summed dilated convolutions, added back to the input.

    The output projection starts at zero, so a fresh module is the identity.
    """

    def __init__(self, channels: int, dilations: Sequence[int] = (6, 12, 18)):
        super().__init__()
        c = channels
        self.inp = Conv2d(c, c, 1)
        self.sp_dw = Conv2d(c, c, 3, padding=1, groups=c)
        self.sp_pw = Conv2d(c, c, 1)
        self.dilated = ModuleList(Conv2d(c, c, 3, padding=d, dilation=d) for d in dilations)
        self.ms_dw = Conv2d(c, c, 3, padding=1, groups=c)
        self.out = Conv2d(2 * c, c, 1, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        xp = self.inp(x)
        f_sp = xp * self.sp_pw(self.sp_dw(xp)).sigmoid()
        f_msa = None
        for conv in self.dilated:
            y = conv(xp)
            f_msa = y if f_msa is None else f_msa + y
        f_ms = xp * self.ms_dw(f_msa)
        return x + self.out(ad.concat([f_sp, f_ms], axis=1))


class UTrans(Module):
    """Transformer encoder block over image tokens and text tokens that keeps
    only the image tokens after attention."""

    def __init__(self, channels: int, n_tokens: int, text_dim: int, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        if channels % heads:
            raise InvalidArgumentError(f"{channels} channels not divisible by {heads} heads")
        c = channels
        self.heads = heads
        self.n_tokens = n_tokens
        self.pos = Parameter((1, n_tokens, c), ("normal", 0.02))
        self.text_proj = Linear(text_dim, c)
        self.norm1 = LayerNorm(c)
        self.wq = Linear(c, c)
        self.wk = Linear(c, c, bias=False)  # a key bias cancels in the softmax
        self.wv = Linear(c, c)
        self.proj = Linear(c, c)
        self.norm2 = LayerNorm(c)
        self.fc1 = Linear(c, mlp_ratio * c)
        self.fc2 = Linear(mlp_ratio * c, c)

    def forward(self, x: Tensor, f_text: Optional[np.ndarray] = None, return_weights: bool = False):
        B, C, H, W = x.shape
        N = H * W
        if N != self.n_tokens:
            raise InvalidArgumentError(f"UTrans built for {self.n_tokens} tokens, got {N}")
        img = x.reshape(B, C, N).transpose(0, 2, 1) + self.pos
        seq = img
        if f_text is not None and f_text.shape[-2] > 0:
            t = self.text_proj(Tensor(np.asarray(f_text, dtype=x.dtype)))
            seq = ad.concat([img, t], axis=1)
        X = self.norm1(seq)
        att, weights = ad.scaled_dot_attention(
            self.wq(X), self.wk(X), self.wv(X), self.heads, return_weights=True
        )
        i_prime = att[:, :N] if seq is not img else att
        h = img + self.proj(i_prime)
        h = h + self.fc2(ad.gelu(self.fc1(self.norm2(h))))
        out = h.transpose(0, 2, 1).reshape(B, C, H, W)
        return (out, weights) if return_weights else out


class UpBlock(Module):
    """Bilinear 2x upsample, concatenate the skip, two conv-BN-ReLU layers."""

    def __init__(self, cin: int, cskip: int, cout: int):
        super().__init__()
        self.c1 = ConvBNReLU(cin + cskip, cout)
        self.c2 = ConvBNReLU(cout, cout)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        B, C, H, W = x.shape
        if skip.shape[0] != B or skip.shape[2:] != (2 * H, 2 * W):
            raise InvalidArgumentError(
                f"skip {skip.shape} does not match upsampled input {(B, C, 2 * H, 2 * W)}"
            )
        z = ad.concat([ad.upsample2x(x, "bilinear"), skip], axis=1)
        return self.c2(self.c1(z))


@dataclass
class StpnetOutput:
    logits: Tensor
    f_v: Tensor
    retrieval: List[RetrievalResult]
    text: List[np.ndarray]  # F_text,1..4 as [B, L, D]
    activations: Dict[str, Tensor] = field(default_factory=dict)

    def mask(self) -> np.ndarray:
        return (self.logits.data > 0).astype(np.uint8)


class StpnetModel(Module):
    def __init__(self, cfg: StpnetConfig = StpnetConfig()):
        super().__init__()
        self.cfg = cfg
        ch = cfg.base_channels
        s = cfg.image_size
        self.retrieval = RetrievalEncoder(
            cfg.in_channels, cfg.retrieval_widths, cfg.retrieval_hidden, cfg.text_dim, cfg.retrieval_coords
        )
        self.focal_heads = ModuleList(Linear(cfg.text_dim, n) for n in CATEGORY_SIZES)
        self.enblock = EnBlock(cfg.in_channels, ch[0])
        self.mtblocks = ModuleList(MTBlock(ch[i], ch[i + 1]) for i in range(4))
        if not cfg.no_ssm:
            self.ssms = ModuleList(SSM(ch[i + 1], cfg.dilations) for i in range(4))
        self.utrans = ModuleList(
            UTrans(ch[i], (s >> i) ** 2, cfg.text_dim, cfg.heads, cfg.mlp_ratio)
            for i in cfg.utrans_stages
        )
        self.upblocks = ModuleList(UpBlock(ch[i], ch[i - 1], ch[i - 1]) for i in range(4, 0, -1))
        self.head = Conv2d(ch[0], 1, 1)
        self.reset_parameters(cfg.seed)

    def focal_logits(self, f_v: Tensor) -> List[Tensor]:
        return [h(f_v) for h in self.focal_heads]

    def text_features(
        self,
        retrieval: Sequence[RetrievalResult],
        bank: EncodedBank,
        indices: Optional[np.ndarray] = None,
    ) -> List[np.ndarray]:
        """F_text,1..4 from retrieved indices, or from ``indices`` when teacher forcing."""
        if indices is None:
            indices = np.array([r.j_star for r in retrieval], dtype=np.int64).reshape(-1, 4)
        feats = batch_text_features(indices, bank, self.cfg.loc_order)
        if self.cfg.no_text:
            feats = [np.zeros_like(f) for f in feats]
        return [f.astype(self.dtype) for f in feats]

    def forward(
        self,
        img: Tensor,
        bank: EncodedBank,
        text_indices: Optional[np.ndarray] = None,
        keep_activations: bool = False,
    ) -> StpnetOutput:
        cfg = self.cfg
        if bank.dim != cfg.text_dim or bank.length != cfg.text_len:
            raise InvalidArgumentError("text bank dims do not match the model config")
        if img.ndim != 4 or img.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise InvalidArgumentError(
                f"expected images [B,{cfg.in_channels},{cfg.image_size},{cfg.image_size}], got {img.shape}"
            )
        f_v = self.retrieval(img)
        results = [retrieve(f_v.data[b], bank, cfg.tau) for b in range(img.shape[0])]
        text = self.text_features(results, bank, text_indices)
        for r, b in zip(results, range(len(results))):
            r.recombined = [t[b] for t in text]

        acts: Dict[str, Tensor] = {}
        skips = [self.enblock(img)]
        h = skips[0]
        ut = {s: m for s, m in zip(cfg.utrans_stages, self.utrans)}
        for i in range(1, 5):
            h = self.mtblocks[i - 1](h, text[i - 1])
            if not cfg.no_ssm:
                h = self.ssms[i - 1](h)
            if i in ut:
                t = None if cfg.no_utrans_text else text[min(i + 1, 4) - 1]
                h = ut[i](h, t)
            skips.append(h)
        h = skips[4]
        for k, up in enumerate(self.upblocks):
            h = up(h, skips[3 - k])
            if keep_activations:
                acts[f"up{k + 1}"] = h
        logits = self.head(h)
        return StpnetOutput(logits, f_v, results, text, acts)


def stpnet_forward(img: Tensor, model: StpnetModel, bank: EncodedBank, **kw) -> StpnetOutput:
    return model(img, bank, **kw)


def build_model(cfg: StpnetConfig = StpnetConfig()) -> Tuple[StpnetModel, EncodedBank]:
    from .textbank import build_text_bank

    bank = EncodedBank(build_text_bank(cfg.domain), cfg.text_seed, cfg.text_len, cfg.text_dim)
    return StpnetModel(cfg), bank
