"""Decoder activation maps exported as binary PGM images."""
from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np

from .autodiff import Tensor, no_grad
from .blocks import StpnetModel
from .errors import InvalidArgumentError
from .textbank import EncodedBank

SALIENCY_SIZE = 64


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary (P5) PGM, maxval 255."""
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise InvalidArgumentError("PGM export needs a 2-D uint8 array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise InvalidArgumentError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise InvalidArgumentError(f"{path}: only 8-bit PGM is supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pix.reshape(h, w)


def activation_map(act: np.ndarray, size: int = SALIENCY_SIZE) -> np.ndarray:
    """Channel-mean |activation| of one sample [C,h,w], scaled to 0..255 at ``size``x``size``.

    A constant map (including all zeros) becomes all zeros.
    """
    act = np.asarray(act, dtype=np.float64)
    if act.ndim != 3:
        raise InvalidArgumentError("activation must be [C, h, w]")
    m = np.abs(act).mean(axis=0)
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi - lo <= 0 else (m - lo) / (hi - lo) * 255.0
    return _nearest(np.rint(scaled).astype(np.uint8), size)


def _nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    if size % h or size % w:
        raise InvalidArgumentError(f"cannot upsample {h}x{w} to {size}x{size}")
    return np.repeat(np.repeat(img, size // h, axis=0), size // w, axis=1)


def export_saliency(model: StpnetModel, bank: EncodedBank, image: np.ndarray, out_prefix) -> List[Path]:
    """Write ``{prefix}_up1..4.pgm`` and ``{prefix}_mask.pgm``; return the paths."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise InvalidArgumentError("image must be [H, W] or [C, H, W]")
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = model(Tensor(image[None].astype(model.dtype)), bank, keep_activations=True)
    finally:
        model.train(was_training)
    prefix = str(out_prefix)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(1, 5):
        p = Path(f"{prefix}_up{k}.pgm")
        write_pgm(p, activation_map(out.activations[f"up{k}"].data[0]))
        paths.append(p)
    p = Path(f"{prefix}_mask.pgm")
    write_pgm(p, _nearest(out.mask()[0, 0] * np.uint8(255), SALIENCY_SIZE))
    paths.append(p)
    return paths
