"""Command-line entry point: ``stpnet <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .blocks import StpnetConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import IntegrityError, StpnetError, VersionError
from .gradsuite import REDUCED_CONFIG, model_mix_check, run_gradient_suite
from .saliency import export_saliency, read_pgm
from .synthgen import generate_dataset, generate_split, load_dataset, save_dataset
from .textbank import EncodedBank, TextBank, build_text_bank
from .training import evaluate, train

logger = logging.getLogger("stpnet")

EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_DATA = 3


def _bank(cfg: StpnetConfig, path: Optional[str]) -> EncodedBank:
    tb = TextBank.load(path) if path else build_text_bank(cfg.domain)
    return EncodedBank(tb, cfg.text_seed, cfg.text_len, cfg.text_dim)


def _load_image(path: str, index: int) -> np.ndarray:
    """[1, H, W] float32 from a .npy array, an 8-bit PGM or a dataset file."""
    p = Path(path)
    head = p.read_bytes()[:5]
    if head == b"STPD1":
        ds = load_dataset(p)
        if not 0 <= index < len(ds):
            raise StpnetError(f"--index {index} outside dataset of {len(ds)}")
        return ds.images[index]
    if head[:2] == b"P5":
        return (read_pgm(p).astype(np.float32) / 255.0)[None]
    arr = np.load(p).astype(np.float32)
    return arr[None] if arr.ndim == 2 else arr


def _run_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        rc = rc.with_seed(args.seed)
    m = {}
    for flag in ("no_text", "no_ssm", "swap_loc_order"):
        if getattr(args, flag, False):
            m[flag] = True
    for key in ("lambda1", "lambda2", "lambda3", "tau"):
        if getattr(args, key, None) is not None:
            m[key] = getattr(args, key)
    t = {}
    if getattr(args, "teacher_force_text", False):
        t["teacher_force_text"] = True
    for key in ("epochs", "batch_size", "lr"):
        val = getattr(args, key, None)
        if val is not None:
            t["max_epochs" if key == "epochs" else key] = val
    return replace(rc, model=replace(rc.model, **m), train=replace(rc.train, **t))


# ------------------------------------------------------------------ commands
def cmd_gen(args) -> int:
    ds = generate_dataset(args.seed or 0, range(args.offset, args.offset + args.n))
    save_dataset(ds, args.out)
    print(json.dumps({"out": args.out, "n": len(ds), "label_marginals": ds.label_marginals()}))
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    if args.train_data:
        train_set = load_dataset(args.train_data)
        val_set = load_dataset(args.val_data) if args.val_data else None
    else:
        d = rc.data
        split = generate_split(d.seed, d.n_train, d.n_val, d.n_test)
        train_set, val_set = split["train"], split["val"]
    bank = _bank(rc.model, args.text_bank)
    log_path = Path(args.log or f"{args.out}.metrics.jsonl")
    with open(log_path, "w") as log_fh:
        def log(rec):
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

        res = train(rc.train, rc.model, train_set, val_set, bank, log)
    save_checkpoint(res.model, args.out, extra={"train": rc.train.to_dict(), "best_epoch": res.best_epoch})
    print(json.dumps({"checkpoint": args.out, "metrics_log": str(log_path),
                      "best_epoch": res.best_epoch, "best_val_dice": res.best_val_dice}))
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    if args.data:
        ds = load_dataset(args.data)
    else:
        rc = _run_config(args)
        d = rc.data
        ds = generate_split(d.seed, d.n_train, d.n_val, d.n_test)["test"]
    rep = evaluate(model, _bank(model.cfg, args.text_bank), ds, "test")
    text = rep.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_retrieve(args) -> int:
    model = load_checkpoint(args.ckpt)
    bank = _bank(model.cfg, args.text_bank)
    img = _load_image(args.image, args.index)
    from .autodiff import Tensor, no_grad
    from .retrieval import retrieve

    with no_grad():
        f_v = model.retrieval(Tensor(img[None].astype(model.dtype))).data[0]
    tau = args.tau if args.tau is not None else model.cfg.tau
    print(retrieve(f_v, bank, tau).report(bank.bank))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = REDUCED_CONFIG
    if args.config:
        cfg = RunConfig.load(args.config).model
    reports = run_gradient_suite(cfg, n_samples=args.n, tol=args.tol, seed=args.seed or 0, log=print)
    if args.mix:
        rep = model_mix_check(cfg, seed=args.seed or 0)
        print(rep)
        reports.append(rep)
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_FAIL
    return 0


def cmd_saliency(args) -> int:
    model = load_checkpoint(args.ckpt)
    bank = _bank(model.cfg, args.text_bank)
    paths = export_saliency(model, bank, _load_image(args.image, args.index), args.out)
    for p in paths:
        print(p)
    return 0


# -------------------------------------------------------------------- parser
def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--no-text", action="store_true", dest="no_text")
    p.add_argument("--no-ssm", action="store_true", dest="no_ssm")
    p.add_argument("--swap-loc-order", action="store_true", dest="swap_loc_order")
    p.add_argument("--teacher-force-text", action="store_true", dest="teacher_force_text")
    for k in (1, 2, 3):
        p.add_argument(f"--lambda{k}", type=float, dest=f"lambda{k}")
    p.add_argument("--tau", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stpnet", description="Text-prompted lesion segmentation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--offset", type=int, default=0, help="first sample index")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_model_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="metrics log (default: <out>.metrics.jsonl)")
    p.add_argument("--train-data", dest="train_data")
    p.add_argument("--val-data", dest="val_data")
    p.add_argument("--text-bank", dest="text_bank")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", help="JSON run configuration (data section used)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="dataset file (default: generated test split)")
    p.add_argument("--out", help="write the JSON report here too")
    p.add_argument("--text-bank", dest="text_bank")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="print per-category retrieval scores for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help=".npy, 8-bit PGM or dataset file")
    p.add_argument("--index", type=int, default=0, help="sample index for dataset files")
    p.add_argument("--text-bank", dest="text_bank")
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every block and loss")
    p.add_argument("--config", help="JSON run configuration (model section used)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=100, help="coordinates per check")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--mix", action="store_true", help="also check the full mixed loss end to end (tol 1e-3)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("saliency", help="export decoder activation maps as PGM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--text-bank", dest="text_bank")
    p.set_defaults(func=cmd_saliency)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (IntegrityError, VersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (StpnetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
