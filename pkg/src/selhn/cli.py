"""Command-line entry points.

Subcommands: gen-data, train, eval, grad-check, version. Exit codes: 0 on
success, 2 for configuration errors, 3 for data/format errors, 4 for a
numerical abort during training.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .data import SynthConfig, gen_synthetic, write_features
from .errors import ConfigError, DataFormatError, NumericalAbort
from .evalmetrics import DIRECTIONS, RSUM_KS
from .harness import parse_config, run_eval, run_gradcheck, run_training


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selhn",
        description="Triplet-loss-family training and diagnostics on paired "
                    "two-modality feature sets")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic HNSF feature file")
    g.add_argument("--n-items", type=int, default=2200)
    g.add_argument("--latent-dim", type=int, default=16)
    g.add_argument("--dv", type=int, default=64)
    g.add_argument("--dt", type=int, default=64)
    g.add_argument("--regions", type=int, default=4)
    g.add_argument("--words", type=int, default=4)
    g.add_argument("--noise-sigma", type=float, default=0.1)
    g.add_argument("--confuser-fraction", type=float, default=0.3)
    g.add_argument("--confuser-perturb", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True, help="output .hnsf path")

    t = sub.add_parser("train", help="train per config file and flags")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--loss", help="triplet|hn|shn|sct|selhn")
    t.add_argument("--arch", help="fc|mlp|rmlp (both encoders)")
    t.add_argument("--epsilon", help="no-mining threshold")
    t.add_argument("--margin", help="hinge margin")
    t.add_argument("--epochs")
    t.add_argument("--batch")
    t.add_argument("--seed")
    t.add_argument("--data", help="HNSF feature file (default: synthetic)")
    t.add_argument("--out", help="output directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val",
                   choices=["train", "val", "test", "all"])
    e.add_argument("--val-items", type=int, default=200)
    e.add_argument("--test-items", type=int, default=0)
    e.add_argument("--out", help="also write the report CSV here")

    c = sub.add_parser("grad-check",
                       help="finite-difference check, 5 losses x 3 archs")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--step", type=float, default=1e-6)
    c.add_argument("--base-seed", type=int, default=0)

    sub.add_parser("version", help="print version")
    return parser


def _cmd_gen_data(args) -> int:
    cfg = SynthConfig(
        n_items=args.n_items, latent_dim=args.latent_dim, d_v=args.dv,
        d_t=args.dt, regions=args.regions, words=args.words,
        noise_sigma=args.noise_sigma,
        confuser_fraction=args.confuser_fraction,
        confuser_perturb=args.confuser_perturb, seed=args.seed)
    ds = gen_synthetic(cfg)
    write_features(args.out, ds)
    print(f"wrote {len(ds)} items ({cfg.d_v}/{cfg.d_t} dims) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    overrides = {}
    for key, flag in (("loss", args.loss), ("epsilon", args.epsilon),
                      ("margin", args.margin), ("epochs", args.epochs),
                      ("batch", args.batch), ("seed", args.seed),
                      ("data", args.data), ("out", args.out)):
        if flag is not None:
            overrides[key] = flag
    if args.arch is not None:
        overrides["img_arch"] = args.arch
        overrides["txt_arch"] = args.arch
    cfg = parse_config(args.config, overrides)
    result = run_training(cfg)
    last = result.rows[-1]
    print(f"finished {cfg.epochs} epochs: final loss "
          f"{last['loss_value']:.4f}, best val rsum {result.best_rsum:.2f}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _cmd_eval(args) -> int:
    report = run_eval(args.ckpt, args.data, args.split,
                      val_items=args.val_items, test_items=args.test_items)
    print(report)
    header = [f"r{k}_{d}" for d in DIRECTIONS for k in RSUM_KS] + ["rsum"]
    values = [repr(report.r_at[(d, k)]) for d in DIRECTIONS for k in RSUM_KS] \
        + [repr(report.rsum)]
    csv_text = ",".join(header) + "\n" + ",".join(values) + "\n"
    out = Path(args.out) if args.out else \
        Path(args.ckpt).parent / f"eval_{args.split}.csv"
    out.write_text(csv_text, encoding="ascii")
    print(f"report: {out}")
    return 0


def _cmd_grad_check(args) -> int:
    report = run_gradcheck(seeds=args.seeds, step=args.step,
                           base_seed=args.base_seed)
    print(report)
    return 0 if report.passed else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "grad-check":
            return _cmd_grad_check(args)
        print(__version__)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
