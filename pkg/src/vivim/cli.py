"""Command-line entry point: ``vivim <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .tensor import NonFiniteError


def _cmd_gen(args) -> int:
    from .data import generate_dataset
    paths = generate_dataset(args.seed, args.count, args.frames, args.size, args.out,
                             difficulty=args.difficulty)
    print(f"wrote {len(paths)} clips to {args.out}")
    return 0


def _cmd_pretrain_affine(args) -> int:
    from .boundary import pretrain_affine_estimator
    from .checkpoint import save_checkpoint
    from .config import TrainConfig, format_config
    est = pretrain_affine_estimator(seed=args.seed, steps=args.steps, patch=args.patch,
                                    hidden=args.hidden, corpus=args.corpus)
    cfg = TrainConfig(seed=args.seed, patch=args.patch, affine_steps=args.steps,
                      affine_hidden=args.hidden, affine_corpus=args.corpus)
    save_checkpoint(args.out, affine=est, config_text=format_config(cfg))
    print(f"wrote frozen estimator to {args.out}")
    return 0


_TOGGLE_FLAGS = {"scan_tf": "scan-tf", "scan_tb": "scan-tb", "scan_sp": "scan-sp", "bac": "bac"}


def _cmd_train(args) -> int:
    from .config import TrainConfig, load_config
    from .train import train
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {k: getattr(args, k) for k in _TOGGLE_FLAGS if getattr(args, k) is not None}
    for key in ("seed", "epochs", "affine_checkpoint"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    cfg = cfg.replace(**overrides)
    try:
        result = train(cfg, args.out)
    except NonFiniteError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    print(f"best validation Dice {max(result.val_dice):.4f} at epoch {result.best_epoch}; "
          f"checkpoint {result.checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    from .data import parse_seed_range
    from .train import evaluate, write_report
    result = evaluate(args.checkpoint, parse_seed_range(args.seeds),
                      allow_train_seeds=args.allow_train_seeds)
    csv_path, summary = write_report(result, args.report)
    print(summary.read_text(), end="")
    return 0


def _cmd_bench(args) -> int:
    from .complexity import doubling_range, scaling_benchmark, write_csv
    from .plotting import plot_bench
    kinds = [args.kind] if args.kind != "both" else ["st_mamba", "full_attention"]
    rows = []
    for kind in kinds:
        r, slope = scaling_benchmark(kind, doubling_range(args.tmin, args.tmax), args.size,
                                     args.size, args.dim, cap_bytes=int(args.cap_gib * 1024 ** 3),
                                     repeats=args.repeats, seed=args.seed)
        print(f"{kind}: peak-bytes log-log slope {slope:.3f}")
        rows += r
    write_csv(rows, args.out)
    plot_bench(rows, Path(args.out).with_suffix(".png"))
    return 0


def _cmd_selftest(args) -> int:
    import pytest
    tests = Path(__file__).resolve().parents[2] / "tests"
    if not tests.is_dir():
        print("test directory not found next to the package", file=sys.stderr)
        return 1
    suites = ["test_ssm.py", "test_gradients.py", "test_scan_orders.py"]
    return int(pytest.main(["-q"] + [str(tests / s) for s in suites]))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vivim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write synthetic clips as PGM files")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--frames", type=int, default=5)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--difficulty", type=float, default=0.5)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen)

    a = sub.add_parser("pretrain-affine", help="pretrain and freeze the affine estimator")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--steps", type=int, default=12000)
    a.add_argument("--patch", type=int, default=16)
    a.add_argument("--hidden", type=int, default=512)
    a.add_argument("--corpus", type=int, default=160000)
    a.add_argument("--out", required=True)
    a.set_defaults(func=_cmd_pretrain_affine)

    t = sub.add_parser("train", help="train a segmenter")
    t.add_argument("--config", help="key = value file; flags given here override it")
    for key, flag in _TOGGLE_FLAGS.items():
        t.add_argument(f"--{flag}", dest=key, action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--affine-checkpoint", dest="affine_checkpoint",
                   help="reuse a pretrained estimator instead of pretraining one")
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out seeds")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seeds", default="1..99:2", help="A..B or A..B:step (odd seeds are held out)")
    e.add_argument("--allow-train-seeds", action="store_true",
                   help="permit even (training-pool) seeds; they are flagged in the report")
    e.add_argument("--report", required=True, help="CSV path; .txt and .png are written beside it")
    e.set_defaults(func=_cmd_eval)

    b = sub.add_parser("bench", help="peak memory and wall time against clip length")
    b.add_argument("--kind", choices=["st_mamba", "full_attention", "both"], default="both")
    b.add_argument("--tmin", type=int, default=2)
    b.add_argument("--tmax", type=int, default=64)
    b.add_argument("--size", type=int, default=16)
    b.add_argument("--dim", type=int, default=32)
    b.add_argument("--cap-gib", type=float, default=2.0)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=_cmd_bench)

    s = sub.add_parser("selftest", help="run the oracle, gradient and bijection suites")
    s.set_defaults(func=_cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
