"""Command-line front door.

Subcommands: gen-data, train, eval, gradcheck, spectral-demo, ablate.
Exit codes: 0 success, 2 configuration/validation error, 3 I/O error,
4 numeric failure (NaN), 5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import MODES, RunConfig, load_config
from .errors import NumericError, ValidationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5

# CLI flag name (dest) -> RunConfig field
_OVERRIDE_FIELDS = [
    ("mode", str), ("N", int), ("K", int), ("M", int), ("M1", int),
    ("L", int), ("delta", int), ("alpha", float), ("beta", float),
    ("lam", float), ("tau", float), ("level", str), ("meta_steps", int),
    ("hidden_dim", int), ("proj_dim", int), ("data_classes", int),
    ("data_per_class", int), ("data_seed", int), ("split_fraction", float),
    ("eval_way", int), ("eval_shot", int), ("eval_query", int),
    ("eval_episodes", int), ("eval_inner_steps", int), ("eval_interval", int),
    ("seed", int),
]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    for name, typ in _OVERRIDE_FIELDS:
        flag = "--lambda" if name == "lam" else f"--{name.replace('_', '-')}"
        kwargs = {"type": typ, "dest": name, "default": None}
        if name == "mode":
            kwargs["choices"] = MODES
        parser.add_argument(flag, **kwargs)
    parser.add_argument("--timing", action="store_true", default=None,
                        help="record wallclock cells (breaks byte-for-byte "
                             "reproducibility of metrics.csv)")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    for name, _ in _OVERRIDE_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if getattr(args, "timing", None):
        changes["timing"] = True
    if getattr(args, "data", None):
        changes["data_path"] = args.data
    if getattr(args, "out_dir", None):
        changes["out_dir"] = args.out_dir
    cfg = dataclasses.replace(cfg, **changes)
    return cfg.validate()


def _cmd_gen_data(args) -> int:
    from .synthdata import centroid_accuracy, generate, save_dataset

    ds = generate(args.classes, args.per_class, args.seed)
    save_dataset(args.out, ds)
    line = f"wrote {len(ds)} images ({args.classes} classes) to {args.out}"
    if args.check:
        acc = centroid_accuracy(ds)
        line += f"; nearest-centroid LOO accuracy {acc:.4f}"
    print(line)
    return EXIT_OK


def _cmd_train(args) -> int:
    from .harness import train

    cfg = _resolve_config(args)
    if not cfg.data_path:
        raise ValidationError("train needs --data (or data_path in the config)")
    if not cfg.out_dir:
        raise ValidationError("train needs --out-dir (or out_dir in the config)")
    result = train(cfg)
    print(f"mode={cfg.mode} meta_steps={result.meta_steps} "
          f"final_accuracy={result.final_accuracy:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .harness import evaluate_fewshot
    from .io import load_checkpoint
    from .synthdata import load_dataset, split

    checkpoint = load_checkpoint(args.checkpoint)
    cfg = checkpoint.config
    dataset = load_dataset(args.data or cfg.data_path)
    _, eval_ds = split(dataset, cfg.split_fraction, cfg.data_seed)
    result = evaluate_fewshot(
        checkpoint.params, eval_ds,
        args.way or cfg.eval_way, args.shot or cfg.eval_shot,
        args.query or cfg.eval_query, args.episodes or cfg.eval_episodes,
        args.L_eval if args.L_eval is not None else cfg.eval_inner_steps,
        args.alpha or cfg.alpha, cfg.lam, cfg.tau,
        seed=args.seed if args.seed is not None else cfg.seed)
    print(f"mean_accuracy={result.mean_accuracy:.4f} "
          f"episodes={len(result.per_episode)}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("episode,accuracy\n")
            for i, acc in enumerate(result.per_episode):
                fh.write(f"{i},{acc!r}\n")
        print(f"per-episode accuracies: {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(args.scale, inject_fault=args.inject_fault)
    for row in report.rows:
        mark = "ok  " if row.passed else "FAIL"
        print(f"[{mark}] {row.name:<18} max_rel_err={row.max_rel_err:.3e} "
              f"tol={row.tolerance:.0e}")
    if not report.passed:
        print("gradient check FAILED")
        return EXIT_GRADCHECK
    print(f"gradient check passed ({len(report.rows)} checks)")
    return EXIT_OK


def _cmd_spectral_demo(args) -> int:
    from .spectral import (
        build_chain,
        minimax_gap,
        minimax_gap_batch,
        random_space,
        random_weighted_subspaces,
        top_eigenfunctions,
    )

    chain = build_chain(random_space(args.views, args.sources, args.seed))
    if not (1 <= args.d < chain.m):
        raise ValidationError(f"d must lie in [1, {chain.m - 1}]")
    report = top_eigenfunctions(chain, chain.m)
    eps = args.eps if args.eps is not None else float(1.0 - report.eigenvalues[args.d])
    eig_gap = minimax_gap(chain, report.functions[:, :args.d], eps)
    rivals = random_weighted_subspaces(chain, args.d, args.samples, args.seed)
    gaps = minimax_gap_batch(chain, rivals, eps)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "spectrum.csv", "w", encoding="utf-8") as fh:
        fh.write("index,eigenvalue\n")
        for i, val in enumerate(report.eigenvalues):
            fh.write(f"{i},{val!r}\n")
    with open(out / "gaps.csv", "w", encoding="utf-8") as fh:
        fh.write("subspace_id,gap\n")
        fh.write(f"0,{eig_gap!r}\n")  # subspace 0 is the top-d eigenspace
        for i, gap in enumerate(gaps, start=1):
            fh.write(f"{i},{float(gap)!r}\n")
    optimal = bool(eig_gap <= gaps.min() + 1e-9)
    print(f"views={chain.m} d={args.d} eps={eps:.6f}")
    print(f"eigen-subspace gap {eig_gap:.6f}; best of {args.samples} random "
          f"subspaces {float(gaps.min()):.6f}; eigen optimal: {optimal}")
    print(f"wrote {out / 'spectrum.csv'} and {out / 'gaps.csv'}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from .harness import ablate

    cfg = _resolve_config(args)
    if not cfg.data_path:
        raise ValidationError("ablate needs --data (or data_path in the config)")
    rows = ablate(args.kind, cfg)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("kind,cell,accuracy,steps_per_sec\n")
        for row in rows:
            fh.write(f"{row.kind},{row.cell},{row.accuracy!r},"
                     f"{row.steps_per_sec:.3f}\n")
    for row in rows:
        print(f"{row.kind}={row.cell}: accuracy={row.accuracy:.4f} "
              f"steps/s={row.steps_per_sec:.2f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaboot",
        description="Episodic self-supervised meta-learning at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true",
                   help="also report nearest-centroid separability")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset file from gen-data")
    p.add_argument("--out-dir", dest="out_dir", help="metrics/checkpoint directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="few-shot evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file (defaults to the checkpoint's)")
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("--query", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--L-eval", dest="L_eval", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="optional per-episode accuracy CSV")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference oracle suite")
    p.add_argument("--scale", choices=("tiny", "small"), default="tiny")
    p.add_argument("--inject-fault", action="store_true",
                   help="corrupt one gradient to exercise the failure path")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("spectral-demo",
                       help="eigen spectrum and minimax-gap comparison CSVs")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--sources", type=int, default=4)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--eps", type=float, default=None,
                   help="invariance budget (default: spectral gap at d)")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=_cmd_spectral_demo)

    p = sub.add_parser("ablate", help="run one ablation sweep")
    p.add_argument("--kind", choices=("delta", "augmentation", "structure"),
                   required=True)
    _add_config_flags(p)
    p.add_argument("--data", help="dataset file from gen-data")
    p.add_argument("--out", required=True, help="sweep result CSV")
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
