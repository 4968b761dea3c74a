"""Command-line entry points: train, probe-fim, gridsearch, gen-data.

The KRONFISHER_THREADS environment variable, when set, caps the BLAS
thread pools before numpy loads; set it in the shell that launches the
command.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys


def _cap_threads() -> None:
    cap = os.environ.get("KRONFISHER_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


_cap_threads()


def _add_override_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", help="optimizer method override")
    p.add_argument("--lr", type=float, help="learning rate override")
    p.add_argument("--damping", type=float, help="damping override")
    p.add_argument("--clip", type=float, help="trust-region constant override")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--epochs", type=int, help="epoch count override")
    p.add_argument("--out", help="output directory override")
    p.add_argument(
        "--synthetic",
        action="store_true",
        default=None,
        help="use generated stand-in data for non-redistributable corpora",
    )


def _overrides(args: argparse.Namespace) -> dict:
    out = {
        "method": args.method,
        "lr": args.lr,
        "damping": args.damping,
        "clip": args.clip,
        "seed": args.seed,
        "epochs": args.epochs,
        "out_dir": args.out,
        "synthetic": args.synthetic,
    }
    return {k: v for k, v in out.items() if v is not None}


def _cmd_train(args: argparse.Namespace) -> int:
    from .experiment import load_config, run_experiment

    config = load_config(args.config, _overrides(args))
    result = run_experiment(config)
    print(
        f"{config.optimizer.method}: final train loss "
        f"{result.summary['final_train_loss']:.6f} after {result.summary['iterations']} "
        f"iterations; artifacts in {result.out_dir}"
    )
    return 0


def _cmd_probe_fim(args: argparse.Namespace) -> int:
    from dataclasses import replace

    from .experiment import ProbeSpec, load_config, run_experiment

    config = load_config(args.config, _overrides(args))
    probe = config.probe or ProbeSpec()
    if args.layer is not None:
        probe = replace(probe, layer=args.layer)
    if args.every is not None:
        probe = replace(probe, every=args.every)
    config = replace(config, probe=probe)
    result = run_experiment(config)
    probed = {}
    for rec in reversed(result.records):
        probed = {k: v for k, v in rec.extra.items() if k.startswith("err_")}
        if probed:
            probed["iteration"] = rec.iteration
            break
    print(json.dumps(probed, indent=2, sort_keys=True))
    print(f"artifacts in {result.out_dir}")
    return 0


def _cmd_gridsearch(args: argparse.Namespace) -> int:
    from .experiment import CLIP_GRID, ETA_GRID, LAMBDA_GRID, grid_search, load_config

    config = load_config(args.config, _overrides(args))
    etas = tuple(args.eta) if args.eta else ETA_GRID
    lambdas = tuple(args.damping_grid) if args.damping_grid else LAMBDA_GRID
    clips = tuple(args.clip_grid) if args.clip_grid else CLIP_GRID
    summary = grid_search(config, etas, lambdas, clips)
    best = summary["best"]
    if best is None:
        print("no grid point finished; see gridsearch_summary.json")
        return 1
    print(
        f"best {summary['method']}: eta={best['eta']:g} damping={best['damping']:g} "
        f"clip={best['clip']:g} final train loss {best['final_train_loss']:.6f}"
    )
    return 0


def _cmd_gen_data(args: argparse.Namespace) -> int:
    from .datasets import gen_gaussian_blobs, gen_synthetic_curves, save_idx

    if args.kind == "curves":
        data = gen_synthetic_curves(args.n, args.seed, side=args.side)
    else:
        data = gen_gaussian_blobs(args.n, args.seed, side=args.side)
    side = args.side
    save_idx(args.out, data.reshape(args.n, side, side))
    print(f"wrote {args.n} {side}x{side} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kronfisher",
        description="Kronecker-factored Fisher approximations: train, probe, sweep",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment from a config")
    p_train.add_argument("--config", required=True, help="JSON experiment config")
    _add_override_args(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_probe = sub.add_parser(
        "probe-fim", help="train while probing Fisher approximation errors at one layer"
    )
    p_probe.add_argument("--config", required=True)
    p_probe.add_argument("--layer", type=int, help="1-based layer to probe")
    p_probe.add_argument("--every", type=int, help="probe period in iterations")
    _add_override_args(p_probe)
    p_probe.set_defaults(func=_cmd_probe_fim)

    p_grid = sub.add_parser("gridsearch", help="sweep lr/damping/clip for one method")
    p_grid.add_argument("--config", required=True)
    p_grid.add_argument("--eta", type=float, nargs="+", help="learning-rate grid")
    p_grid.add_argument("--damping-grid", type=float, nargs="+", help="damping grid")
    p_grid.add_argument("--clip-grid", type=float, nargs="+", help="trust-region grid")
    _add_override_args(p_grid)
    p_grid.set_defaults(func=_cmd_gridsearch)

    p_gen = sub.add_parser("gen-data", help="write a synthetic dataset as an IDX file")
    p_gen.add_argument("--kind", choices=("curves", "blobs"), default="curves")
    p_gen.add_argument("--n", type=int, required=True, help="number of images")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--side", type=int, default=28, help="image side length")
    p_gen.add_argument("--out", required=True, help="output IDX path")
    p_gen.set_defaults(func=_cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
