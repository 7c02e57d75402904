"""Command-line entry point: ``deepca <verb> [options]``."""

import argparse
import sys

from . import experiments as ex
from .config import ConfigError, load_config
from .learning import TrainingDiverged
from .tensor import DimensionError, FormatError


def _common(p, out_required=False):
    p.add_argument("--config", help="JSON config merged over the built-in defaults")
    p.add_argument("--out", required=out_required, help="run directory (or output file for infer)")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--iters", type=int, help="number of unrolled iterations T")


def build_parser():
    parser = argparse.ArgumentParser(prog="deepca", description="Deep component analysis experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gradcheck", help="autodiff vs finite differences")
    _common(p)
    p.add_argument("--tol", type=float, help="relative error tolerance")

    for verb, text in (
        ("demo-explaining-away", "sparsity of feed-forward vs optimized codes"),
        ("demo-sparsity", "reconstruction error and sparsity vs T, fixed vs learnable bias"),
        ("demo-inpaint", "depth inpainting with sparse output constraints"),
        ("train", "train a model from a config"),
    ):
        _common(sub.add_parser(verb, help=text))

    p = sub.add_parser("eval", help="evaluate a checkpoint on generated data")
    p.add_argument("checkpoint")
    _common(p)

    p = sub.add_parser("infer", help="batch inference on a DCAT tensor")
    p.add_argument("checkpoint")
    p.add_argument("input")
    _common(p, out_required=True)
    p.add_argument("--trace", help="write per-iteration residuals to this CSV")
    p.add_argument("--mask", help="DCAT tensor of observed positions (nonzero = observed)")
    p.add_argument("--observed", help="DCAT tensor of observed output values")
    return parser


def run(args):
    if args.verb == "infer":
        if (args.mask is None) != (args.observed is None):
            raise ConfigError("--mask and --observed go together")
        y = ex.cmd_infer(args.checkpoint, args.input, args.out, T=args.iters, trace=args.trace,
                         mask=args.mask, observed=args.observed)
        print(f"wrote {args.out} shape={tuple(y.shape)}")
        return 0

    if args.verb == "eval":
        cfg = load_config(args.config, "train", seed=args.seed)
        ev = ex.cmd_eval(args.checkpoint, cfg, args.out, T=args.iters)
        for k in sorted(ev):
            print(f"{k}: {ev[k]}")
        return 0

    cfg = load_config(args.config, args.verb, seed=args.seed, iters=args.iters)
    if args.verb == "gradcheck":
        if args.tol is not None:
            cfg.setdefault("run", {})["tol"] = args.tol
        try:
            rep = ex.cmd_gradcheck(cfg, args.out)
        except ex.GradcheckFailed as exc:
            print(f"gradcheck FAILED: {exc}", file=sys.stderr)
            return 1
        for T, name, err, ok in rep["rows"]:
            print(f"T={T} {name}: max rel error {err:.3e} {'ok' if ok else 'FAIL'}")
        return 0
    if args.verb == "demo-explaining-away":
        rep = ex.cmd_demo_explaining_away(cfg, args.out)
        print(f"optimized codes sparser at equal-or-better error: {rep['opt_sparser']}/{rep['trials']}")
        return 0
    if args.verb == "demo-sparsity":
        rep = ex.cmd_demo_sparsity(cfg, args.out)
        for r in rep["rows"]:
            print(f"seed={r['seed']} T={r['T']} {r['bias_mode']}: recon_error={r['recon_error']:.5f} "
                  f"mean_bias {r['initial_mean_bias']:.4f} -> {r['final_mean_bias']:.4f}")
        return 0
    if args.verb == "demo-inpaint":
        rep = ex.cmd_demo_inpaint(cfg, args.out)
        for r in rep["rows"]:
            print(f"seed={r['seed']} T={r['T']}: train_mae={r['train_mae']:.5f} test_mae={r['test_mae']:.5f} "
                  f"max_violation={r['max_violation']:.2e}")
        return 0
    if args.verb == "train":
        rep = ex.cmd_train(cfg, args.out)
        last = rep["metrics"][-1] if rep["metrics"] else {}
        print(f"trained {len(rep['metrics'])} metric rows; last: {last}")
        return 0
    raise AssertionError(args.verb)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except (ConfigError, FormatError, DimensionError, TrainingDiverged, FileNotFoundError) as exc:
        print(f"deepca {args.verb}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
