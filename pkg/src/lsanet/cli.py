"""Command line entry point: ``lsanet {train,eval,gradcheck,sweep,branch-acc}``.

Exit codes: 0 success, 1 configuration error, 2 runtime or numerical error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .data import ArchiveError, load_medmnist
from .nn import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _config(args):
    from .harness.config import load_config

    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        changes["out"] = args.out
    return cfg.with_(**changes).validate() if changes else cfg


def cmd_train(args) -> int:
    from .harness.trainer import train, write_outputs

    cfg = _config(args)
    run = train(cfg)
    paths = write_outputs(run, cfg.out, figures=not args.no_figures)
    sel = run.selected.get("test", run.selected["train"])
    print(f"mode={cfg.mode} seed={cfg.seed} epochs={cfg.epochs} "
          f"test_acc={sel['accuracy']:.2f} test_auc={sel['auc']:.2f}")
    for name, p in sorted(paths.items()):
        print(f"{name}\t{p}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness.trainer import evaluate, load_data, model_from_checkpoint

    model = model_from_checkpoint(args.checkpoint)
    if args.data == "synthetic":
        splits = load_data(model.config)
    else:
        splits = load_medmnist(args.data)
    print("split\tn\tacc\tauc\t" + "\t".join(f"acc_c{s}" for s in model.stages))
    for name, ds in splits.items():
        m = evaluate(model, ds)
        per = "\t".join(f"{a:.2f}" for a in m.per_classifier)
        print(f"{name}\t{len(ds)}\t{m.accuracy:.2f}\t{m.auc:.2f}\t{per}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_suite, summarize
    from .gradcheck import REL_TOL

    results = run_suite(args.module, seeds=args.seeds)
    worst = summarize(results)
    failed = 0
    for name, err in worst.items():
        ok = err < REL_TOL
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}\t{name}\tmax_rel_err={err:.3e}")
    print(f"{len(results)} checks, {failed} failing cases (tolerance {REL_TOL:g})")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def cmd_sweep(args) -> int:
    from .harness.experiments import ablation_sweep, write_sweep_outputs

    cfg = _config(args)
    seeds = args.seeds if args.seeds else [cfg.seed]
    rows, _ = ablation_sweep(cfg, args.axis, seeds)
    paths = write_sweep_outputs(rows, args.axis, cfg, cfg.out, figures=not args.no_figures)
    print("variant\tacc\tauc\tgain_acc\tgain_auc")
    for r in rows:
        print(f"{r['variant']}\t{r['acc']:.2f}\t{r['auc']:.2f}\t{r['gain_acc']:+.2f}\t{r['gain_auc']:+.2f}")
    for name, p in sorted(paths.items()):
        print(f"{name}\t{p}")
    return EXIT_OK


def cmd_branch_acc(args) -> int:
    from .harness.experiments import branch_accuracy_experiment, write_branch_outputs

    cfg = _config(args)
    rows, _ = branch_accuracy_experiment(cfg)
    paths = write_branch_outputs(rows, cfg.out, figures=not args.no_figures)
    print("epoch\tscheme\tsplit\tc1\tc2\tc3\tc4")
    for r in rows:
        print(f"{r['epoch']}\t{r['scheme']}\t{r['split']}\t" + "\t".join(f"{r[f'c{s}']:.2f}" for s in (1, 2, 3, 4)))
    for name, p in sorted(paths.items()):
        print(f"{name}\t{p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsanet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="MedMNIST .npz archive, or 'synthetic' to rebuild the run's data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", default="all", choices=["all", "tensor", "lsa", "supervision"])
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="ablation over modes or head subsets")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=["mode", "heads"])
    p.add_argument("--seeds", type=int, nargs="*")
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("branch-acc", help="per-classifier accuracy with and without deep supervision")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_branch_acc)
    return parser


def main(argv=None) -> int:
    from .harness.trainer import NumericalError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ArchiveError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
