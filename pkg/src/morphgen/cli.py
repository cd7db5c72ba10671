"""Command-line interface.

Verbs: generate, train, eval, corrupt-eval, attack-eval, attribute,
report, plus an `experiment` convenience verb that runs the full
multi-seed protocol from one config. Every failure exits nonzero with a
machine-readable JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness, model, robustness
from .attribution import attribution_report
from .synthdata import read_split

DEFAULT_EPS_OVER_255 = (0.5, 1.0, 1.5, 2.0)


def _add_config(p):
    p.add_argument("--config", required=True, help="experiment config JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphgen",
        description="Desk-scale morphology-guided contrastive training lab.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="generate the synthetic dataset")
    _add_config(p)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train one seed")
    _add_config(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="run output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one domain")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", type=int, required=True)
    p.add_argument("--out", default=None, help="per-sample prediction CSV")

    p = sub.add_parser("corrupt-eval", help="accuracy under graded corruptions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--severities", default="0,1,2,3")
    p.add_argument("--seeds", default="0")
    p.add_argument("--domains", default=None,
                   help="comma list of domains; default: all in the eval split")

    p = sub.add_parser("attack-eval", help="robust accuracy under L-inf PGD")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eps", default="0.5,1,1.5,2",
                   help="epsilons in units of 1/255")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-samples", type=int, default=None)
    p.add_argument("--domains", default=None)
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("attribute", help="integrated-gradients heat maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--m", type=int, default=256, help="integration steps")
    p.add_argument("--baseline", default="zeros",
                   choices=["zeros", "dataset_mean"])
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("report", help="consolidate run reports")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("experiment", help="full multi-seed protocol")
    _add_config(p)
    p.add_argument("--out", required=True, help="experiment working directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override: run this single seed only")

    return parser


def _load_eval_images(data_dir, domains_arg):
    split = read_split(data_dir, "eval", require_masks=False)
    if domains_arg:
        wanted = [int(d) for d in domains_arg.split(",")]
        sel = np.isin(split.domain_ids, wanted)
        if not np.any(sel):
            raise ValueError(f"no samples for domains {wanted}")
        return split.images[sel], split.labels[sel]
    return split.images, split.labels


def _cmd_generate(args) -> int:
    cfg = harness.load_config(args.config)
    harness.generate_dataset(cfg, args.out)
    print(f"dataset written to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = harness.load_config(args.config)
    harness.train_run(cfg, args.data, args.seed, args.out)
    print(f"run written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    acc = harness.eval_checkpoint(args.ckpt, args.data, args.domain,
                                  out_csv=args.out)
    print(f"domain {args.domain} accuracy: {acc:.6f}")
    return 0


def _cmd_corrupt_eval(args) -> int:
    arch, enc, head, _, _ = model.load_checkpoint(args.ckpt)
    images, labels = _load_eval_images(args.data, args.domains)
    severities = [int(s) for s in args.severities.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = robustness.eval_under_corruption(
        harness.make_predict_fn(arch, enc, head), images, labels,
        severities=severities, seeds=seeds)
    harness._write_csv(args.out, ["kind", "severity", "seed", "accuracy"], rows)
    print(f"corruption table written to {args.out}")
    return 0


def _cmd_attack_eval(args) -> int:
    arch, enc, head, _, _ = model.load_checkpoint(args.ckpt)
    images, labels = _load_eval_images(args.data, args.domains)
    if args.max_samples is not None:
        images, labels = images[: args.max_samples], labels[: args.max_samples]
    eps255 = [float(e) for e in args.eps.split(",")]
    rows = robustness.eval_under_attack(
        harness.make_bce_grad_fn(arch, enc, head),
        harness.make_predict_fn(arch, enc, head),
        images, labels.astype(np.float64),
        epsilons=[e / 255.0 for e in eps255],
        steps=args.steps, seed=args.seed)
    for row, e255 in zip(rows, eps255):
        row["epsilon"] = e255  # reported in 1/255 units, as passed
    harness._write_csv(args.out, ["epsilon", "seed", "accuracy"], rows)
    print(f"attack table written to {args.out}")
    return 0


def _cmd_attribute(args) -> int:
    arch, enc, head, _, _ = model.load_checkpoint(args.ckpt)
    split = read_split(args.data, "eval", require_masks=False)
    images = split.images[: args.n]
    dataset_mean = split.images.mean(axis=0) if args.baseline == "dataset_mean" else None
    logit_fn, logit_grad_fn = harness.make_logit_fns(arch, enc, head)
    rows = attribution_report(logit_fn, logit_grad_fn, images, args.out,
                              m=args.m, baseline_kind=args.baseline,
                              dataset_mean=dataset_mean)
    worst = max(r["residual"] for r in rows)
    print(f"{len(rows)} maps written to {args.out}; worst residual {worst:.2e}")
    return 0


def _cmd_report(args) -> int:
    comparison = harness.consolidate_reports(args.run_dirs, args.out,
                                             with_figures=not args.no_figures)
    if "ood_gap" in comparison:
        print(f"OOD gap (morphgen - erm): {comparison['ood_gap'] * 100:.2f} points")
    print(f"report written to {args.out}")
    return 0


def _cmd_experiment(args) -> int:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg = harness.ExperimentConfig.from_dict(
            {**cfg.to_dict(), "seeds": [args.seed]})
    report = harness.run_experiment(cfg, args.out)
    agg = report["aggregate"]
    print(f"{cfg.objective}: OOD mean accuracy "
          f"{agg['ood_mean'] * 100:.2f}% (+- {agg['ood_mean_sd'] * 100:.2f})")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "corrupt-eval": _cmd_corrupt_eval,
    "attack-eval": _cmd_attack_eval,
    "attribute": _cmd_attribute,
    "report": _cmd_report,
    "experiment": _cmd_experiment,
}


def main(argv=None) -> int:
    from .perf import tune_allocator
    tune_allocator()
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except Exception as exc:  # surface a machine-readable error record
        record = {"error": type(exc).__name__, "message": str(exc),
                  "verb": args.verb}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
