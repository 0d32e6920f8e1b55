"""Command-line interface.

Subcommands: gen-data, train, attack, defend, eval, sweep. A JSON config
file mirrors RunConfig field names; command-line flags override it. Exit
codes: 0 success, 1 usage error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .data import generate_synthetic, quantize_images, write_idx_images, write_idx_labels
from .errors import (
    ConfigurationError,
    DegenerateFeatureError,
    FormatError,
    GenerationError,
    InputError,
    TrainingError,
    UsageError,
)
from .evaluate import (
    AblationFlags,
    RunConfig,
    build_context,
    evaluate_defense,
    sweep,
)
from .reports import emit_report, write_sweep_csv, write_trace_csv
from .rng import derive_seed

_USAGE_ERRORS = (UsageError, ConfigurationError)
_DATA_ERRORS = (
    FormatError,
    InputError,
    GenerationError,
    TrainingError,
    DegenerateFeatureError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_eps(text: str) -> float:
    """Accept plain floats or fractions like 8/255."""
    if "/" in text:
        num, den = text.split("/", 1)
        if float(den) == 0.0:
            raise ValueError(f"zero denominator in {text!r}")
        return float(num) / float(den)
    return float(text)


def build_parser() -> _Parser:
    parser = _Parser(prog="fptnoise", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file mirroring RunConfig")
        p.add_argument("--seed", type=int, help="base seed override")
        p.add_argument("--attack", choices=["fgsm", "pgd"], help="attack kind")
        p.add_argument("--eps", type=_parse_eps, help="attack budget (float or a/b)")
        p.add_argument("--steps", type=int, help="attack iterations")
        p.add_argument("--tau-init", type=float, help="stability threshold override")
        p.add_argument("--beta", type=float, help="norm-recovery threshold override")
        p.add_argument("--no-dfm", action="store_true", help="fixed mid-range sigma")
        p.add_argument("--no-fpt", action="store_true", help="gate on baseline tau")
        p.add_argument("--no-sar", action="store_true", help="never suppress noise")
        p.add_argument("--no-tte", action="store_true", help="single-view prediction")
        p.add_argument("--workers", type=int, help="parallel defense workers")
        p.add_argument("--out", help="output directory")
        p.add_argument("--format", choices=["csv", "json"], default="csv")

    for name in ("gen-data", "train", "attack", "defend", "eval"):
        common(sub.add_parser(name))
    sweep_parser = sub.add_parser("sweep")
    common(sweep_parser)
    sweep_parser.add_argument("--param", required=True, help="defense field to sweep")
    sweep_parser.add_argument(
        "--values", required=True, help="comma-separated values, e.g. 0.2,0.32,0.4"
    )
    return parser


def load_run_config(args) -> RunConfig:
    raw = {}
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config is not valid JSON: {exc}") from exc
    run = RunConfig.from_dict(raw)

    if args.seed is not None:
        run = dataclasses.replace(run, seed=args.seed)
    if args.attack is not None:
        run = dataclasses.replace(run, attack_kind=args.attack)
    attack_over = {}
    if args.eps is not None:
        attack_over["epsilon"] = args.eps
    if args.steps is not None:
        attack_over["steps"] = args.steps
    if attack_over:
        run = dataclasses.replace(
            run, attack=dataclasses.replace(run.attack, **attack_over)
        )
    defense_over = {}
    if args.tau_init is not None:
        defense_over["tau_init"] = args.tau_init
    if args.beta is not None:
        defense_over["beta"] = args.beta
    if defense_over:
        run = dataclasses.replace(
            run, defense=dataclasses.replace(run.defense, **defense_over)
        )
    flags = AblationFlags(
        dfm_on=run.flags.dfm_on and not args.no_dfm,
        fpt_on=run.flags.fpt_on and not args.no_fpt,
        sar_on=run.flags.sar_on and not args.no_sar,
        tte_on=run.flags.tte_on and not args.no_tte,
    )
    run = dataclasses.replace(run, flags=flags)
    if args.workers is not None:
        run = dataclasses.replace(run, workers=args.workers)
    if args.out:
        run = dataclasses.replace(run, out_dir=args.out)
    return run


def _out_dir(run: RunConfig) -> str:
    out = run.out_dir or "runs/latest"
    os.makedirs(out, exist_ok=True)
    return out


def cmd_gen_data(run: RunConfig) -> int:
    spec = run.dataset.synthetic
    if spec.image_shape[0] != 1:
        raise UsageError(
            "gen-data writes IDX files, which are single-channel; set "
            'dataset.synthetic.image_shape to [1, H, W] (multi-channel synthetic '
            "data is generated in-process by eval)"
        )
    out = _out_dir(run)
    for split, tag in (("train", "train-data"), ("eval", "eval-data")):
        ds = generate_synthetic(spec, derive_seed(run.seed, tag))
        write_idx_images(os.path.join(out, f"{split}-images.idx"), quantize_images(ds.images))
        write_idx_labels(os.path.join(out, f"{split}-labels.idx"), ds.labels)
        print(f"{split}: {len(ds)} images -> {out}/{split}-images.idx")
    return 0


def cmd_train(run: RunConfig) -> int:
    out = _out_dir(run)
    weights = run.weights_path or os.path.join(out, "model.fptw")
    run = dataclasses.replace(run, weights_path=weights)
    if os.path.exists(weights):
        os.remove(weights)  # train always retrains
    ctx = build_context(run)
    print(f"train accuracy: {ctx.train_accuracy:.4f}")
    print(f"clean accuracy: {ctx.clean_accuracy:.4f}")
    print(f"weights: {weights}")
    return 0


def cmd_attack(run: RunConfig) -> int:
    out = _out_dir(run)
    ctx = build_context(run)
    print(f"attack: {run.attack_kind} eps={run.attack.epsilon:.6f} steps={run.attack.steps}")
    print(f"clean accuracy:  {ctx.clean_accuracy:.4f}")
    print(f"robust accuracy: {ctx.robust_accuracy:.4f}")
    linf = float(np.abs(ctx.adv_images - ctx.eval_set.images).max())
    print(f"max perturbation linf: {linf:.6f}")
    with open(os.path.join(out, "attack.csv"), "w") as fh:
        fh.write("clean_accuracy,robust_accuracy,max_linf\n")
        fh.write(f"{ctx.clean_accuracy!r},{ctx.robust_accuracy!r},{linf!r}\n")
    return 0


def cmd_defend(run: RunConfig) -> int:
    """Defend the attacked eval set only; write its traces."""
    out = _out_dir(run)
    ctx = build_context(run)
    report = evaluate_defense(ctx)
    n = len(ctx.eval_set)
    adv_rows = [
        dataclasses.replace(row, index=row.index - n)
        for row in report.traces
        if row.index >= n
    ]
    write_trace_csv(adv_rows, os.path.join(out, "traces.csv"))
    print(f"robust accuracy (undefended): {ctx.robust_accuracy:.4f}")
    print(f"robust accuracy (defended):   {report.defended_robust_accuracy:.4f}")
    return 0


def _summary_lines(report):
    yield f"clean accuracy:            {report.clean_accuracy:.4f}"
    yield f"robust accuracy:           {report.robust_accuracy:.4f}"
    yield f"defended clean accuracy:   {report.defended_clean_accuracy:.4f}"
    yield f"defended robust accuracy:  {report.defended_robust_accuracy:.4f}"
    yield f"detector AUC (fpt/ttc):    {report.auc_fpt:.4f} / {report.auc_ttc:.4f}"


def cmd_eval(run: RunConfig, fmt: str) -> int:
    out = _out_dir(run)
    ctx = build_context(run)
    report = evaluate_defense(ctx)
    paths = emit_report(report, out, fmt)
    for line in _summary_lines(report):
        print(line)
    print(f"report: {paths['report']}")
    return 0


def cmd_sweep(run: RunConfig, param: str, values_text: str) -> int:
    out = _out_dir(run)
    try:
        values = [float(v) for v in values_text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad sweep values {values_text!r}: {exc}") from exc
    results = sweep(param, values, run)
    path = os.path.join(out, f"sweep-{param}.csv")
    write_sweep_csv(results, param, path)
    for value, report in results:
        print(
            f"{param}={value:g}: defended robust "
            f"{report.defended_robust_accuracy:.4f}, defended clean "
            f"{report.defended_clean_accuracy:.4f}"
        )
    print(f"sweep table: {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        run = load_run_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(run)
        if args.command == "train":
            return cmd_train(run)
        if args.command == "attack":
            return cmd_attack(run)
        if args.command == "defend":
            return cmd_defend(run)
        if args.command == "eval":
            return cmd_eval(run, args.format)
        if args.command == "sweep":
            return cmd_sweep(run, args.param, args.values)
        raise UsageError(f"unknown command {args.command!r}")
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
