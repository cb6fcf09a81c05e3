"""Command-line interface.

Subcommands: ``uda | sfuda1 | sfuda2 | probe | synth | select | report``.
Run flags mirror the run-config fields as dotted ``--set key=value``
overrides on top of an optional ``--config`` key-value file; environment
variables prefixed ``TRIDA_`` (``__`` for dots, e.g.
``TRIDA_OPTIMIZER__LR_NEW``) override both.  Exit codes: 0 success,
1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from trida.errors import TridaError, ValidationError

_RECIPE_BY_COMMAND = {
    "uda": "uda",
    "sfuda1": "sfuda_step1",
    "sfuda2": "sfuda_step2",
    "probe": "noisy_probe",
    "synth": "synthesize",
}


def _add_run_arguments(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key-value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="dotted config override, e.g. trida.beta=0.2")
    sub.add_argument("--output-dir", help="run output directory")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--repeats", type=int)
    sub.add_argument("--data-dir", help="image-folder root (source/target/pretrain)")
    sub.add_argument("--pretrain-dir", help="image-folder override for pretrain data")
    sub.add_argument("--checkpoint", help="input checkpoint (sfuda2/synth)")
    sub.add_argument("--tau", type=float, dest="tau",
                     help="pretrain class-selection threshold")
    sub.add_argument("--per-class-cap", type=int)
    sub.add_argument("--visda-preset", action="store_true",
                     help="optimizer preset with all rates at 1e-3")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trida",
        description="Three-domain adaptation toolkit (source, target, "
                    "pre-training data)")
    subs = parser.add_subparsers(dest="command", required=True)
    for command, recipe in _RECIPE_BY_COMMAND.items():
        sub = subs.add_parser(command, help=f"run the {recipe} recipe")
        _add_run_arguments(sub)

    sel = subs.add_parser("select", help="taxonomy-based pretrain class selection")
    sel.add_argument("--taxonomy", default="builtin:toy",
                     help="'builtin:toy' or edge-list file (parent child per line)")
    sel.add_argument("--class-map", help="optional 'class synset' mapping file")
    sel.add_argument("--pretrain-classes", required=True,
                     help="file with one pretrain class per line")
    sel.add_argument("--target-classes", required=True,
                     help="file with one target class per line")
    sel.add_argument("--tau", type=float, required=True)
    sel.add_argument("--out", help="CSV output path")
    sel.add_argument("--expect", type=int,
                     help="expected selected-class count to compare against")
    sel.add_argument("--tolerance", type=int, default=5)

    rep = subs.add_parser("report", help="re-export CSVs and charts from a run")
    rep.add_argument("run_dir", help="directory containing report_<id>.json")
    return parser


def _read_class_list(path) -> list[str]:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    return [ln for ln in lines if ln and not ln.startswith("#")]


def _cmd_select(args) -> int:
    from trida.taxonomy import (export_selection_csv, load_taxonomy,
                                select_pretrain_classes)

    tax = load_taxonomy(args.taxonomy, args.class_map)
    pretrain = _read_class_list(args.pretrain_classes)
    target = _read_class_list(args.target_classes)
    selection = select_pretrain_classes(tax, pretrain, target, args.tau)
    print(f"selected {len(selection.selected)}/{len(pretrain)} pretrain "
          f"classes at tau={args.tau}")
    if not selection.selected:
        print("warning: empty selection")
    if args.out:
        export_selection_csv(selection, args.out)
        print(f"wrote {args.out}")
    if args.expect is not None:
        diff = abs(len(selection.selected) - args.expect)
        status = "OK" if diff <= args.tolerance else "MISMATCH"
        print(f"expected {args.expect} +/- {args.tolerance}: {status} "
              f"(got {len(selection.selected)}, |diff| = {diff})")
        if status == "MISMATCH":
            return 1
    return 0


def _cmd_report(args) -> int:
    from trida.harness import RunReport, export_report

    run_dir = Path(args.run_dir)
    reports = sorted(run_dir.glob("report_*.json"))
    if not reports:
        raise ValidationError(f"no report_*.json under {run_dir}")
    for path in reports:
        report = RunReport.from_json(path.read_text())
        written = export_report(report, run_dir)
        print(f"re-exported {path.name}: {len(written)} files")
    return 0


def _cmd_run(command: str, args) -> int:
    from trida.harness import (config_from_kv, parse_kv_file, run,
                               run_repeated, visda_optimizer)

    kv = parse_kv_file(args.config) if args.config else {}
    kv["recipe"] = _RECIPE_BY_COMMAND[command]
    direct = {"output_dir": args.output_dir, "epochs": args.epochs,
              "batch_size": args.batch_size, "seed": args.seed,
              "repeats": args.repeats, "data_dir": args.data_dir,
              "pretrain_dir": args.pretrain_dir, "checkpoint": args.checkpoint,
              "selection_tau": args.tau, "per_class_cap": args.per_class_cap}
    for key, value in direct.items():
        if value is not None:
            kv[key] = str(value)
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        kv[key.strip()] = value.strip()
    config = config_from_kv(kv, dict(os.environ))
    if args.visda_preset:
        config.optimizer = visda_optimizer()
    reports = run_repeated(config) if config.repeats > 1 else [run(config)]
    for report in reports:
        acc = report.final_accuracy
        acc_str = ", ".join(f"{k}={v:.4f}" for k, v in acc.items()) or "n/a"
        print(f"[{report.recipe} seed={report.seed}] final accuracy: {acc_str}")
        print(f"  report hash: {report.content_hash()[:16]}  "
              f"wall: {report.wall_clock:.1f}s")
        if report.checkpoint_path:
            print(f"  checkpoint: {report.checkpoint_path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "select":
            return _cmd_select(args)
        if args.command == "report":
            return _cmd_report(args)
        return _cmd_run(args.command, args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TridaError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
