"""Command line entry point: generate, train, ablate, eval, report.

Exit codes: 0 success, 2 configuration error, 3 dataset error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .harness import CheckpointError, ConfigError, NumericError, RunConfig
from .synth_data import DatasetError, generate_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATASET, EXIT_NUMERIC = 0, 2, 3, 4


def _config(args) -> RunConfig:
    cfg = harness.load_config(args.config) if args.config else RunConfig()
    extra = list(args.override or [])
    if getattr(args, "data", None):
        extra.append(f"dataset_dir={json.dumps(str(args.data))}")
    if getattr(args, "out", None):
        extra.append(f"output_dir={json.dumps(str(args.out))}")
    if getattr(args, "mode", None):
        extra.append(f"mode={args.mode}")
    return cfg.with_overrides(extra)


def cmd_generate(args) -> int:
    m = generate_dataset(args.n, args.seed, args.out, image_size=(args.size, args.size))
    print(f"wrote {len(m.cases)} cases to {args.out} (class counts {m.class_counts}, V_thr {m.v_thr:.3f} mL)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    report = harness.train(cfg)
    print(harness.render_run_dir(cfg.output_dir))
    print(f"wall time {report.wall_time:.1f} s")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    result = harness.ablate(cfg)
    print(result["table"])
    return EXIT_OK


def cmd_eval(args) -> int:
    ids = None
    if args.fold_ids:
        splits = json.loads(Path(args.fold_ids).read_text(encoding="utf-8"))
        ids = splits[args.fold]["val_ids"]
    report = harness.evaluate(args.checkpoint, args.data, ids)
    print(json.dumps({"mode": report.mode, "mean": report.mean}, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    print(harness.render_run_dir(args.run_dir))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ichscnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, default=128)
    g.set_defaults(func=cmd_generate)

    for name, func, help_ in (("train", cmd_train, "cross-validated training run"),
                              ("ablate", cmd_ablate, "run every mode and print the ablation table")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--config", help="flat JSON file with RunConfig fields")
        t.add_argument("--data", help="dataset directory")
        t.add_argument("--out", help="run output directory")
        if name == "train":
            t.add_argument("--mode", choices=sorted(harness.MODES))
        t.add_argument("--override", action="append", metavar="KEY=VALUE")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--fold-ids", help="folds.json of the run; restricts to one validation fold")
    e.add_argument("--fold", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render a run or ablation directory as a table")
    r.add_argument("--run-dir", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except (NumericError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
