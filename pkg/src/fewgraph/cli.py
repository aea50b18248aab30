"""Command-line entry points.

    fewgraph prepare-data <root>
    fewgraph train --config <file> [--out <dir>]
    fewgraph evaluate --checkpoint <file> --episodes N [--split test] [--report <file>]
    fewgraph gradcheck [--module tensor|model]
    fewgraph tables <reports...> [--csv <file>]
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


def _cmd_prepare_data(args: argparse.Namespace) -> int:
    from .episodes import ingest_omniglot, save_cache
    from .harness import blob_hash

    train, test = ingest_omniglot(args.root)
    out = Path(args.out) if args.out else Path(args.root) / "cache.fgds"
    save_cache(str(out), [train, test])
    print(f"wrote {out}: {train.class_count} train classes, {test.class_count} test classes")
    print(f"cache hash {blob_hash(out.read_bytes())}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    from .harness import parse_config, train

    cfg = parse_config(Path(args.config).read_text())
    out_dir = args.out or str(Path(args.config).with_suffix("")) + "-run"
    result = train(cfg, out_dir)
    print(f"checkpoint  {result.checkpoint_path}")
    print(f"metrics     {result.metrics_path}")
    print(f"manifest    {result.manifest_path}")
    print(f"best val accuracy {result.best_val_accuracy:.4f}")
    print(f"final train loss  {result.final_train_loss:.6f}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    from .harness import STREAM_TEST, STREAM_VAL, evaluate, load_run, save_report

    cfg, model, bundle = load_run(args.checkpoint)
    split = {"test": bundle.test, "val": bundle.val, "train": bundle.train}[args.split]
    stream = STREAM_VAL if args.split == "val" else STREAM_TEST
    report = evaluate(
        model, cfg, split, args.episodes, stream=stream, informative_hits=cfg.probe
    )
    half = "n/a" if report.half_width is None else f"{100 * report.half_width:.2f}"
    print(
        f"{cfg.model} {cfg.mode} {cfg.k}-way {cfg.q}-shot on {args.split}: "
        f"accuracy {100 * report.accuracy:.2f}% +- {half} over {report.episodes} episodes"
    )
    if report.hit_rate is not None:
        print(f"informative-node hit rate {100 * report.hit_rate:.2f}%")
    if args.report:
        save_report(args.report, report)
        print(f"report written to {args.report}")
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    from .gradcheck import run_suite

    rows = run_suite(module=args.module, seed=args.seed)
    failures = 0
    for name, err, tol, ok in rows:
        print(f"{name:36s} rel-err {err:.3e}  tol {tol:.0e}  {'pass' if ok else 'FAIL'}")
        failures += not ok
    print(f"{len(rows)} checks, {failures} failures")
    return 1 if failures else 0


def _cmd_tables(args: argparse.Namespace) -> int:
    from .harness import load_report
    from .tables import emit_tables

    reports = [load_report(p) for p in args.reports]
    text, csv_text = emit_tables(reports)
    print(text, end="")
    if args.csv:
        Path(args.csv).write_text(csv_text)
        print(f"csv written to {args.csv}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fewgraph",
        description="Few-shot graph-network classification toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="ingest an image dataset into a binary cache")
    p.add_argument("root", help="dataset root directory")
    p.add_argument("--out", help="cache file path (default <root>/cache.fgds)")
    p.set_defaults(fn=_cmd_prepare_data)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default <config>-run)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--split", choices=("test", "val", "train"), default="test")
    p.add_argument("--report", help="write a report file for `fewgraph tables`")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", choices=("tensor", "model"), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("tables", help="render evaluation reports as a table")
    p.add_argument("reports", nargs="*")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(fn=_cmd_tables)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
