"""Command line entry point: ``oodlab {run,report,analyze,gradcheck,gen-data}``.

Relative ``--out`` paths resolve under ``$OODLAB_OUTPUT_ROOT`` when it is set.
Seeds only ever come from ``--seed`` or the config file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import runner
from .config import FINETUNE_METHODS, METHODS, ExperimentConfig, load_config
from .data import export_benchmark, generate
from .gradcheck import main_report
from .metrics import TABLE_COLUMNS, MethodReport, write_results_table

OUTPUT_ROOT_ENV = "OODLAB_OUTPUT_ROOT"


class CliError(Exception):
    pass


def resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _load(args) -> ExperimentConfig:
    if args.config:
        try:
            cfg = load_config(args.config)
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc.strerror or exc}") from None
        except ValueError as exc:
            raise CliError(f"bad config {args.config}: {exc}") from None
    else:
        cfg = ExperimentConfig()
    for item in args.set or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise CliError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            cfg = cfg.override(key.strip(), value)
        except (KeyError, AttributeError):
            raise CliError(f"unknown config key {key!r}") from None
        except ValueError as exc:
            raise CliError(f"bad value for {key}: {exc}") from None
    method = getattr(args, "method", None)
    try:
        return cfg.with_run(method=method, seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def cmd_run(args) -> int:
    cfg = _load(args)
    e1 = None
    if cfg.method in FINETUNE_METHODS:
        if not args.e1_checkpoint:
            raise CliError(f"method {cfg.method} needs --e1-checkpoint")
        e1 = runner.load_e1(args.e1_checkpoint)
    data = generate(cfg.data)
    record = runner.execute(cfg, data, e1)
    out = runner.write_run(record, cfg, data, resolve_out(args.out))
    if record.status != "ok":
        print(f"{cfg.method} seed {cfg.seed}: {record.status} ({record.diagnostics.get('error', '')})", file=sys.stderr)
        return 3
    r = record.report
    print(f"{cfg.method} seed {cfg.seed}: balanced_accuracy={r.balanced_accuracy:.4f} "
          + " ".join(f"auroc_{k}={v['auroc']:.4f}" for k, v in r.ood.items())
          + (f" flags={','.join(r.flags)}" if r.flags else "") + f" -> {out}")
    return 0


def cmd_report(args) -> int:
    out = resolve_out(args.out)
    paths = sorted(out.rglob("report.json"))
    if not paths:
        raise CliError(f"no report.json found under {out}")
    reports = [MethodReport.from_dict(json.loads(p.read_text())) for p in paths]
    rows = write_results_table(reports, out)
    print(",".join(TABLE_COLUMNS))
    for row in rows:
        print(",".join(row["method"] if c == "method" else f"{row[c]:.4f}" for c in TABLE_COLUMNS))
    return 0


def cmd_analyze(args) -> int:
    cfg = _load(args)
    a = runner.load_checkpoint_for(args.a)
    b = runner.load_checkpoint_for(args.b)
    data = generate(cfg.data)
    analysis = runner.embedding_analysis(a.params, b.params, data, cfg, labels=(args.label_a, args.label_b))
    summary = runner.write_analysis(analysis, resolve_out(args.out), cfg.scoring.hist_bins)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    ok, text = main_report(points=args.points, seed=args.seed, tol=args.tol)
    print(text)
    return 0 if ok else 1


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    paths = export_benchmark(generate(cfg.data), resolve_out(args.out))
    print(f"wrote {len(paths)} files to {resolve_out(args.out)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oodlab", description="Synthetic OOD-detection lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{run,report,analyze,gradcheck,gen-data}")

    def config_args(sp, seed_required=True):
        sp.add_argument("--config", help="INI config file (defaults when omitted)")
        sp.add_argument("--seed", type=int, required=seed_required)
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")

    r = sub.add_parser("run", help="train/evaluate one method")
    config_args(r)
    r.add_argument("--method", required=True, choices=METHODS)
    r.add_argument("--out", required=True)
    r.add_argument("--e1-checkpoint", help="checkpoint.bin of an E1 run (e4, e5a, e5b, e6)")
    r.set_defaults(fn=cmd_run)

    rep = sub.add_parser("report", help="aggregate report.json files under --out")
    rep.add_argument("--out", required=True)
    rep.set_defaults(fn=cmd_report)

    an = sub.add_parser("analyze", help="k-NN embedding analysis of two checkpoints")
    config_args(an)
    an.add_argument("--a", required=True, help="first checkpoint (canonically E1)")
    an.add_argument("--b", required=True, help="second checkpoint (canonically E5b)")
    an.add_argument("--label-a", default="e1")
    an.add_argument("--label-b", default="e5b")
    an.add_argument("--out", required=True)
    an.set_defaults(fn=cmd_analyze)

    g = sub.add_parser("gradcheck", help="finite-difference check of every objective")
    g.add_argument("--points", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(fn=cmd_gradcheck)

    d = sub.add_parser("gen-data", help="write the benchmark splits as CSV")
    config_args(d)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CliError, ValueError) as exc:
        print(f"oodlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
