"""Command-line entry point: ``omnifuse <subcommand> [-c config.yaml] [--set key=value ...]``."""

import argparse
import sys
from collections import defaultdict
from pathlib import Path

from omnifuse.checkpoint import CheckpointError
from omnifuse.config import ConfigError, dump_config, load_config
from omnifuse.pipeline import StageFailed, emit_report, read_report, run_pipeline

STAGE_COMMANDS = {
    "gen-world": "world",
    "train-experts": "experts",
    "extract": "extract",
    "fit-fusion": "fusion",
    "distill": "distill",
    "transfer": "transfer",
    "select": "select",
    "sweep-latent": "sweep",
    "run-all": None,
}


def _common(p):
    p.add_argument("-c", "--config", type=Path, help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry (repeatable)")
    p.add_argument("--run-dir", type=Path, help="explicit run directory (default: <out root>/<run id>)")
    p.add_argument("--fresh", action="store_true", help="recompute stages even if outputs exist")
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="omnifuse", description="Fuse expert embeddings, distill, transfer.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        p = sub.add_parser(name, help=f"run the pipeline through '{STAGE_COMMANDS[name] or 'every stage'}'")
        _common(p)
        if name == "sweep-latent":
            p.add_argument("--dims", type=int, nargs="+", help="latent widths, ascending")
    rep = sub.add_parser("report", help="summarise or convert a run's report")
    rep.add_argument("path", type=Path, help="run directory or report file")
    rep.add_argument("--format", choices=("table", "csv", "json"), default="table")
    rep.add_argument("-o", "--output", type=Path)
    show = sub.add_parser("show-config", help="print the resolved config")
    _common(show)
    return parser


def _summarise(rows):
    """Mean value per (stage, task, encoder, mode, metric), one line each."""
    groups = defaultdict(list)
    for r in rows:
        groups[(r.stage, r.task, r.encoder, r.mode, r.metric)].append(r.value)
    lines = [f"{'stage':<9}{'task':<18}{'encoder':<14}{'mode':<22}{'metric':<20}{'value':>12}"]
    for (stage, task, enc, mode, metric), vals in groups.items():
        lines.append(f"{stage:<9}{task:<18}{enc:<14}{mode[:21]:<22}{metric:<20}{sum(vals) / len(vals):>12.4f}")
    return "\n".join(lines)


def _report(args):
    path = args.path
    if path.is_dir():
        path = path / "reports" / "report.json"
    rows = read_report(path)
    if args.format == "table":
        text = _summarise(rows)
        if args.output:
            args.output.write_text(text + "\n")
        else:
            print(text)
        return 0
    out = args.output or path.with_suffix("." + args.format)
    emit_report(rows, args.format, out)
    print(out)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return _report(args)
        overrides = list(args.overrides)
        if getattr(args, "dims", None):
            overrides.append("sweep.dims=[" + ",".join(str(d) for d in args.dims) + "]")
        cfg = load_config(args.config, overrides)
        if args.command == "show-config":
            print(f"# run id {cfg.run_id}")
            print(dump_config(cfg), end="")
            return 0
        log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
        run, executed = run_pipeline(cfg, args.run_dir, upto=STAGE_COMMANDS[args.command], resume=not args.fresh,
                                     log=log)
        print(run.dir)
        return 0
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"omnifuse: {exc}", file=sys.stderr)
        return 2
    except StageFailed as exc:
        print(f"omnifuse: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
