"""simcli: generate scenarios, replay them, compare strategies."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .generator import ScenarioSpec, generate, read_stream, service_log, write_stream
from .replay import STRATEGIES, replay
from .report import RunReport

STREAM = "messages.ndjson"


def _load(directory: str):
    path = Path(directory) / STREAM
    if not path.exists():
        raise SystemExit(f"no {STREAM} in {directory}")
    return list(read_stream(path))


def _emit(report: RunReport, fmt: str, out: Optional[str]) -> None:
    text = report.to_csv() if fmt == "csv" else report.to_table()
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_generate(args: argparse.Namespace) -> int:
    spec = ScenarioSpec.from_file(args.spec) if args.spec else ScenarioSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.messages:
        msgs = service_log(spec, args.messages)
    else:
        msgs = generate(spec).messages()
    write_stream(msgs, out / STREAM)
    (out / "spec.json").write_text(spec.to_json() + "\n")
    print(f"wrote {len(msgs)} messages to {out / STREAM}")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    report = RunReport()
    report.add(replay(_load(args.input), args.strategy))
    _emit(report, args.report, args.output)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    msgs = _load(args.input)
    report = RunReport()
    for name in STRATEGIES:
        report.add(replay(msgs, name))
    _emit(report, args.report, args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="simcli", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a scenario stream")
    g.add_argument("--spec", help="JSON file with ScenarioSpec fields")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--messages", type=int, default=0, help="emit a mixed service log of this many messages")
    g.set_defaults(fn=cmd_generate)

    r = sub.add_parser("replay", help="replay a stream under one strategy")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--strategy", choices=STRATEGIES, default="online")
    r.add_argument("--report", choices=("csv", "table"), default="table")
    r.add_argument("--output", help="write the report here instead of stdout")
    r.set_defaults(fn=cmd_replay)

    c = sub.add_parser("compare", help="replay under all strategies and report deltas")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--report", choices=("csv", "table"), default="table")
    c.add_argument("--output")
    c.set_defaults(fn=cmd_compare)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
