"""Command-line entry point.

Exit codes: 0 success, 1 expectations failed or entity not found,
2 usage or parse error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from .catalog import load_catalog_file, validate_catalog
from .errors import (
    AlreadyDone,
    InvalidOrder,
    MissingOutputKeys,
    NotFound,
    OrderHubError,
    ParseError,
    UnknownChannel,
    UnknownTarget,
    UnknownTask,
)
from .scenario import event_log_text, open_engine, run_scenario, save_engine

OK, NOT_OK, USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 on usage errors already; keep the text short
        self.print_usage(sys.stderr)
        self.exit(USAGE, f"{self.prog}: error: {message}\n")


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="orderhub", description="Deterministic order orchestration harness.")
    p.add_argument("--home", default=os.environ.get("ORDERHUB_HOME", ".orderhub"), help="engine state directory")
    groups = p.add_subparsers(dest="group", metavar="command", parser_class=_Parser)
    groups.required = True

    cat = groups.add_parser("catalog", help="catalog tools").add_subparsers(dest="cmd", parser_class=_Parser)
    cat.required = True
    v = cat.add_parser("validate", help="check a catalog file")
    v.add_argument("file")

    order = groups.add_parser("order", help="submit and inspect orders").add_subparsers(dest="cmd", parser_class=_Parser)
    order.required = True
    s = order.add_parser("submit", help="capture an order document and run it")
    s.add_argument("--channel", required=True)
    s.add_argument("file")
    st = order.add_parser("status", help="show an order")
    st.add_argument("order_id")

    run = groups.add_parser("run", help="run things").add_subparsers(dest="cmd", parser_class=_Parser)
    run.required = True
    r = run.add_parser("scenario", help="run a scenario file to completion")
    r.add_argument("file")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--journal", help="journal file (default: <home>/journal.jsonl)")
    r.add_argument("--parallel-dispatch", action="store_true", help="dispatch independent sub-orders together")
    r.add_argument("--duplicate-deliveries", action="store_true", help="deliver every message twice")
    r.add_argument("--events", help="write the event log here")
    r.add_argument("--reset", action="store_true", help="discard state already in --home")
    r.add_argument("--json", action="store_true", help="print the report as JSON")

    task = groups.add_parser("task", help="human tasks").add_subparsers(dest="cmd", parser_class=_Parser)
    task.required = True
    task.add_parser("list", help="list open tasks")
    tc = task.add_parser("complete", help="complete a task and resume its order")
    tc.add_argument("task_id")
    tc.add_argument("--data", nargs="+", type=_kv, default=[], metavar="KEY=VALUE")

    plat = groups.add_parser("platform", help="platform state").add_subparsers(dest="cmd", parser_class=_Parser)
    plat.required = True
    pd = plat.add_parser("dump", help="print a platform's canonical state")
    pd.add_argument("target_id")

    bus = groups.add_parser("bus", help="message bus").add_subparsers(dest="cmd", parser_class=_Parser)
    bus.required = True
    bd = bus.add_parser("dead", help="show dead-lettered messages of a queue")
    bd.add_argument("queue")
    return p


def _err(msg: str) -> None:
    print(f"orderhub: {msg}", file=sys.stderr)


def cmd_catalog_validate(args) -> int:
    try:
        catalog = load_catalog_file(args.file)
    except OSError as exc:
        _err(str(exc))
        return USAGE
    except ParseError as exc:
        _err(f"{args.file}: {exc}")
        return USAGE
    report = validate_catalog(catalog)
    for f in report.findings:
        print(f"{f.rule} {f.subject}: {f.detail}")
    if report.ok:
        print(f"ok: {len(catalog.products)} products, {len(catalog.targets)} targets")
        return OK
    return NOT_OK


def cmd_order_submit(args) -> int:
    engine, cfg = open_engine(args.home)
    try:
        data = Path(args.file).read_bytes()
    except OSError as exc:
        _err(str(exc))
        return USAGE
    try:
        order_id = engine.submit(args.channel, data)
    except (ParseError, UnknownChannel, InvalidOrder) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return USAGE
    engine.run_until_idle()
    save_engine(args.home, engine, cfg)
    print(f"{order_id} {engine.status(order_id).state.value}")
    return OK


def cmd_order_status(args) -> int:
    engine, cfg = open_engine(args.home)
    try:
        agg = engine.status(args.order_id)
    except NotFound as exc:
        _err(str(exc))
        return NOT_OK
    print(json.dumps(agg.summary(), indent=2, sort_keys=True))
    return OK


def cmd_run_scenario(args) -> int:
    options = {}
    if args.parallel_dispatch:
        options["parallel_dispatch"] = True
    if args.duplicate_deliveries:
        options["duplicate_deliveries"] = True
    report = run_scenario(
        args.file, home=args.home, workers=args.workers, journal=args.journal, reset=args.reset, options=options
    )
    if args.events:
        Path(args.events).write_text(event_log_text(report.engine.journal), encoding="utf-8")
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True) if args.json else report.to_text(), end="" if not args.json else "\n")
    return OK if report.ok else NOT_OK


def cmd_task_list(args) -> int:
    engine, cfg = open_engine(args.home)
    for t in engine.tasks.open_tasks():
        print(f"{t.task_id}\t{t.suborder_id}\tneeds {','.join(sorted(t.required_output_keys))}\t{t.instructions}")
    return OK


def cmd_task_complete(args) -> int:
    engine, cfg = open_engine(args.home)
    try:
        result = engine.complete_task(args.task_id, dict(args.data))
    except UnknownTask as exc:
        _err(f"unknown task {exc}")
        return NOT_OK
    except AlreadyDone as exc:
        _err(str(exc))
        return NOT_OK
    except MissingOutputKeys as exc:
        _err(str(exc))
        return USAGE
    engine.run_until_idle()
    save_engine(args.home, engine, cfg)
    task = engine.tasks.get(args.task_id)
    state = engine.status(task.order_id).state.value if task.order_id else "?"
    print(f"{args.task_id} {result.status.value}; order {task.order_id} {state}")
    return OK


def cmd_platform_dump(args) -> int:
    engine, cfg = open_engine(args.home)
    try:
        adapter = engine.registry.get(args.target_id)
    except UnknownTarget:
        _err(f"unknown target {args.target_id}")
        return NOT_OK
    sys.stdout.write(adapter.dump().decode("utf-8"))
    return OK


def cmd_bus_dead(args) -> int:
    path = Path(args.home) / "dead" / f"{args.queue}.jsonl"
    if path.exists():
        sys.stdout.write(path.read_text(encoding="utf-8"))
    return OK


COMMANDS = {
    ("catalog", "validate"): cmd_catalog_validate,
    ("order", "submit"): cmd_order_submit,
    ("order", "status"): cmd_order_status,
    ("run", "scenario"): cmd_run_scenario,
    ("task", "list"): cmd_task_list,
    ("task", "complete"): cmd_task_complete,
    ("platform", "dump"): cmd_platform_dump,
    ("bus", "dead"): cmd_bus_dead,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[(args.group, args.cmd)](args)
    except ParseError as exc:
        _err(str(exc))
        return USAGE
    except NotFound as exc:
        _err(str(exc))
        return NOT_OK
    except OrderHubError as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return NOT_OK


if __name__ == "__main__":
    sys.exit(main())
