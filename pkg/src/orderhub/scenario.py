"""Scenario files, engine homes and run reports."""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping

from .catalog import Catalog, load_catalog_file, load_yaml_document, validate_catalog
from .compensation import StrategyConfig, UndoEntry, latest_first
from .engine import Engine, EngineOptions, write_dead_letters
from .errors import ExpectationFailure, OrderHubError, ParseError, ScenarioParseError
from .fulfillment.actions import Verb
from .fulfillment.faults import FaultPlan, FaultSpec, parse_fault
from .fulfillment.platforms import DEFAULT_ADAPTER_FOR, KIND_DEFAULT_ADAPTER, ADAPTER_TYPES, TargetRegistry, build_adapter
from .fulfillment.tasks import TaskStore
from .journal import Journal, JournalRecord
from .management.rules import EnvironmentFacts, ValidationRule, load_facts_file, load_rules_file
from .model import OrderState
from .msgbus import SimClock

SCENARIO_KEYS = {
    "catalog", "rules", "facts", "strategy", "platforms", "adapters", "seed",
    "orders", "faults", "tasks", "options", "expect",
}
EXPECT_KEYS = {"states", "platforms_equal_initial", "platform_hashes", "open_tasks"}


@dataclass(frozen=True)
class OrderSpec:
    ref: str
    channel: str
    path: Path


@dataclass
class Scenario:
    path: Path
    catalog_path: Path
    rules_path: Path | None = None
    facts_path: Path | None = None
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    platforms: dict[str, Any] = field(default_factory=dict)
    adapters: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    orders: list[OrderSpec] = field(default_factory=list)
    faults: list[FaultSpec] = field(default_factory=list)
    auto_complete: dict[str, str] | None = None
    options: EngineOptions = field(default_factory=EngineOptions)
    expect: dict[str, Any] = field(default_factory=dict)


def _resolve(base: Path, value: Any, what: str) -> Path:
    if not isinstance(value, str) or not value:
        raise ScenarioParseError(f"{what} must be a file path")
    p = (base / value).resolve()
    if not p.exists():
        raise ScenarioParseError(f"{what} file not found: {value}")
    return p


def _yaml_file(path: Path, what: str) -> Any:
    try:
        return load_yaml_document(path.read_text(encoding="utf-8"), error=ScenarioParseError)
    except ParseError as exc:
        raise ScenarioParseError(f"{what} {path.name}: {exc}") from None


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path).resolve()
    if not path.exists():
        raise ScenarioParseError(f"scenario file not found: {path}")
    data = _yaml_file(path, "scenario")
    if not isinstance(data, dict):
        raise ScenarioParseError("scenario must be a mapping")
    unknown = set(data) - SCENARIO_KEYS
    if unknown:
        raise ScenarioParseError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
    base = path.parent
    if "catalog" not in data:
        raise ScenarioParseError("scenario needs a catalog")
    sc = Scenario(path=path, catalog_path=_resolve(base, data["catalog"], "catalog"))
    if data.get("rules") is not None:
        sc.rules_path = _resolve(base, data["rules"], "rules")
    if data.get("facts") is not None:
        sc.facts_path = _resolve(base, data["facts"], "facts")

    strategy = data.get("strategy")
    if isinstance(strategy, str):
        strategy = _yaml_file(_resolve(base, strategy, "strategy"), "strategy")
    if strategy is not None and not isinstance(strategy, dict):
        raise ScenarioParseError("strategy must be a mapping or a file path")
    try:
        sc.strategy = StrategyConfig.from_dict(strategy)
    except (ParseError, ValueError) as exc:
        raise ScenarioParseError(str(exc)) from None

    platforms = data.get("platforms")
    if isinstance(platforms, str):
        platforms = _yaml_file(_resolve(base, platforms, "platforms"), "platforms")
    if platforms is not None and not isinstance(platforms, dict):
        raise ScenarioParseError("platforms must map target ids to initial states")
    sc.platforms = json.loads(json.dumps(platforms or {}))

    adapters = data.get("adapters") or {}
    if not isinstance(adapters, dict):
        raise ScenarioParseError("adapters must map target ids to adapter types")
    for target, kind in adapters.items():
        if kind not in ADAPTER_TYPES and kind != "b2b":
            raise ScenarioParseError(f"unknown adapter type {kind!r} for {target}")
    sc.adapters = {str(k): str(v) for k, v in adapters.items()}

    try:
        sc.seed = int(data.get("seed", 0))
    except (TypeError, ValueError):
        raise ScenarioParseError("seed must be an integer") from None

    refs = set()
    for n, entry in enumerate(data.get("orders") or []):
        if not isinstance(entry, dict) or "channel" not in entry or "file" not in entry:
            raise ScenarioParseError(f"orders[{n}] needs channel and file")
        ref = str(entry.get("ref", n))
        if ref in refs:
            raise ScenarioParseError(f"duplicate order ref {ref!r}")
        refs.add(ref)
        sc.orders.append(OrderSpec(ref, str(entry["channel"]), _resolve(base, entry["file"], f"orders[{n}]")))

    try:
        sc.faults = [parse_fault(str(f)) for f in data.get("faults") or []]
    except ParseError as exc:
        raise ScenarioParseError(str(exc)) from None

    tasks = data.get("tasks") or {}
    if not isinstance(tasks, dict):
        raise ScenarioParseError("tasks must be a mapping")
    if "auto_complete" in tasks:
        sc.auto_complete = {str(k): str(v) for k, v in (tasks["auto_complete"] or {}).items()}

    try:
        sc.options = EngineOptions.from_dict(data.get("options"))
    except (TypeError, ValueError) as exc:
        raise ScenarioParseError(f"options: {exc}") from None

    expect = data.get("expect") or {}
    if not isinstance(expect, dict) or set(expect) - EXPECT_KEYS:
        raise ScenarioParseError(f"expect takes only {', '.join(sorted(EXPECT_KEYS))}")
    for ref, state in (expect.get("states") or {}).items():
        if str(ref) not in refs:
            raise ScenarioParseError(f"expectation for unknown order ref {ref!r}")
        if state not in OrderState.__members__:
            raise ScenarioParseError(f"unknown order state {state!r}")
    sc.expect = expect

    catalog = load_scenario_catalog(sc)
    for (target, verb) in sc.strategy.overrides:
        if target not in catalog.targets:
            raise ScenarioParseError(f"strategy override names unknown target {target!r}")
    for f in sc.faults:
        if f.target_id not in catalog.targets:
            raise ScenarioParseError(f"fault names unknown target {f.target_id!r}")
    return sc


def load_scenario_catalog(sc: Scenario) -> Catalog:
    try:
        catalog = load_catalog_file(sc.catalog_path)
    except ParseError as exc:
        raise ScenarioParseError(f"catalog: {exc}") from None
    report = validate_catalog(catalog)
    if not report.ok:
        raise ScenarioParseError("catalog is invalid: " + "; ".join(map(str, report.findings)))
    return catalog


def adapter_type_for(target_id: str, kind: str, overrides: Mapping[str, str]) -> str:
    if target_id in overrides:
        return overrides[target_id]
    return DEFAULT_ADAPTER_FOR.get(target_id) or KIND_DEFAULT_ADAPTER.get(kind, "subscription")


def build_registry(
    catalog: Catalog,
    *,
    adapters: Mapping[str, str] | None = None,
    platforms: Mapping[str, Any] | None = None,
    faults: FaultPlan | None = None,
    seed: int = 0,
    platform_dir: Path | None = None,
) -> TargetRegistry:
    registry = TargetRegistry()
    faults = faults or FaultPlan()
    for target_id, kind in sorted(catalog.targets.items()):
        path = platform_dir / f"{target_id}.json" if platform_dir else None
        registry.register(
            build_adapter(
                target_id,
                adapter_type_for(target_id, kind, adapters or {}),
                seed=seed,
                state=(platforms or {}).get(target_id),
                faults=faults,
                path=path,
            )
        )
    return registry


# -- event log -------------------------------------------------------------------


def _detail(rec: JournalRecord) -> str:
    p = rec.payload
    ev = rec.event
    if ev == "captured":
        return f"channel={p['order']['channel_id']}"
    if ev == "validated":
        return "passed" if p["passed"] else "failed " + ",".join(f[0] for f in p["failures"])
    if ev == "decomposed":
        return ",".join(s["suborder_id"] for s in p["suborders"])
    if ev == "checkpoint":
        return p["snapshot"]["content_hash"][:16]
    if ev == "dispatched":
        return f"attempt={p['attempt']}"
    if ev == "result":
        r = p["result"]
        return r["status"] + (f" {r['error'][0]}" if r.get("error") else "")
    if ev == "task_opened":
        return p["task_id"]
    if ev == "undo_recorded":
        return p["entry"]["strategy"] + (" partial" if p["entry"].get("partial") else "")
    if ev == "compensating":
        return p.get("reason", "")
    if ev == "compensation_step":
        s = p["step"]
        return f"{'ok' if s['ok'] else 'FAILED'} {s['strategy']} {s['detail']}".strip()
    if ev == "compensated":
        return "ok" if p["ok"] else "failed"
    return ""


def _suborder_of(rec: JournalRecord) -> str | None:
    p = rec.payload
    if "suborder_id" in p:
        return p["suborder_id"]
    for key in ("result", "entry", "step"):
        if key in p:
            return p[key].get("suborder_id")
    return None


def event_log(journal: Journal, normalize: bool = False) -> list[dict[str, Any]]:
    """Structured event records; ``normalize`` drops timestamps for golden comparison."""
    out = []
    for rec in journal:
        ev: dict[str, Any] = {"seq": rec.seq, "ts": rec.ts, "order_id": rec.order_id}
        sid = _suborder_of(rec)
        if sid:
            ev["suborder_id"] = sid
        ev["event"] = rec.event
        ev["detail"] = _detail(rec)
        if normalize:
            del ev["ts"]
        out.append(ev)
    return out


def event_log_text(journal: Journal, normalize: bool = False) -> str:
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in event_log(journal, normalize))


# -- reports -----------------------------------------------------------------------


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class OrderReport:
    ref: str
    order_id: str | None
    state: str
    dispatches: list[str] = field(default_factory=list)
    compensation: dict[str, Any] | None = None
    diagnostic: str = ""

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"ref": self.ref, "order_id": self.order_id, "state": self.state, "dispatches": self.dispatches}
        if self.compensation is not None:
            d["compensation"] = self.compensation
        if self.diagnostic:
            d["diagnostic"] = self.diagnostic
        return d


@dataclass(frozen=True)
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class ScenarioReport:
    scenario: str
    orders: list[OrderReport] = field(default_factory=list)
    initial_hashes: dict[str, str] = field(default_factory=dict)
    platform_hashes: dict[str, str] = field(default_factory=dict)
    dumps: dict[str, bytes] = field(default_factory=dict)
    initial_dumps: dict[str, bytes] = field(default_factory=dict)
    open_tasks: list[dict[str, Any]] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)
    events: list[dict[str, Any]] = field(default_factory=list)
    handler_errors: list[str] = field(default_factory=list)
    engine: Engine | None = None

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def order(self, ref: str) -> OrderReport:
        for o in self.orders:
            if o.ref == ref:
                return o
        raise KeyError(ref)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "ok": self.ok,
            "orders": [o.to_dict() for o in self.orders],
            "platform_hashes": dict(sorted(self.platform_hashes.items())),
            "open_tasks": self.open_tasks,
            "checks": [{"name": c.name, "ok": c.ok, "detail": c.detail} for c in self.checks],
        }

    def to_text(self) -> str:
        lines = [f"scenario {self.scenario}"]
        for o in self.orders:
            lines.append(f"  order {o.ref} {o.order_id or '-'} {o.state}")
            if o.dispatches:
                lines.append(f"    dispatches: {' '.join(o.dispatches)}")
            if o.compensation is not None:
                steps = o.compensation["steps"]
                lines.append(f"    compensation: {'ok' if o.compensation['ok'] else 'FAILED'} ({len(steps)} steps)")
                for s in steps:
                    lines.append(f"      {s['entry_id']} {s['strategy']} {'ok' if s['ok'] else 'FAILED'} {s['detail']}".rstrip())
            if o.diagnostic:
                lines.append(f"    diagnostic: {o.diagnostic}")
        for t in self.open_tasks:
            lines.append(f"  open task {t['task_id']} {t['suborder_id']} needs {','.join(t['required_output_keys'])}")
        for target, h in sorted(self.platform_hashes.items()):
            lines.append(f"  platform {target} {h[:16]}")
        for c in self.checks:
            lines.append(f"  {'PASS' if c.ok else 'FAIL'} {c.name}" + (f": {c.detail}" if c.detail else ""))
        return "\n".join(lines) + "\n"


# -- engine homes ----------------------------------------------------------------------


def _home_paths(home: Path) -> dict[str, Path]:
    return {
        "config": home / "engine.json",
        "journal": home / "journal.jsonl",
        "platforms": home / "platforms",
        "tasks": home / "tasks.json",
        "dead": home / "dead",
    }


def reset_home(home: str | Path) -> None:
    """Remove engine state from ``home`` (only files this tool creates)."""
    home = Path(home)
    paths = _home_paths(home)
    if paths["config"].exists():
        cfg = json.loads(paths["config"].read_text(encoding="utf-8"))
        journal = Path(cfg.get("journal", paths["journal"]))
        journal.unlink(missing_ok=True)
    for key in ("config", "journal", "tasks"):
        paths[key].unlink(missing_ok=True)
    for key in ("platforms", "dead"):
        if paths[key].exists():
            shutil.rmtree(paths[key])


@dataclass
class EngineConfig:
    scenario: str
    catalog: str
    rules: str | None
    facts: str | None
    strategy: dict[str, Any]
    adapters: dict[str, str]
    seed: int
    faults: list[str]
    fault_counts: dict[str, int]
    options: dict[str, Any]
    auto_complete: dict[str, str] | None
    journal: str
    clock: float = 0.0
    initial_hashes: dict[str, str] = field(default_factory=dict)
    orders: dict[str, str] = field(default_factory=dict)

    def save(self, home: Path) -> None:
        home.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"
        tmp = home / "engine.json.tmp"
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(home / "engine.json")

    @classmethod
    def load(cls, home: Path) -> "EngineConfig":
        path = home / "engine.json"
        if not path.exists():
            raise ScenarioParseError(f"{home} holds no engine; run a scenario there first")
        return cls(**json.loads(path.read_text(encoding="utf-8")))


def _load_rules(path: Path | None) -> list[ValidationRule]:
    try:
        return load_rules_file(path) if path else []
    except (ParseError, TypeError) as exc:
        raise ScenarioParseError(f"rules: {exc}") from None


def _load_facts(path: Path | None) -> EnvironmentFacts:
    try:
        return load_facts_file(path) if path else EnvironmentFacts()
    except ParseError as exc:
        raise ScenarioParseError(f"facts: {exc}") from None


def _fault_plan(faults: list[FaultSpec], counts: Mapping[str, int] | None = None) -> FaultPlan:
    plan = FaultPlan(faults)
    for key, n in (counts or {}).items():
        target, verb = key.rsplit(":", 1)
        plan.counts[(target, Verb(verb))] = int(n)
    return plan


def _fault_counts(plan: FaultPlan) -> dict[str, int]:
    return {f"{t}:{v.value}": n for (t, v), n in sorted(plan.counts.items())}


def open_engine(home: str | Path) -> tuple[Engine, EngineConfig]:
    """Rebuild an engine from its home directory and resume unfinished orders."""
    home = Path(home)
    cfg = EngineConfig.load(home)
    paths = _home_paths(home)
    try:
        catalog = load_catalog_file(cfg.catalog)
    except (OSError, ParseError) as exc:
        raise ScenarioParseError(f"catalog: {exc}") from None
    faults = _fault_plan([parse_fault(f) for f in cfg.faults], cfg.fault_counts)
    registry = build_registry(catalog, adapters=cfg.adapters, faults=faults, seed=cfg.seed, platform_dir=paths["platforms"])
    engine = Engine(
        catalog,
        registry,
        rules=_load_rules(Path(cfg.rules) if cfg.rules else None),
        facts=_load_facts(Path(cfg.facts) if cfg.facts else None),
        strategy=StrategyConfig.from_dict(cfg.strategy),
        options=EngineOptions.from_dict(cfg.options),
        journal=Journal(cfg.journal),
        tasks=TaskStore(paths["tasks"]),
        clock=SimClock(cfg.clock),
        seed=cfg.seed,
        auto_complete=cfg.auto_complete,
    )
    engine.faults = faults
    engine.recover()
    return engine, cfg


def save_engine(home: str | Path, engine: Engine, cfg: EngineConfig) -> None:
    home = Path(home)
    cfg.clock = engine.clock.now()
    faults = getattr(engine, "faults", None)
    if faults is not None:
        cfg.fault_counts = _fault_counts(faults)
    write_dead_letters(engine, _home_paths(home)["dead"])
    cfg.save(home)


# -- running -----------------------------------------------------------------------------


def run_scenario(
    path: str | Path,
    *,
    home: str | Path | None = None,
    workers: int = 1,
    journal: str | Path | None = None,
    reset: bool = False,
    strategy: StrategyConfig | None = None,
    faults: list[FaultSpec | str] | None = None,
    options: Mapping[str, Any] | None = None,
    chooser: Callable[[list[UndoEntry]], UndoEntry] = latest_first,
    auto_complete: Mapping[str, str] | None | bool = True,
) -> ScenarioReport:
    """Run a scenario to quiescence and check its expectations.

    Keyword overrides replace the corresponding scenario fields (tests use
    them to sweep fault points and strategies over one fixture). With
    ``home`` all state is persisted there and can be resumed by the CLI.
    ``auto_complete=False`` leaves human tasks open even if the scenario
    would complete them.
    """
    sc = load_scenario(path)
    if strategy is not None:
        sc.strategy = strategy
    if faults is not None:
        sc.faults = [parse_fault(f) if isinstance(f, str) else f for f in faults]
    if options:
        sc.options = replace(sc.options, **dict(options))
    if auto_complete is False:
        sc.auto_complete = None
    elif isinstance(auto_complete, Mapping):
        sc.auto_complete = dict(auto_complete)

    catalog = load_scenario_catalog(sc)
    rules = _load_rules(sc.rules_path)
    facts = _load_facts(sc.facts_path)
    fault_plan = _fault_plan(sc.faults)

    cfg = None
    if home is not None:
        home = Path(home)
        paths = _home_paths(home)
        if reset:
            reset_home(home)
        if paths["config"].exists():
            raise ScenarioParseError(f"{home} already holds an engine; pass --reset to start over")
        journal_path = Path(journal) if journal else paths["journal"]
        if journal_path.exists() and journal_path.stat().st_size:
            raise ScenarioParseError(f"journal {journal_path} is not empty")
        home.mkdir(parents=True, exist_ok=True)
        registry = build_registry(
            catalog, adapters=sc.adapters, platforms=sc.platforms, faults=fault_plan, seed=sc.seed,
            platform_dir=paths["platforms"],
        )
        paths["platforms"].mkdir(exist_ok=True)
        for target in registry.targets():
            adapter = registry.get(target)
            inner = getattr(adapter, "endpoint", None)
            (inner.platform if inner else adapter)._save()
        jr = Journal(journal_path)
        tasks = TaskStore(paths["tasks"])
        cfg = EngineConfig(
            scenario=str(sc.path),
            catalog=str(sc.catalog_path),
            rules=str(sc.rules_path) if sc.rules_path else None,
            facts=str(sc.facts_path) if sc.facts_path else None,
            strategy=sc.strategy.to_dict(),
            adapters=sc.adapters,
            seed=sc.seed,
            faults=[str(f) for f in sc.faults],
            fault_counts={},
            options=sc.options.to_dict(),
            auto_complete=sc.auto_complete,
            journal=str(journal_path.resolve()),
        )
    else:
        registry = build_registry(catalog, adapters=sc.adapters, platforms=sc.platforms, faults=fault_plan, seed=sc.seed)
        jr = Journal(journal) if journal else Journal()
        tasks = TaskStore()

    engine = Engine(
        catalog,
        registry,
        rules=rules,
        facts=facts,
        strategy=sc.strategy,
        options=sc.options,
        journal=jr,
        tasks=tasks,
        clock=SimClock(),
        seed=sc.seed,
        chooser=chooser,
        auto_complete=sc.auto_complete,
    )
    engine.faults = fault_plan
    initial = engine.dumps()
    report = ScenarioReport(scenario=sc.path.name, engine=engine)
    report.initial_dumps = initial
    report.initial_hashes = {t: sha256(d) for t, d in initial.items()}

    refs: dict[str, str | None] = {}
    errors: dict[str, str] = {}
    for spec in sc.orders:
        try:
            refs[spec.ref] = engine.submit(spec.channel, spec.path.read_bytes())
        except OrderHubError as exc:
            refs[spec.ref] = None
            errors[spec.ref] = f"{type(exc).__name__}: {exc}"
    engine.run_until_idle(workers=workers)

    if cfg is not None:
        cfg.initial_hashes = report.initial_hashes
        cfg.orders = {r: oid for r, oid in refs.items() if oid}
        save_engine(home, engine, cfg)

    fill_report(report, engine, sc.orders, refs, errors)
    report.checks = check_expectations(sc.expect, report)
    return report


def fill_report(report: ScenarioReport, engine: Engine, orders, refs: Mapping[str, str | None], errors: Mapping[str, str]) -> None:
    for spec in orders:
        oid = refs.get(spec.ref)
        if oid is None:
            report.orders.append(OrderReport(spec.ref, None, "INVALID", diagnostic=errors.get(spec.ref, "")))
            continue
        agg = engine.status(oid)
        comp = None
        if agg.steps or agg.state in (OrderState.COMPENSATED, OrderState.FAILED) and agg.plan is not None:
            comp = {"ok": all(s.ok for s in agg.steps), "steps": [s.to_dict() for s in agg.steps]}
        report.orders.append(
            OrderReport(spec.ref, oid, agg.state.value, [f"{s}#{n}" for s, n in agg.dispatches], comp, agg.diagnostic)
        )
    report.dumps = engine.dumps()
    report.platform_hashes = {t: sha256(d) for t, d in report.dumps.items()}
    report.open_tasks = [t.to_dict() | {"context": {}} for t in engine.tasks.open_tasks()]
    report.events = event_log(engine.journal)
    report.handler_errors = list(engine.handler_errors)


def check_expectations(expect: Mapping[str, Any], report: ScenarioReport) -> list[Check]:
    checks = []
    for ref, state in sorted((expect.get("states") or {}).items()):
        actual = report.order(str(ref)).state
        checks.append(Check(f"state {ref}", actual == state, f"expected {state}, got {actual}"))
    if expect.get("platforms_equal_initial"):
        changed = sorted(t for t, h in report.platform_hashes.items() if report.initial_hashes.get(t) != h)
        checks.append(Check("platforms equal initial", not changed, "changed: " + ", ".join(changed) if changed else ""))
    for target, h in sorted((expect.get("platform_hashes") or {}).items()):
        actual = report.platform_hashes.get(target)
        checks.append(Check(f"platform hash {target}", actual == h, f"got {actual}"))
    if "open_tasks" in expect:
        n = len(report.open_tasks)
        checks.append(Check("open tasks", n == int(expect["open_tasks"]), f"expected {expect['open_tasks']}, got {n}"))
    if report.handler_errors:
        checks.append(Check("no handler errors", False, "; ".join(report.handler_errors)))
    return checks


def require_ok(report: ScenarioReport) -> ScenarioReport:
    if not report.ok:
        failed = [c for c in report.checks if not c.ok]
        raise ExpectationFailure("; ".join(f"{c.name}: {c.detail}" for c in failed))
    return report
