"""Acceptance criteria 1-10. Each test carries a ``criterion`` mark; the
summary prints one PASS/FAIL line per criterion."""

from __future__ import annotations

import json
import os
import random
import subprocess
import sys
from decimal import Decimal

import pytest

from harness import make_engine, records, scenario_path
from oracles import (
    OracleError,
    brute_decompose,
    brute_plan_verdict,
    is_topological,
    random_catalog,
    random_order,
    random_suborders,
    suborder_as_dict,
)
from orderhub.compensation import StrategyConfig, UndoStrategy
from orderhub.errors import OrderHubError
from orderhub.fulfillment.actions import FulfillmentResult, Status
from orderhub.management.decompose import decompose
from orderhub.management.plan import apply_result, build_plan, mark_dispatched, next_ready, ready_nodes
from orderhub.model import CanonicalOrder, CustomerRef, OrderLine, OrderState, qualify
from orderhub.scenario import run_scenario

INVERSE = StrategyConfig(UndoStrategy.INVERSE_COMMAND)
CHECKPOINT = StrategyConfig(UndoStrategy.CHECKPOINT)

# first action of each of the five sub-orders of the reference order
REFERENCE_POSITIONS = (
    "crm:COMMIT_ADDRESS:1:FATAL",
    "broadband:INSTALL_CPE:1:FATAL",
    "voice:CREATE_SUBSCRIPTION:1:FATAL",
    "workforce:SCHEDULE_VISIT:1:FATAL",
    "billing:PROVISION_BILLING:1:FATAL",
)
# later actions inside multi-action sub-orders
EXTRA_POSITIONS = (
    "broadband:CREATE_SUBSCRIPTION:1:FATAL",
    "workforce:COMPLETE_TASK:1:FATAL",
    "billing:PROVISION_BILLING:2:FATAL",
)


def _decomposed(report, ref="A"):
    oid = report.order(ref).order_id
    (rec,) = records(report.engine, oid, "decomposed")
    return oid, rec.payload["suborders"]


@pytest.mark.criterion(1, "multi-play order decomposes into 2 SERVICE + 1 BILLING sub-orders")
def test_three_suborder_decomposition():
    report = run_scenario(scenario_path("multiplay"))
    assert report.ok, report.checks
    oid, subs = _decomposed(report)
    kinds = sorted(s["kind"] for s in subs)
    assert len(subs) == 3
    assert kinds == ["BILLING", "SERVICE", "SERVICE"]
    # the billing sub-order carries both billable services
    (billing,) = [s for s in subs if s["kind"] == "BILLING"]
    assert sorted(i["service_code"] for i in billing["items"]) == ["BB_100", "VOICE_LINE"]


# -- criterion 2 ----------------------------------------------------------------------

STREETS = ("Main St", "Oak Ave", "Harbour Rd")
PRODUCTS = ("MULTIPLAY_1", "HOME_BUNDLE", "DIAG_LINE", "PARTNER_VOICE", "PORTING_CHECK")
RETRY_POINTS = (
    "broadband:INSTALL_CPE", "broadband:CREATE_SUBSCRIPTION", "voice:CREATE_SUBSCRIPTION",
    "billing:PROVISION_BILLING", "crm:COMMIT_ADDRESS", "workforce:SCHEDULE_VISIT",
)


def random_good_order(rng: random.Random, n: int) -> CanonicalOrder:
    address = f"{rng.randint(1, 99)} {rng.choice(STREETS)}, Springfield"
    customer = CustomerRef(f"C-{5000 + n}", Decimal(10_000), address, frozenset({"sip"}), frozenset({"24M"}))
    lines = []
    for i in range(rng.randint(1, 3)):
        phone = f"+1555{n:03d}{i}"
        params = {
            "bandwidth": rng.choice(["100M", "200M"]),
            "cpe_model": rng.choice(["HG-8245", "HG-8010"]),
            "phone_number": phone,
            "install_address": address,
            "cpe_required": rng.choice(["true", "false"]),
        }
        lines.append(OrderLine(f"L{i + 1}", rng.choice(PRODUCTS), rng.randint(1, 2), params))
    return CanonicalOrder(f"RND-{n:04d}", rng.choice(["WEB", "POS", "CSR"]), customer, tuple(lines))


def billing_violations(engine, order_id: str) -> tuple[bool, list[str]]:
    """(has_billing, violations) for one finished order, judged from the journal."""
    (dec,) = records(engine, order_id, "decomposed")
    kinds = {s["suborder_id"]: s["kind"] for s in dec.payload["suborders"]}
    billing = {sid for sid, k in kinds.items() if k == "BILLING"}
    if not billing:
        return False, []
    done_at = {}
    for rec in records(engine, order_id, "result"):
        r = rec.payload["result"]
        if r["status"] == "SUCCESS" and kinds[r["suborder_id"]] != "BILLING":
            done_at[r["suborder_id"]] = rec.seq
    bad = []
    non_billing = {sid for sid, k in kinds.items() if k != "BILLING"}
    for rec in records(engine, order_id, "dispatched"):
        if rec.payload["suborder_id"] not in billing:
            continue
        if set(done_at) != non_billing:
            bad.append(f"{order_id}: billing dispatched before {sorted(non_billing - set(done_at))} completed")
        elif rec.seq <= max(done_at.values(), default=0):
            bad.append(f"{order_id}: billing dispatch seq {rec.seq} not after {max(done_at.values())}")
    return True, bad


@pytest.mark.criterion(2, "BILLING dispatched strictly after all other completions (>=100 random runs)")
def test_billing_last_randomized():
    rng = random.Random(2024)
    checked = 0
    violations = []
    run = 0
    while checked < 120:
        run += 1
        faults = [f"{p}:{rng.randint(1, 2)}:RETRYABLE" for p in rng.sample(RETRY_POINTS, rng.randint(0, 2))]
        engine = make_engine(
            "multiplay",
            faults=faults,
            seed=rng.randrange(1000),
            auto_complete={"visit.confirmation": "DONE", "porting.approval": "APPROVED"},
            parallel_dispatch=rng.random() < 0.5,
            duplicate_deliveries=rng.random() < 0.3,
            retry_delay=rng.choice([0.0, 1.0, 5.0]),
        )
        orders = [random_good_order(rng, run * 10 + k) for k in range(rng.randint(1, 3))]
        for o in orders:
            engine.submit_order(o)
        engine.run_until_idle(workers=rng.choice([1, 1, 3]))
        assert not engine.handler_errors, engine.handler_errors
        for o in orders:
            state = engine.status(o.order_id).state
            assert state is OrderState.COMPLETED, (o.order_id, state, engine.status(o.order_id).diagnostic)
            has_billing, bad = billing_violations(engine, o.order_id)
            violations += bad
            checked += has_billing
    assert checked >= 100
    assert violations == []


@pytest.mark.criterion(3, "voice dispatch carries the cpe.mac produced by broadband")
def test_mac_propagation():
    report = run_scenario(scenario_path("multiplay"))
    assert report.ok
    oid, subs = _decomposed(report)
    bb = next(s["suborder_id"] for s in subs if s["target_id"] == "broadband")
    voice = next(s["suborder_id"] for s in subs if s["target_id"] == "voice")
    produced = [
        r.payload["result"]["provided_data"]["cpe.mac"]
        for r in records(report.engine, oid, "result")
        if r.payload["result"]["suborder_id"] == bb and r.payload["result"]["status"] == "SUCCESS"
    ]
    sent = [r.payload["bindings"] for r in records(report.engine, oid, "dispatched") if r.payload["suborder_id"] == voice]
    assert len(produced) == 1 and sent
    assert all(b["cpe.mac"] == produced[0] for b in sent)
    # and the value that landed on both platforms is the same one
    bb_state = json.loads(report.dumps["broadband"])
    voice_state = json.loads(report.dumps["voice"])
    assert bb_state["customers"]["C-1001"]["cpe"]["L1:CPE_RENTAL"]["mac"] == produced[0]
    assert voice_state["customers"]["C-1001"]["subscriptions"]["L1:VOICE_LINE"]["attributes"]["cpe.mac"] == produced[0]


@pytest.mark.criterion(4, "FATAL at each of 5 positions x 2 strategies x 2 modes restores every platform")
def test_saga_atomicity_exhaustive():
    failures = []
    runs = 0
    for fault in REFERENCE_POSITIONS:
        for strategy in (INVERSE, CHECKPOINT):
            for parallel in (False, True):
                report = run_scenario(
                    scenario_path("reference"), faults=[fault], strategy=strategy,
                    options={"parallel_dispatch": parallel},
                )
                runs += 1
                agg = report.engine.status(report.order("A").order_id)
                tag = f"{fault} {strategy.default.value} parallel={parallel}"
                if agg.state is not OrderState.COMPENSATED:
                    failures.append(f"{tag}: state {agg.state.value}")
                changed = [t for t in report.dumps if report.dumps[t] != report.initial_dumps[t]]
                if changed:
                    failures.append(f"{tag}: changed {changed}")
                if report.handler_errors:
                    failures.append(f"{tag}: {report.handler_errors}")
    assert runs == 20
    assert failures == []


@pytest.mark.criterion(5, "all-INVERSE and all-CHECKPOINT leave identical dumps at every failure point")
def test_strategy_equivalence():
    mismatches = []
    cases = [("reference", f) for f in REFERENCE_POSITIONS + EXTRA_POSITIONS]
    # several orders where only one fails: final dumps are not the initial ones
    cases += [("mixed", "voice:CREATE_SUBSCRIPTION:2:FATAL"), ("mixed", "billing:PROVISION_BILLING:3:FATAL")]
    cases += [("multiplay", "billing:PROVISION_BILLING:1:FATAL"), ("multiplay", "voice:CREATE_SUBSCRIPTION:1:FATAL")]
    for name, fault in cases:
        a = run_scenario(scenario_path(name), faults=[fault], strategy=INVERSE)
        b = run_scenario(scenario_path(name), faults=[fault], strategy=CHECKPOINT)
        assert any(o.state == "COMPENSATED" for o in a.orders), (name, fault)
        if a.dumps != b.dumps:
            mismatches.append(f"{name} {fault}: {[t for t in a.dumps if a.dumps[t] != b.dumps[t]]}")
    assert mismatches == []


@pytest.mark.criterion(6, "duplicate deliveries: identical dumps, every effect applied once")
def test_idempotent_under_redelivery():
    for name in ("multiplay", "reference"):
        plain = run_scenario(scenario_path(name))
        dup = run_scenario(scenario_path(name), options={"duplicate_deliveries": True})
        assert plain.ok and dup.ok
        assert dup.dumps == plain.dumps
        for target in dup.engine.registry.targets():
            got = dup.engine.registry.get(target).effects
            want = plain.engine.registry.get(target).effects
            assert set(got) == set(want), target
            assert all(n == 1 for n in got.values()), (target, got)


def _normalized(subs, oid):
    return sorted(json.dumps(s, sort_keys=True).replace(oid, "ORDER") for s in subs)


@pytest.mark.criterion(7, "POS and WEB versions of one order give equal sub-orders and dumps")
def test_channel_invariance():
    pos = run_scenario(scenario_path("multiplay"))
    web = run_scenario(scenario_path("multiplay_web"))
    assert pos.ok and web.ok
    pos_oid, pos_subs = _decomposed(pos)
    web_oid, web_subs = _decomposed(web)
    assert pos_oid != web_oid
    assert _normalized(pos_subs, pos_oid) == _normalized(web_subs, web_oid)
    assert pos.dumps == web.dumps


def _cli(home, *args):
    env = dict(os.environ, PYTHONPATH=os.pathsep.join(sys.path))
    return subprocess.run(
        [sys.executable, "-m", "orderhub", "--home", str(home), *args],
        capture_output=True, text=True, env=env, timeout=60,
    )


@pytest.mark.criterion(8, "long-lived order survives a restart and completes via the CLI")
def test_long_lived_resumability(tmp_path):
    home = tmp_path / "home"
    first = _cli(home, "run", "scenario", str(scenario_path("long_lived")), "--json")
    assert first.returncode == 0, first.stderr
    report = json.loads(first.stdout)
    oid = report["orders"][0]["order_id"]
    assert report["orders"][0]["state"] == "IN_PROGRESS"

    status = json.loads(_cli(home, "order", "status", oid).stdout)
    assert "WAITING_HUMAN" in status["suborders"].values()

    listed = _cli(home, "task", "list")
    assert listed.returncode == 0
    (line,) = listed.stdout.splitlines()
    task_id = line.split("\t")[0]

    done = _cli(home, "task", "complete", task_id, "--data", "visit.confirmation=INSTALLED-OK")
    assert done.returncode == 0, done.stderr
    final = json.loads(_cli(home, "order", "status", oid).stdout)
    assert final["state"] == "COMPLETED"

    reference = run_scenario(scenario_path("reference"))
    assert reference.ok
    for target, data in reference.dumps.items():
        dumped = _cli(home, "platform", "dump", target)
        assert dumped.returncode == 0
        assert dumped.stdout.encode("utf-8") == data, target


@pytest.mark.criterion(9, "decompose matches the brute-force decomposer on 500 random pairs")
def test_decompose_oracle_equivalence():
    rng = random.Random(9)
    mismatches = []
    for i in range(500):
        catalog = random_catalog(rng)
        order = random_order(rng, catalog, order_id=f"O-{i}")
        try:
            expected = brute_decompose(order, catalog)
        except OracleError as exc:
            expected = exc.kind
        try:
            got = [suborder_as_dict(s) for s in decompose(order, catalog)]
        except OrderHubError as exc:
            got = type(exc).__name__
        if got != expected:
            mismatches.append(i)
    assert mismatches == [], f"{len(mismatches)} of 500 differ, first {mismatches[:5]}"


def _run_plan(plan, parallel: bool) -> list[str]:
    seq = []
    while True:
        batch = ready_nodes(plan) if parallel else [n for n in [next_ready(plan)] if n]
        if not batch:
            break
        for node in batch:
            mark_dispatched(plan, node.suborder_id)
            seq.append(node.suborder_id)
        for node in batch:
            # consistent producers: a key already bound keeps its value
            data = {k: plan.bindings.get(qualify(node.line_id, k), f"{node.line_id}:{k}") for k in node.provides_data}
            apply_result(plan, node.suborder_id, FulfillmentResult(node.suborder_id, Status.SUCCESS, data))
    return seq


@pytest.mark.criterion(10, "500 random plans: topological dispatch, rejections match brute force")
def test_plan_topology():
    rng = random.Random(10)
    problems = []
    verdicts = {}
    for i in range(500):
        subs, params = random_suborders(rng)
        expected = brute_plan_verdict(subs, params)
        verdicts[expected] = verdicts.get(expected, 0) + 1
        try:
            build_plan(subs, params)
            got = "ok"
        except OrderHubError as exc:
            got = {"CyclicDependency": "cycle", "UnsatisfiableData": "unsatisfiable",
                   "BillingOrderViolation": "billing"}.get(type(exc).__name__, type(exc).__name__)
        if got != expected:
            problems.append(f"#{i}: expected {expected}, got {got}")
            continue
        if got != "ok":
            continue
        nodes = [s.suborder_id for s in subs]
        edges = {(d, s.suborder_id) for s in subs for d in s.depends_on}
        for parallel in (False, True):
            plan = build_plan([s.__class__.from_dict(s.to_dict()) for s in subs], params)
            seq = _run_plan(plan, parallel)
            if not is_topological(seq, nodes, edges):
                problems.append(f"#{i}: parallel={parallel} sequence {seq} is not topological")
    assert verdicts.get("ok", 0) >= 100 and verdicts.get("cycle", 0) >= 50
    assert problems == []
