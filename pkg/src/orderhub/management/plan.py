"""Dynamic fulfillment plan: a dependency DAG over sub-orders plus data bindings."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from ..catalog import find_cycle
from ..errors import (
    BillingOrderViolation,
    BindingConflict,
    CyclicDependency,
    PlanError,
    StaleResult,
    UnknownSubOrder,
    UnsatisfiableData,
)
from ..fulfillment.actions import FulfillmentResult, Status
from ..model import SubOrder, SubOrderKind, SubOrderState, qualify


@dataclass
class ExecutionPlan:
    nodes: dict[str, SubOrder] = field(default_factory=dict)
    # (blocker, blocked)
    edges: frozenset[tuple[str, str]] = frozenset()
    # line-qualified data key -> value
    bindings: dict[str, str] = field(default_factory=dict)
    results: dict[str, FulfillmentResult] = field(default_factory=dict)

    @property
    def status(self) -> dict[str, SubOrderState]:
        return {sid: n.state for sid, n in self.nodes.items()}

    def predecessors(self, sid: str) -> set[str]:
        return {a for a, b in self.edges if b == sid}

    def successors(self, sid: str) -> set[str]:
        return {b for a, b in self.edges if a == sid}

    def ancestors(self, sid: str) -> set[str]:
        seen: set[str] = set()
        todo = list(self.predecessors(sid))
        while todo:
            n = todo.pop()
            if n not in seen:
                seen.add(n)
                todo.extend(self.predecessors(n))
        return seen

    def in_state(self, *states: SubOrderState) -> list[str]:
        return sorted(sid for sid, n in self.nodes.items() if n.state in states)

    def all_done(self) -> bool:
        return all(n.state is SubOrderState.DONE for n in self.nodes.values())

    def required_bindings(self, sid: str) -> dict[str, str]:
        """Unqualified view of the bindings a node needs, for dispatch."""
        node = self.nodes[sid]
        out = {}
        for key in sorted(node.requires_data):
            q = qualify(node.line_id, key)
            if q in self.bindings:
                out[key] = self.bindings[q]
        return out

    def unbound(self, sid: str) -> list[str]:
        node = self.nodes[sid]
        return sorted(k for k in node.requires_data if qualify(node.line_id, k) not in self.bindings)

    def to_dict(self) -> dict[str, Any]:
        return {
            "nodes": [n.to_dict() for _, n in sorted(self.nodes.items())],
            "edges": sorted([list(e) for e in self.edges]),
            "bindings": dict(sorted(self.bindings.items())),
        }


def build_plan(suborders: Iterable[SubOrder], order_params: Mapping[str, str] | None = None) -> ExecutionPlan:
    """Build and check a plan. ``order_params`` uses line-qualified keys (see ``qualify``)."""
    params = dict(order_params or {})
    nodes: dict[str, SubOrder] = {}
    for sub in suborders:
        if sub.suborder_id in nodes:
            raise PlanError(f"duplicate sub-order {sub.suborder_id}")
        nodes[sub.suborder_id] = sub
    edges = set()
    for sub in nodes.values():
        for dep in sub.depends_on:
            if dep not in nodes:
                raise PlanError(f"{sub.suborder_id} depends on unknown {dep}")
            edges.add((dep, sub.suborder_id))
    succ: dict[str, set[str]] = {sid: set() for sid in nodes}
    for a, b in edges:
        succ[a].add(b)
    cycle = find_cycle(nodes, succ)
    if cycle:
        raise CyclicDependency(cycle)

    plan = ExecutionPlan(nodes=nodes, edges=frozenset(edges), bindings=params)
    for sid in sorted(nodes):
        node = nodes[sid]
        ancestors = [nodes[a] for a in plan.ancestors(sid)]
        for key in sorted(node.requires_data):
            if qualify(node.line_id, key) in params:
                continue
            if any(a.line_id == node.line_id and key in a.provides_data for a in ancestors):
                continue
            raise UnsatisfiableData(sid, key)
    services = {sid for sid, n in nodes.items() if n.kind is SubOrderKind.SERVICE}
    for sid, node in sorted(nodes.items()):
        if node.kind is SubOrderKind.BILLING:
            same_order = {s for s in services if nodes[s].order_id == node.order_id}
            missing = same_order - plan.ancestors(sid)
            if missing:
                raise BillingOrderViolation(f"{sid} is not after {', '.join(sorted(missing))}")
    return plan


def ready_nodes(plan: ExecutionPlan) -> list[SubOrder]:
    ready = []
    for sid in sorted(plan.nodes):
        node = plan.nodes[sid]
        if node.state is not SubOrderState.PENDING:
            continue
        if any(plan.nodes[p].state is not SubOrderState.DONE for p in plan.predecessors(sid)):
            continue
        if plan.unbound(sid):
            continue
        ready.append(node)
    return ready


def next_ready(plan: ExecutionPlan) -> SubOrder | None:
    ready = ready_nodes(plan)
    return ready[0] if ready else None


def binding_conflicts(plan: ExecutionPlan, sid: str, data: Mapping[str, str]) -> list[str]:
    node = plan.nodes[sid]
    out = []
    for key, value in sorted(data.items()):
        q = qualify(node.line_id, key)
        if q in plan.bindings and plan.bindings[q] != value:
            out.append(key)
    return out


def mark_dispatched(plan: ExecutionPlan, sid: str) -> None:
    node = plan.nodes[sid]
    if node.state not in (SubOrderState.PENDING, SubOrderState.READY, SubOrderState.FAILED, SubOrderState.DISPATCHED):
        raise StaleResult(f"cannot dispatch {sid} in {node.state.value}")
    node.state = SubOrderState.DISPATCHED


def apply_result(plan: ExecutionPlan, suborder_id: str, result: FulfillmentResult) -> ExecutionPlan:
    """Fold a fulfillment result into the plan (mutates and returns it)."""
    if suborder_id not in plan.nodes:
        raise UnknownSubOrder(suborder_id)
    node = plan.nodes[suborder_id]
    if result.status is Status.SUCCESS:
        conflicts = binding_conflicts(plan, suborder_id, result.provided_data)
        if conflicts:
            raise BindingConflict(f"{suborder_id}: {', '.join(conflicts)} already bound to a different value")
    if node.state is SubOrderState.DONE and result.status is Status.SUCCESS:
        return plan  # duplicate delivery of the same success
    if node.state not in (SubOrderState.DISPATCHED, SubOrderState.WAITING_HUMAN):
        raise StaleResult(f"{suborder_id} is {node.state.value}")
    if result.status is Status.SUCCESS:
        for key, value in result.provided_data.items():
            plan.bindings[qualify(node.line_id, key)] = value
        node.state = SubOrderState.DONE
        plan.results[suborder_id] = result
    elif result.status is Status.PENDING_HUMAN:
        node.state = SubOrderState.WAITING_HUMAN
    else:
        node.state = SubOrderState.FAILED
        plan.results[suborder_id] = result
    return plan
