"""Product and work-order decomposition of a canonical order into sub-orders."""

from __future__ import annotations

import heapq
from collections import defaultdict

from ..catalog import Catalog, ComponentSpec, resolve_components
from ..errors import PlanError, UnsatisfiableData
from ..model import CanonicalOrder, Item, SubOrder, SubOrderKind


def billing_suborder_id(order_id: str) -> str:
    return f"{order_id}-billing"


def suborder_id(order_id: str, line_id: str, target_id: str) -> str:
    return f"{order_id}-{line_id}-{target_id}"


def _ordered(group: list[ComponentSpec]) -> list[ComponentSpec]:
    """Components of one sub-order in dependency order, ties by component code."""
    codes = {c.component_code: c for c in group}
    indeg = {code: 0 for code in codes}
    after = defaultdict(list)
    for c in group:
        for dep in c.depends_on:
            if dep in codes:
                indeg[c.component_code] += 1
                after[dep].append(c.component_code)
    heap = [code for code, n in indeg.items() if n == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        code = heapq.heappop(heap)
        out.append(codes[code])
        for nxt in after[code]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(heap, nxt)
    if len(out) != len(group):  # cyclic group; the catalog validator reports it
        return sorted(group, key=lambda c: c.component_code)
    return out


def decompose(order: CanonicalOrder, catalog: Catalog) -> list[SubOrder]:
    """Split ``order`` into per-line, per-target sub-orders plus one billing sub-order.

    Each sub-order only sees the parameters its own components declare.
    Dependencies come from component ``depends_on`` and from data keys
    (a consumer depends on the sibling that provides the key). Returns the
    sub-orders sorted by id.
    """
    result: list[SubOrder] = []
    billing_items: list[Item] = []
    for ln in order.lines:
        comps = resolve_components(catalog, ln.product_code, ln.params)
        groups: dict[str, list[ComponentSpec]] = defaultdict(list)
        for comp in comps:
            groups[comp.target_id].append(comp)
        owner = {c.component_code: suborder_id(order.order_id, ln.line_id, c.target_id) for c in comps}

        line_subs: list[tuple[SubOrder, list[ComponentSpec]]] = []
        for target, group in sorted(groups.items()):
            ordered = _ordered(group)
            provides = frozenset().union(*(c.provides_data for c in ordered))
            requires = frozenset().union(*(c.requires_data for c in ordered)) - provides
            items = tuple(
                Item(c.service_code, {k: ln.params[k] for k in sorted(c.param_keys) if k in ln.params}) for c in ordered
            )
            sub = SubOrder(
                suborder_id=suborder_id(order.order_id, ln.line_id, target),
                order_id=order.order_id,
                line_id=ln.line_id,
                target_id=target,
                kind=SubOrderKind(catalog.targets.get(target, "SERVICE")),
                customer_id=order.customer.customer_id,
                items=items,
                requires_data=requires,
                provides_data=provides,
            )
            line_subs.append((sub, ordered))

        for sub, group in line_subs:
            deps: set[str] = set()
            for comp in group:
                for dep in comp.depends_on:
                    # a dependency excluded by its condition imposes nothing
                    if dep in owner and owner[dep] != sub.suborder_id:
                        deps.add(owner[dep])
            for key in sorted(sub.requires_data):
                producers = {s.suborder_id for s, _ in line_subs if key in s.provides_data and s is not sub}
                if producers:
                    deps |= producers
                elif key not in ln.params:
                    raise UnsatisfiableData(sub.suborder_id, key)
            sub.depends_on = frozenset(deps)
            result.append(sub)

        for comp in comps:
            if comp.billable:
                billing_items.append(
                    Item(comp.service_code, {"line_id": ln.line_id, "product_code": ln.product_code, "qty": str(ln.qty)})
                )

    if billing_items:
        target = catalog.billing_target
        if target is None:
            raise PlanError("billable items but the catalog declares no BILLING target")
        result.append(
            SubOrder(
                suborder_id=billing_suborder_id(order.order_id),
                order_id=order.order_id,
                line_id=None,
                target_id=target,
                kind=SubOrderKind.BILLING,
                customer_id=order.customer.customer_id,
                items=tuple(billing_items),
                depends_on=frozenset(s.suborder_id for s in result),
            )
        )
    return sorted(result, key=lambda s: s.suborder_id)
