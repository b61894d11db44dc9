"""Independent reference implementations used as test oracles.

Nothing here imports the code under test's algorithms: only its data
types, so results can be compared field by field.
"""

from __future__ import annotations

import itertools
import random
from decimal import Decimal

from orderhub.catalog import Catalog, ComponentSpec, ProductSpec
from orderhub.model import CanonicalOrder, CustomerRef, OrderLine, SubOrder, SubOrderKind


class OracleError(Exception):
    def __init__(self, kind: str, *detail):
        self.kind = kind
        self.detail = detail
        super().__init__(kind, *detail)


# -- decomposition ------------------------------------------------------------------


def _smallest_valid_permutation(group: list[ComponentSpec]) -> list[ComponentSpec]:
    codes = {c.component_code for c in group}
    best = None
    for perm in itertools.permutations(sorted(group, key=lambda c: c.component_code)):
        pos = {c.component_code: i for i, c in enumerate(perm)}
        if all(pos[d] < pos[c.component_code] for c in perm for d in c.depends_on if d in codes):
            key = [c.component_code for c in perm]
            if best is None or key < best[0]:
                best = (key, list(perm))
    if best is None:
        return sorted(group, key=lambda c: c.component_code)
    return best[1]


def brute_decompose(order: CanonicalOrder, catalog: Catalog) -> list[dict]:
    """Sub-orders as plain dicts, or raises OracleError."""
    out: list[dict] = []
    billing: list[tuple[str, dict]] = []
    for ln in order.lines:
        products = [p for p in catalog.product_list if p.product_code == ln.product_code]
        if not products:
            raise OracleError("UnknownProduct", ln.product_code)
        applied = [
            c for c in products[0].components if all(ln.params.get(k) == v for k, v in c.condition)
        ]
        applied.sort(key=lambda c: c.component_code)
        targets = sorted({c.target_id for c in applied})
        line_subs = []
        for t in targets:
            group = _smallest_valid_permutation([c for c in applied if c.target_id == t])
            provides = set()
            requires = set()
            for c in group:
                provides |= c.provides_data
                requires |= c.requires_data
            line_subs.append(
                {
                    "id": f"{order.order_id}-{ln.line_id}-{t}",
                    "line": ln.line_id,
                    "target": t,
                    "kind": catalog.targets.get(t, "SERVICE"),
                    "items": [
                        (c.service_code, {k: ln.params[k] for k in c.param_keys if k in ln.params}) for c in group
                    ],
                    "requires": requires - provides,
                    "provides": provides,
                    "codes": {c.component_code for c in group},
                    "comp_deps": set().union(*(c.depends_on for c in group)),
                }
            )
        for sub in line_subs:
            deps = set()
            for other in line_subs:
                if other is sub:
                    continue
                if sub["comp_deps"] & other["codes"]:
                    deps.add(other["id"])
            for key in sorted(sub["requires"]):
                makers = [o["id"] for o in line_subs if o is not sub and key in o["provides"]]
                if makers:
                    deps.update(makers)
                elif key not in ln.params:
                    raise OracleError("UnsatisfiableData", sub["id"], key)
            sub["depends"] = deps
        for sub in line_subs:
            del sub["codes"], sub["comp_deps"]
            out.append(sub)
        for c in applied:
            if c.billable:
                billing.append((c.service_code, {"line_id": ln.line_id, "product_code": ln.product_code, "qty": str(ln.qty)}))
    if billing:
        billing_targets = sorted(t for t, k in catalog.targets.items() if k == "BILLING")
        if not billing_targets:
            raise OracleError("PlanError", "no billing target")
        out.append(
            {
                "id": f"{order.order_id}-billing",
                "line": None,
                "target": billing_targets[0],
                "kind": "BILLING",
                "items": billing,
                "requires": set(),
                "provides": set(),
                "depends": {s["id"] for s in out},
            }
        )
    out.sort(key=lambda s: s["id"])
    return out


def suborder_as_dict(sub: SubOrder) -> dict:
    return {
        "id": sub.suborder_id,
        "line": sub.line_id,
        "target": sub.target_id,
        "kind": sub.kind.value,
        "items": [(i.service_code, dict(i.params)) for i in sub.items],
        "requires": set(sub.requires_data),
        "provides": set(sub.provides_data),
        "depends": set(sub.depends_on),
    }


# -- plan checking ---------------------------------------------------------------------


def reachability(nodes: list[str], edges: set[tuple[str, str]]) -> dict[str, set[str]]:
    """reach[a] = nodes reachable from a by one or more edges (Floyd-Warshall style)."""
    reach = {n: {b for a, b in edges if a == n} for n in nodes}
    for k in nodes:
        for i in nodes:
            if k in reach[i]:
                reach[i] |= reach[k]
    return reach


def brute_plan_verdict(subs: list[SubOrder], params: dict[str, str]) -> str:
    """'ok', 'cycle', 'unsatisfiable' or 'billing' for a set of sub-orders."""
    nodes = [s.suborder_id for s in subs]
    by_id = {s.suborder_id: s for s in subs}
    edges = {(d, s.suborder_id) for s in subs for d in s.depends_on}
    reach = reachability(nodes, edges)
    if any(n in reach[n] for n in nodes):
        return "cycle"
    for s in subs:
        ancestors = [by_id[a] for a in nodes if s.suborder_id in reach[a]]
        for key in s.requires_data:
            if f"{s.line_id or '*'}/{key}" in params:
                continue
            if not any(a.line_id == s.line_id and key in a.provides_data for a in ancestors):
                return "unsatisfiable"
    for s in subs:
        if s.kind is SubOrderKind.BILLING:
            for o in subs:
                if o.kind is SubOrderKind.SERVICE and o.order_id == s.order_id and s.suborder_id not in reach[o.suborder_id]:
                    return "billing"
    return "ok"


def is_topological(sequence: list[str], nodes: list[str], edges) -> bool:
    if sorted(sequence) != sorted(nodes) or len(set(sequence)) != len(sequence):
        return False
    pos = {n: i for i, n in enumerate(sequence)}
    return all(pos[a] < pos[b] for a, b in edges)


def all_topological_orders(nodes: list[str], edges) -> set[tuple[str, ...]]:
    """Every topological order, by filtering permutations (small graphs only)."""
    edges = list(edges)
    return {p for p in itertools.permutations(nodes) if all(p.index(a) < p.index(b) for a, b in edges)}


# -- generators ------------------------------------------------------------------------

KEYS = ("k0", "k1", "k2", "k3")
PARAMS = ("p0", "p1", "p2")


def random_catalog(rng: random.Random, max_components: int = 5) -> Catalog:
    kinds = ["SERVICE", "SERVICE", "WORK_ORDER", "HUMAN_TASK"]
    targets = {f"t{i}": rng.choice(kinds) for i in range(rng.randint(1, 4))}
    if rng.random() < 0.9:
        targets["bill"] = "BILLING"
    placeable = sorted(t for t, k in targets.items() if k != "BILLING")
    products = []
    for p in range(rng.randint(1, 3)):
        n = rng.randint(1, max_components)
        codes = [f"C{i}" for i in range(n)]
        free_keys = list(KEYS)
        rng.shuffle(free_keys)
        comps = []
        for i, code in enumerate(codes):
            provides = set()
            if free_keys and rng.random() < 0.5:
                provides.add(free_keys.pop())
            requires = {k for k in KEYS + ("p0",) if rng.random() < 0.07} - provides
            depends = {c for c in codes if c != code and rng.random() < 0.2}
            condition = (("p1", "x"),) if rng.random() < 0.15 else ()
            comps.append(
                ComponentSpec(
                    component_code=code,
                    service_code=f"S{p}{i}",
                    target_id=rng.choice(placeable),
                    billable=rng.random() < 0.5,
                    param_keys=frozenset(k for k in PARAMS if rng.random() < 0.4),
                    requires_data=frozenset(requires),
                    provides_data=frozenset(provides),
                    depends_on=frozenset(depends),
                    condition=condition,
                )
            )
        products.append(ProductSpec(f"P{p}", f"product {p}", Decimal(rng.randint(0, 50)), tuple(comps)))
    return Catalog(product_list=tuple(products), targets=targets)


def random_order(rng: random.Random, catalog: Catalog, order_id: str = "O-1") -> CanonicalOrder:
    lines = []
    for i in range(rng.randint(1, 3)):
        product = rng.choice(catalog.product_list).product_code
        if rng.random() < 0.05:
            product = "NO_SUCH_PRODUCT"
        params = {k: rng.choice(["x", "y"]) for k in PARAMS if rng.random() < 0.6}
        lines.append(OrderLine(f"L{i + 1}", product, rng.randint(1, 3), params))
    return CanonicalOrder(order_id, "WEB", CustomerRef("CUST-1", Decimal(1000)), tuple(lines))


def random_suborders(rng: random.Random, max_nodes: int = 10) -> tuple[list[SubOrder], dict[str, str]]:
    """Arbitrary (possibly cyclic or unsatisfiable) sub-order sets for plan tests."""
    n = rng.randint(1, max_nodes)
    ids = [f"O-1-n{i}" for i in range(n)]
    lines = ["L1", "L2"]
    subs = []
    billing_at = rng.randrange(n) if rng.random() < 0.4 else None
    for i, sid in enumerate(ids):
        kind = SubOrderKind.BILLING if i == billing_at else rng.choice(
            [SubOrderKind.SERVICE, SubOrderKind.SERVICE, SubOrderKind.WORK_ORDER]
        )
        # mostly forward edges, with the odd back edge to produce cycles
        deps = {ids[j] for j in range(i) if rng.random() < 0.3}
        if rng.random() < 0.08 and i + 1 < n:
            deps.add(ids[rng.randrange(i + 1, n)])
        if kind is SubOrderKind.BILLING and rng.random() < 0.8:
            deps |= {x for x in ids if x != sid and rng.random() < 0.9}
        subs.append(
            SubOrder(
                suborder_id=sid,
                order_id="O-1",
                line_id=None if kind is SubOrderKind.BILLING else rng.choice(lines),
                target_id=f"t{rng.randrange(3)}",
                kind=kind,
                customer_id="CUST-1",
                requires_data=frozenset(k for k in KEYS if rng.random() < 0.08),
                provides_data=frozenset(k for k in KEYS if rng.random() < 0.3),
                depends_on=frozenset(deps),
            )
        )
    params = {f"{ln}/{k}": "v" for ln in lines for k in KEYS if rng.random() < 0.15}
    return subs, params
