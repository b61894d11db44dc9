"""Mediated product catalog: customer-facing products mapped onto platform components.

The catalog is immutable after loading and is shared read-only by every
module. Parsing and validation are separate steps; ``load_catalog`` accepts
anything well-formed and ``validate_catalog`` reports rule violations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .errors import ParseError, UnknownProduct
from .findings import ValidationReport

TARGET_KINDS = ("SERVICE", "WORK_ORDER", "HUMAN_TASK", "BILLING")


@dataclass(frozen=True)
class ComponentSpec:
    component_code: str
    service_code: str
    target_id: str
    billable: bool = False
    param_keys: frozenset[str] = frozenset()
    requires_data: frozenset[str] = frozenset()
    provides_data: frozenset[str] = frozenset()
    depends_on: frozenset[str] = frozenset()
    # conjunction of key == value tests over the order line parameters
    condition: tuple[tuple[str, str], ...] = ()

    def applies_to(self, params: Mapping[str, str]) -> bool:
        return all(params.get(k) == v for k, v in self.condition)


@dataclass(frozen=True)
class ProductSpec:
    product_code: str
    display_name: str
    price: Decimal
    components: tuple[ComponentSpec, ...]

    def component(self, code: str) -> ComponentSpec:
        for comp in self.components:
            if comp.component_code == code:
                return comp
        raise KeyError(code)

    @property
    def param_keys(self) -> frozenset[str]:
        keys: set[str] = set()
        for comp in self.components:
            keys |= comp.param_keys
        return frozenset(keys)


@dataclass(frozen=True)
class ProductView:
    """What a customer sees: no targets, no dependency wiring."""

    product_code: str
    display_name: str
    price: Decimal
    attributes: tuple[str, ...]
    services: tuple[str, ...]
    billable_services: tuple[str, ...]


@dataclass(frozen=True)
class Catalog:
    product_list: tuple[ProductSpec, ...] = ()
    # target_id -> kind
    targets: Mapping[str, str] = field(default_factory=dict)

    @property
    def products(self) -> dict[str, ProductSpec]:
        out: dict[str, ProductSpec] = {}
        for p in self.product_list:
            out.setdefault(p.product_code, p)
        return out

    def product(self, code: str) -> ProductSpec:
        for p in self.product_list:
            if p.product_code == code:
                return p
        raise UnknownProduct(code)

    def target_kind(self, target_id: str) -> str:
        return self.targets[target_id]

    @property
    def billing_target(self) -> str | None:
        billing = sorted(t for t, k in self.targets.items() if k == "BILLING")
        return billing[0] if billing else None


# -- parsing -----------------------------------------------------------------


class _LineLoader(yaml.SafeLoader):
    """SafeLoader that remembers the source line of every mapping."""


class _LineDict(dict):
    line: int | None = None


def _construct_mapping(loader: _LineLoader, node: yaml.MappingNode) -> _LineDict:
    d = _LineDict(loader.construct_mapping(node, deep=True))
    d.line = node.start_mark.line + 1
    return d


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def load_yaml_document(text: str, error: type[ParseError] = ParseError) -> Any:
    try:
        return yaml.load(text, Loader=_LineLoader)  # noqa: S506 - SafeLoader subclass
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark else None
        col = mark.column + 1 if mark else None
        raise error(f"malformed document: {exc.problem or exc}", line, col) from None
    except yaml.YAMLError as exc:
        raise error(f"malformed document: {exc}") from None


def _line(node: Any) -> int | None:
    return getattr(node, "line", None)


def _str_set(value: Any, where: Any, what: str) -> frozenset[str]:
    if value is None:
        return frozenset()
    if not isinstance(value, list):
        raise ParseError(f"{what} must be a list", _line(where))
    return frozenset(str(v) for v in value)


def _condition(value: Any, where: Any) -> tuple[tuple[str, str], ...]:
    if value is None:
        return ()
    items = [value] if isinstance(value, str) else value
    if not isinstance(items, list):
        raise ParseError("condition must be a list of key=value strings", _line(where))
    pairs = []
    for item in items:
        text = str(item)
        if "=" not in text:
            raise ParseError(f"condition {text!r} is not key=value", _line(where))
        key, val = text.split("=", 1)
        pairs.append((key.strip(), val.strip()))
    return tuple(sorted(pairs))


def _require(node: Mapping, key: str) -> Any:
    if key not in node:
        raise ParseError(f"missing field {key!r}", _line(node))
    return node[key]


def _parse_component(node: Any) -> ComponentSpec:
    if not isinstance(node, dict):
        raise ParseError("component must be a mapping", _line(node))
    billable = node.get("billable", False)
    if not isinstance(billable, bool):
        raise ParseError("billable must be true or false", _line(node))
    return ComponentSpec(
        component_code=str(_require(node, "code")),
        service_code=str(_require(node, "service")),
        target_id=str(_require(node, "target")),
        billable=billable,
        param_keys=_str_set(node.get("params"), node, "params"),
        requires_data=_str_set(node.get("requires"), node, "requires"),
        provides_data=_str_set(node.get("provides"), node, "provides"),
        depends_on=_str_set(node.get("depends_on"), node, "depends_on"),
        condition=_condition(node.get("condition"), node),
    )


def _parse_product(node: Any) -> ProductSpec:
    if not isinstance(node, dict):
        raise ParseError("product must be a mapping", _line(node))
    try:
        price = Decimal(str(node.get("price", 0)))
    except InvalidOperation:
        raise ParseError(f"bad price {node.get('price')!r}", _line(node)) from None
    comps = node.get("components") or []
    if not isinstance(comps, list):
        raise ParseError("components must be a list", _line(node))
    return ProductSpec(
        product_code=str(_require(node, "code")),
        display_name=str(node.get("name", node.get("code"))),
        price=price,
        components=tuple(_parse_component(c) for c in comps),
    )


def load_catalog(doc: str) -> Catalog:
    """Parse a catalog document. Structure only; no semantic validation."""
    data = load_yaml_document(doc)
    if data is None:
        return Catalog()
    if not isinstance(data, dict):
        raise ParseError("catalog must be a mapping with 'targets' and 'products'", 1)
    targets: dict[str, str] = {}
    raw_targets = data.get("targets") or []
    if not isinstance(raw_targets, list):
        raise ParseError("targets must be a list", _line(data))
    for t in raw_targets:
        if isinstance(t, str):
            targets[t] = "SERVICE"
        elif isinstance(t, dict):
            kind = str(t.get("kind", "SERVICE")).upper()
            if kind not in TARGET_KINDS:
                raise ParseError(f"unknown target kind {kind!r}", _line(t))
            targets[str(_require(t, "id"))] = kind
        else:
            raise ParseError("target entries must be ids or mappings", _line(data))
    raw_products = data.get("products") or []
    if not isinstance(raw_products, list):
        raise ParseError("products must be a list", _line(data))
    return Catalog(product_list=tuple(_parse_product(p) for p in raw_products), targets=targets)


def load_catalog_file(path: str | Path) -> Catalog:
    return load_catalog(Path(path).read_text(encoding="utf-8"))


# -- validation --------------------------------------------------------------


def find_cycle(nodes: Iterable[str], edges: Mapping[str, Iterable[str]]) -> list[str] | None:
    """Return one cycle as [a, b, ..., a] in a directed graph, or None.

    ``edges[n]`` lists the successors of ``n``. Deterministic: nodes and
    successors are visited in sorted order.
    """
    WHITE, GREY, BLACK = 0, 1, 2
    colour = {n: WHITE for n in nodes}
    stack: list[str] = []

    def visit(n: str) -> list[str] | None:
        colour[n] = GREY
        stack.append(n)
        for m in sorted(edges.get(n, ())):
            if m not in colour:
                continue
            if colour[m] == GREY:
                return stack[stack.index(m):] + [m]
            if colour[m] == WHITE:
                found = visit(m)
                if found:
                    return found
        stack.pop()
        colour[n] = BLACK
        return None

    for n in sorted(colour):
        if colour[n] == WHITE:
            found = visit(n)
            if found:
                return found
    return None


def validate_catalog(catalog: Catalog) -> ValidationReport:
    report = ValidationReport()
    seen: set[str] = set()
    for product in catalog.product_list:
        code = product.product_code
        if code in seen:
            report.add("DUPLICATE_PRODUCT", code)
        seen.add(code)
        if product.price < 0:
            report.add("NEGATIVE_PRICE", code, str(product.price))
        if not product.components:
            report.add("NO_COMPONENTS", code)
            continue
        if product.price != 0 and not any(c.billable for c in product.components):
            report.add("NOTHING_BILLABLE", code, "priced product needs a billable component")
        if any(c.billable for c in product.components) and catalog.billing_target is None:
            report.add("NO_BILLING_TARGET", code)

        codes = [c.component_code for c in product.components]
        for dup in sorted({c for c in codes if codes.count(c) > 1}):
            report.add("DUPLICATE_COMPONENT", code, dup)
        known = set(codes)
        providers: dict[str, list[str]] = {}
        for comp in product.components:
            if comp.target_id not in catalog.targets:
                report.add("UNKNOWN_TARGET", code, f"{comp.component_code} -> {comp.target_id}")
            elif catalog.targets[comp.target_id] == "BILLING":
                report.add("BILLING_TARGET_COMPONENT", code, comp.component_code)
            for dep in sorted(comp.depends_on):
                if dep not in known:
                    report.add("UNKNOWN_DEPENDENCY", code, f"{comp.component_code} -> {dep}")
            for key in comp.provides_data:
                providers.setdefault(key, []).append(comp.component_code)
        for key, who in sorted(providers.items()):
            if len(who) > 1:
                report.add("DUPLICATE_PROVIDER", code, f"{key}: {', '.join(sorted(who))}")

        params = product.param_keys
        for comp in product.components:
            for key in sorted(comp.requires_data):
                others = [p for p in providers.get(key, []) if p != comp.component_code]
                if not others and key not in params:
                    report.add("UNSATISFIED_DATA", code, f"{comp.component_code} requires {key}")

        graph = {c.component_code: set(c.depends_on) for c in product.components}
        cycle = find_cycle(graph, graph)
        if cycle:
            report.add("CYCLE", code, "->".join(cycle))
    return report.sort()


# -- queries -----------------------------------------------------------------


def customer_view(catalog: Catalog, product_code: str) -> ProductView:
    product = catalog.product(product_code)
    return ProductView(
        product_code=product.product_code,
        display_name=product.display_name,
        price=product.price,
        attributes=tuple(sorted(product.param_keys)),
        services=tuple(sorted({c.service_code for c in product.components})),
        billable_services=tuple(sorted({c.service_code for c in product.components if c.billable})),
    )


def resolve_components(
    catalog: Catalog, product_code: str, order_params: Mapping[str, str]
) -> list[ComponentSpec]:
    product = catalog.product(product_code)
    chosen = [c for c in product.components if c.applies_to(order_params)]
    return sorted(chosen, key=lambda c: c.component_code)
