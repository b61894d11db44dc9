"""Business and technical validation rules evaluated by the order manager."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from ..catalog import Catalog, load_yaml_document, resolve_components
from ..errors import ParseError, UnknownProduct
from ..model import CanonicalOrder, CustomerRef


@dataclass(frozen=True)
class EnvironmentFacts:
    """Snapshot of the environment the technical rules consult.

    coverage: service_code -> address glob patterns where the service is offered.
    cpe_matrix: service_code -> capability tags the customer's CPE must have.
    """

    coverage: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    cpe_matrix: Mapping[str, frozenset[str]] = field(default_factory=dict)


@dataclass(frozen=True)
class RuleContext:
    facts: EnvironmentFacts
    catalog: Catalog | None = None


# A predicate returns None when the rule holds, else a failure message.
Predicate = Callable[[CanonicalOrder, CustomerRef, RuleContext], "str | None"]


@dataclass(frozen=True)
class ValidationRule:
    rule_id: str
    kind: str  # BUSINESS or TECHNICAL
    predicate: Predicate
    message: str = ""


@dataclass(frozen=True)
class ValidationResult:
    passed: bool
    failures: tuple[tuple[str, str], ...] = ()


def _services(order: CanonicalOrder, catalog: Catalog | None):
    if catalog is None:
        return
    for ln in order.lines:
        try:
            comps = resolve_components(catalog, ln.product_code, ln.params)
        except UnknownProduct:
            continue
        for comp in comps:
            yield ln, comp.service_code


def order_total(order: CanonicalOrder, catalog: Catalog) -> Decimal:
    total = Decimal(0)
    for ln in order.lines:
        try:
            total += catalog.product(ln.product_code).price * ln.qty
        except UnknownProduct:
            pass
    return total


def credit_limit_rule(rule_id: str = "CREDIT_LIMIT", **_: Any) -> ValidationRule:
    def check(order, customer, ctx):
        if ctx.catalog is None:
            return None
        total = order_total(order, ctx.catalog)
        if total > customer.credit_limit:
            return f"order total {total} exceeds credit limit {customer.credit_limit}"
        return None

    return ValidationRule(rule_id, "BUSINESS", check)


def service_availability_rule(rule_id: str = "SERVICE_AVAILABILITY", coverage: Mapping | None = None, **_: Any) -> ValidationRule:
    own = {k: tuple(v) for k, v in (coverage or {}).items()}

    def check(order, customer, ctx):
        cov = own or ctx.facts.coverage
        missing = sorted(
            {
                service
                for _, service in _services(order, ctx.catalog)
                if service in cov and not any(fnmatch.fnmatchcase(customer.premises_address, p) for p in cov[service])
            }
        )
        if missing:
            return f"{', '.join(missing)} not available at {customer.premises_address!r}"
        return None

    return ValidationRule(rule_id, "TECHNICAL", check)


def cpe_compatibility_rule(rule_id: str = "CPE_COMPATIBILITY", **_: Any) -> ValidationRule:
    def check(order, customer, ctx):
        problems = []
        for ln, service in _services(order, ctx.catalog):
            needed = ctx.facts.cpe_matrix.get(service, frozenset())
            # a line that brings new CPE does not depend on the installed one
            if ln.params.get("cpe_required") == "true":
                continue
            lacking = needed - customer.cpe_capabilities
            if lacking:
                problems.append(f"{service} needs {', '.join(sorted(lacking))}")
        return "; ".join(sorted(set(problems))) or None

    return ValidationRule(rule_id, "TECHNICAL", check)


def contract_terms_rule(
    rule_id: str = "CONTRACT_TERMS", blocked: Sequence[str] = (), required: Sequence[str] = (), **_: Any
) -> ValidationRule:
    blocked_set, required_set = frozenset(blocked), frozenset(required)

    def check(order, customer, ctx):
        hit = sorted(customer.contract_terms & blocked_set)
        if hit:
            return f"contract terms block ordering: {', '.join(hit)}"
        lacking = sorted(required_set - customer.contract_terms)
        if lacking:
            return f"contract lacks required terms: {', '.join(lacking)}"
        return None

    return ValidationRule(rule_id, "BUSINESS", check)


def max_quantity_rule(rule_id: str = "MAX_QUANTITY", limit: int = 10, **_: Any) -> ValidationRule:
    def check(order, customer, ctx):
        over = [ln.line_id for ln in order.lines if ln.qty > limit]
        return f"lines over quantity {limit}: {', '.join(over)}" if over else None

    return ValidationRule(rule_id, "BUSINESS", check)


RULE_TYPES: dict[str, Callable[..., ValidationRule]] = {
    "CREDIT_LIMIT": credit_limit_rule,
    "SERVICE_AVAILABILITY": service_availability_rule,
    "CPE_COMPATIBILITY": cpe_compatibility_rule,
    "CONTRACT_TERMS": contract_terms_rule,
    "MAX_QUANTITY": max_quantity_rule,
}


def validate_order(
    order: CanonicalOrder,
    customer: CustomerRef,
    rules: Sequence[ValidationRule],
    facts: EnvironmentFacts | None = None,
    catalog: Catalog | None = None,
) -> ValidationResult:
    """Evaluate every rule (no short-circuit) and aggregate failures by rule_id."""
    ctx = RuleContext(facts or EnvironmentFacts(), catalog)
    failures = []
    for rule in rules:
        message = rule.predicate(order, customer, ctx)
        if message:
            failures.append((rule.rule_id, rule.message or message))
    failures.sort()
    return ValidationResult(not failures, tuple(failures))


# -- configuration files ---------------------------------------------------------


def load_rules(text: str) -> list[ValidationRule]:
    data = load_yaml_document(text)
    if data is None:
        return []
    entries = data.get("rules", []) if isinstance(data, dict) else data
    if not isinstance(entries, list):
        raise ParseError("rules file must hold a list under 'rules'")
    rules = []
    for entry in entries:
        if not isinstance(entry, dict) or "id" not in entry:
            raise ParseError("each rule needs an id", getattr(entry, "line", None))
        options = dict(entry)
        rule_id = str(options.pop("id"))
        rule_type = str(options.pop("type", rule_id)).upper()
        kind = options.pop("kind", None)
        message = options.pop("message", "")
        if rule_type not in RULE_TYPES:
            raise ParseError(f"unknown rule type {rule_type!r}", getattr(entry, "line", None))
        rule = RULE_TYPES[rule_type](rule_id=rule_id, **options)
        if kind or message:
            rule = ValidationRule(rule.rule_id, str(kind or rule.kind).upper(), rule.predicate, str(message))
        rules.append(rule)
    return rules


def load_facts(text: str) -> EnvironmentFacts:
    data = load_yaml_document(text) or {}
    if not isinstance(data, dict):
        raise ParseError("facts file must be a mapping")
    coverage = {str(k): tuple(str(p) for p in v) for k, v in (data.get("coverage") or {}).items()}
    matrix = {str(k): frozenset(str(t) for t in v) for k, v in (data.get("cpe_matrix") or {}).items()}
    return EnvironmentFacts(coverage, matrix)


def load_rules_file(path: str | Path) -> list[ValidationRule]:
    return load_rules(Path(path).read_text(encoding="utf-8"))


def load_facts_file(path: str | Path) -> EnvironmentFacts:
    return load_facts(Path(path).read_text(encoding="utf-8"))
