from decimal import Decimal

import pytest

from orderhub.catalog import customer_view, find_cycle, load_catalog, load_catalog_file, resolve_components, validate_catalog
from orderhub.errors import ParseError, UnknownProduct


def test_reference_catalog_is_valid(fixtures):
    catalog = load_catalog_file(fixtures / "catalog.yaml")
    report = validate_catalog(catalog)
    assert report.ok, report.findings
    assert catalog.billing_target == "billing"
    assert catalog.targets["workforce"] == "WORK_ORDER"
    assert catalog.product("MULTIPLAY_1").price == Decimal("45.00")


def test_invalid_catalog_reports_every_rule(fixtures):
    report = validate_catalog(load_catalog_file(fixtures / "catalog_invalid.yaml"))
    assert not report.ok
    assert {"CYCLE", "UNKNOWN_TARGET"} <= report.rules()


def _one_product(components: str, targets="[{id: a}, {id: bill, kind: BILLING}]", price=10) -> str:
    return f"targets: {targets}\nproducts:\n  - code: P\n    price: {price}\n    components:\n{components}"


def test_component_cycle_found():
    doc = _one_product(
        "      - {code: A, service: S1, target: a, billable: true, depends_on: [B]}\n"
        "      - {code: B, service: S2, target: a, depends_on: [A]}\n"
    )
    report = validate_catalog(load_catalog(doc))
    (finding,) = [f for f in report.findings if f.rule == "CYCLE"]
    assert finding.detail in ("A->B->A", "B->A->B")


@pytest.mark.parametrize(
    "components, rule",
    [
        ("      - {code: A, service: S, target: zz, billable: true}\n", "UNKNOWN_TARGET"),
        ("      - {code: A, service: S, target: a}\n", "NOTHING_BILLABLE"),
        ("      - {code: A, service: S, target: a, billable: true, requires: [x]}\n", "UNSATISFIED_DATA"),
        ("      - {code: A, service: S, target: a, billable: true, depends_on: [Q]}\n", "UNKNOWN_DEPENDENCY"),
        ("      - {code: A, service: S, target: bill, billable: true}\n", "BILLING_TARGET_COMPONENT"),
        (
            "      - {code: A, service: S, target: a, billable: true, provides: [x]}\n"
            "      - {code: B, service: T, target: a, provides: [x]}\n",
            "DUPLICATE_PROVIDER",
        ),
    ],
)
def test_validation_rules(components, rule):
    assert rule in validate_catalog(load_catalog(_one_product(components))).rules()


def test_no_billing_target_for_billable():
    doc = _one_product("      - {code: A, service: S, target: a, billable: true}\n", targets="[a]")
    assert "NO_BILLING_TARGET" in validate_catalog(load_catalog(doc)).rules()


def test_requirement_met_by_param_is_fine():
    doc = _one_product("      - {code: A, service: S, target: a, billable: true, params: [x], requires: [x]}\n")
    assert validate_catalog(load_catalog(doc)).ok


def test_parse_error_carries_line():
    with pytest.raises(ParseError) as exc:
        load_catalog("targets: [a]\nproducts:\n  - code: P\n    components:\n      - {service: S, target: a}\n")
    assert "code" in str(exc.value)
    assert exc.value.line is not None


def test_malformed_yaml():
    with pytest.raises(ParseError):
        load_catalog("targets: [a\n")


def test_empty_document_is_empty_catalog():
    assert load_catalog("").product_list == ()


def test_customer_view_hides_targets(fixtures):
    view = customer_view(load_catalog_file(fixtures / "catalog.yaml"), "MULTIPLAY_1")
    assert view.services == ("BB_100", "CPE_RENTAL", "VOICE_LINE")
    assert view.billable_services == ("BB_100", "VOICE_LINE")
    assert "broadband" not in repr(view)


def test_resolve_components_applies_conditions(fixtures):
    catalog = load_catalog_file(fixtures / "catalog.yaml")
    with_visit = resolve_components(catalog, "HOME_BUNDLE", {"cpe_required": "true"})
    without = resolve_components(catalog, "HOME_BUNDLE", {"cpe_required": "false"})
    assert [c.component_code for c in with_visit] == ["ADDR", "BB", "CPE", "VISIT", "VOICE"]
    assert "VISIT" not in [c.component_code for c in without]
    with pytest.raises(UnknownProduct):
        resolve_components(catalog, "NOPE", {})


def test_find_cycle():
    assert find_cycle("abc", {"a": "b", "b": "c", "c": ""}) is None
    cycle = find_cycle("abc", {"a": "b", "b": "c", "c": "a"})
    assert cycle[0] == cycle[-1] and set(cycle) == {"a", "b", "c"}
