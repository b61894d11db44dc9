"""Simulated legacy platforms behind resource adapters.

Every platform keeps its business state as a JSON document partitioned by
customer id. Idempotency records and effect counters live beside the state,
never inside it, so a state dump only reflects business data.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ..errors import BadEnvelope, DuplicateTarget, SnapshotMismatch, UnknownTarget, UnsupportedItem
from ..model import SubOrder
from .actions import Action, Outcome, Verb, idempotency_key
from .b2b import B2BEnvelope, b2b_unwrap, b2b_wrap
from .faults import FaultPlan


class PlatformError(Exception):
    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(message or code)


def canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _prune(value: Any) -> Any:
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            v = _prune(v)
            if v == {} or v is None:
                continue
            out[k] = v
        return out
    return value


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


@dataclass(frozen=True)
class StateSnapshot:
    target_id: str
    scope: str | None
    state: Any
    content_hash: str = field(default="", compare=False)

    @property
    def snapshot_id(self) -> str:
        return self.content_hash[:16]

    @staticmethod
    def make(target_id: str, scope: str | None, state: Any) -> "StateSnapshot":
        digest = hashlib.sha256(
            json.dumps({"target": target_id, "scope": scope, "state": state}, sort_keys=True).encode()
        ).hexdigest()
        return StateSnapshot(target_id, scope, copy.deepcopy(state), digest)

    def to_dict(self) -> dict[str, Any]:
        return {"target_id": self.target_id, "scope": self.scope, "state": self.state, "content_hash": self.content_hash}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StateSnapshot":
        return cls(d["target_id"], d.get("scope"), d.get("state"), d.get("content_hash", ""))


def line_key(params: Mapping[str, str]) -> str:
    return f"{params.get('line_id', '')}:{params.get('service_code', '')}"


class SimulatedPlatform:
    """Base resource adapter: translation, idempotent execution, state dumps.

    Subclasses describe which verbs each item maps to (``item_verbs``) and
    how each verb mutates a customer's partition (``apply_<verb>``).
    """

    supported_verbs: frozenset[Verb] = frozenset()
    manual_verbs: frozenset[Verb] = frozenset()

    def __init__(
        self,
        target_id: str,
        *,
        seed: int = 0,
        state: Mapping[str, Any] | None = None,
        faults: FaultPlan | None = None,
        path: str | Path | None = None,
    ):
        self.target_id = target_id
        self.seed = seed
        self.faults = faults or FaultPlan()
        self.path = Path(path) if path else None
        self.state: dict[str, Any] = {"customers": {}}
        self.idempotency: dict[str, Outcome] = {}
        self.effects: Counter[str] = Counter()
        self._lock = threading.RLock()
        if state is not None:
            self.state = _prune({"customers": {}, **copy.deepcopy(dict(state))}) or {}
        if self.path and self.path.exists():
            self._load()
        self.state.setdefault("customers", {})

    # -- translation --------------------------------------------------------

    def item_verbs(self, service_code: str) -> list[Verb]:
        raise NotImplementedError

    def translate(self, suborder: SubOrder, bindings: Mapping[str, str] | None = None) -> list[Action]:
        if suborder.target_id != self.target_id:
            raise UnsupportedItem(f"{suborder.suborder_id} targets {suborder.target_id}, not {self.target_id}")
        bindings = dict(bindings or {})
        actions = []
        for item in suborder.items:
            verbs = self.item_verbs(item.service_code)
            if not verbs or any(v not in self.supported_verbs for v in verbs):
                raise UnsupportedItem(f"{self.target_id} cannot fulfil {item.service_code}")
            for verb in verbs:
                params = {"customer_id": suborder.customer_id, "service_code": item.service_code}
                if suborder.line_id is not None:
                    params["line_id"] = suborder.line_id
                params.update(item.params)
                params.update({k: bindings[k] for k in sorted(suborder.requires_data) if k in bindings})
                idx = len(actions)
                actions.append(Action(idx, verb, params, idempotency_key(suborder.order_id, suborder.suborder_id, idx)))
        return actions

    def task_instructions(self, suborder: SubOrder) -> str:
        services = ", ".join(i.service_code for i in suborder.items)
        return f"{self.target_id}: complete {services} for customer {suborder.customer_id}"

    # -- execution ------------------------------------------------------------

    def has_outcome(self, key: str) -> bool:
        with self._lock:
            return key in self.idempotency

    def execute_action(self, action: Action) -> Outcome:
        """Apply one action at most once per idempotency key."""
        with self._lock:
            if action.idempotency_key in self.idempotency:
                return self.idempotency[action.idempotency_key]
            if action.verb not in self.supported_verbs:
                return Outcome(False, kind="FATAL", code="UNSUPPORTED_VERB", message=action.verb.value)
            fault = self.faults.check(self.target_id, action.verb)
            if fault is not None:
                # injected faults are transient from the store's point of view: not recorded
                return Outcome(False, kind=fault.kind, code="INJECTED", message=str(fault))
            cid = action.params.get("customer_id", "")
            customers = self.state.setdefault("customers", {})
            before = copy.deepcopy(customers.get(cid))
            part = customers.setdefault(cid, {})
            try:
                data = getattr(self, "apply_" + action.verb.value.lower())(part, dict(action.params))
                outcome = Outcome(True, dict(data or {}))
            except PlatformError as exc:
                if before is None:
                    customers.pop(cid, None)
                else:
                    customers[cid] = before
                outcome = Outcome(False, kind="FATAL", code=exc.code, message=str(exc))
            self.state = _prune(self.state)
            self.state.setdefault("customers", {})
            self.idempotency[action.idempotency_key] = outcome
            if outcome.ok:
                self.effects[action.idempotency_key] += 1
            self._save()
            return outcome

    # -- state ----------------------------------------------------------------

    def dump(self) -> bytes:
        with self._lock:
            return canonical_json(_prune(self.state)).encode("utf-8")

    def snapshot(self, scope: str | None = None) -> StateSnapshot:
        with self._lock:
            if scope is None:
                return StateSnapshot.make(self.target_id, None, _prune(self.state))
            return StateSnapshot.make(self.target_id, scope, self.state.get("customers", {}).get(scope))

    def restore(self, snapshot: StateSnapshot) -> None:
        if snapshot.target_id != self.target_id:
            raise SnapshotMismatch(f"snapshot of {snapshot.target_id} cannot restore {self.target_id}")
        with self._lock:
            if snapshot.scope is None:
                self.state = copy.deepcopy(snapshot.state) or {}
            else:
                customers = self.state.setdefault("customers", {})
                if snapshot.state is None:
                    customers.pop(snapshot.scope, None)
                else:
                    customers[snapshot.scope] = copy.deepcopy(snapshot.state)
            self.state = _prune(self.state)
            self.state.setdefault("customers", {})
            self._save()

    def _ledger_path(self) -> Path:
        assert self.path is not None
        return self.path.with_name(self.path.stem + ".ledger.json")

    def _save(self) -> None:
        if not self.path:
            return
        _write_atomic(self.path, canonical_json(_prune(self.state)))
        ledger = {
            "idempotency": {k: vars(o) | {"data": dict(o.data)} for k, o in sorted(self.idempotency.items())},
            "effects": dict(sorted(self.effects.items())),
        }
        _write_atomic(self._ledger_path(), canonical_json(ledger))

    def _load(self) -> None:
        self.state = json.loads(self.path.read_text(encoding="utf-8"))
        ledger_path = self._ledger_path()
        if ledger_path.exists():
            ledger = json.loads(ledger_path.read_text(encoding="utf-8"))
            self.idempotency = {k: Outcome(**v) for k, v in ledger.get("idempotency", {}).items()}
            self.effects = Counter(ledger.get("effects", {}))

    def mac_for(self, params: Mapping[str, str]) -> str:
        digest = hashlib.sha256(
            f"{self.seed}:{self.target_id}:{params.get('customer_id')}:{line_key(params)}".encode()
        ).digest()[:6]
        octets = bytes([(digest[0] & 0xFC) | 0x02]) + digest[1:]
        return ":".join(f"{b:02X}" for b in octets)

    def ref(self, prefix: str, *parts: str) -> str:
        return prefix + "-" + hashlib.sha256(":".join((self.target_id,) + parts).encode()).hexdigest()[:10].upper()


def _create(bucket: dict, key: str, record: Any) -> None:
    if key in bucket:
        raise PlatformError("ALREADY_EXISTS", f"{key} already exists")
    bucket[key] = record


def _delete(bucket: dict, key: str) -> Any:
    if key not in bucket:
        raise PlatformError("NOT_FOUND", f"{key} does not exist")
    return bucket.pop(key)


_RESERVED = {"customer_id", "line_id", "service_code"}


class SubscriptionPlatform(SimulatedPlatform):
    """Broadband, voice, IPTV and similar service platforms."""

    supported_verbs = frozenset(
        {Verb.INSTALL_CPE, Verb.REMOVE_CPE, Verb.CREATE_SUBSCRIPTION, Verb.CANCEL_SUBSCRIPTION}
    )

    def item_verbs(self, service_code: str) -> list[Verb]:
        return [Verb.INSTALL_CPE] if service_code.upper().startswith("CPE") else [Verb.CREATE_SUBSCRIPTION]

    def apply_install_cpe(self, part: dict, params: dict) -> dict:
        mac = self.mac_for(params)
        _create(part.setdefault("cpe", {}), line_key(params), {"mac": mac, "model": params.get("cpe_model", "")})
        return {"cpe.mac": mac}

    def apply_remove_cpe(self, part: dict, params: dict) -> dict:
        _delete(part.setdefault("cpe", {}), line_key(params))
        return {}

    def apply_create_subscription(self, part: dict, params: dict) -> dict:
        attrs = {k: v for k, v in sorted(params.items()) if k not in _RESERVED}
        _create(part.setdefault("subscriptions", {}), line_key(params), {"service": params["service_code"], "attributes": attrs})
        return {f"{self.target_id}.subscription_ref": self.ref("SUB", params["customer_id"], line_key(params))}

    def apply_cancel_subscription(self, part: dict, params: dict) -> dict:
        _delete(part.setdefault("subscriptions", {}), line_key(params))
        return {}


class CrmPlatform(SimulatedPlatform):
    supported_verbs = frozenset({Verb.COMMIT_ADDRESS})

    def item_verbs(self, service_code: str) -> list[Verb]:
        return [Verb.COMMIT_ADDRESS]

    def apply_commit_address(self, part: dict, params: dict) -> dict:
        address = params.get("install_address", "")
        if not address:
            raise PlatformError("NO_ADDRESS", "install_address missing")
        part["address"] = address
        return {"crm.address_ref": self.ref("ADDR", params["customer_id"], address)}


class BillingPlatform(SimulatedPlatform):
    supported_verbs = frozenset({Verb.PROVISION_BILLING, Verb.DEPROVISION_BILLING})

    def item_verbs(self, service_code: str) -> list[Verb]:
        return [Verb.PROVISION_BILLING]

    def apply_provision_billing(self, part: dict, params: dict) -> dict:
        record = {"service": params["service_code"], "product": params.get("product_code", ""), "qty": params.get("qty", "1")}
        _create(part.setdefault("billing_items", {}), line_key(params), record)
        return {"billing.account_ref": self.ref("ACC", params["customer_id"])}

    def apply_deprovision_billing(self, part: dict, params: dict) -> dict:
        _delete(part.setdefault("billing_items", {}), line_key(params))
        return {}


class WorkforcePlatform(SimulatedPlatform):
    """Field visits: scheduling is automatic, completion needs a technician."""

    supported_verbs = frozenset({Verb.SCHEDULE_VISIT, Verb.CANCEL_VISIT, Verb.COMPLETE_TASK})
    manual_verbs = frozenset({Verb.COMPLETE_TASK})

    def item_verbs(self, service_code: str) -> list[Verb]:
        return [Verb.SCHEDULE_VISIT, Verb.COMPLETE_TASK]

    def task_instructions(self, suborder: SubOrder) -> str:
        return f"visit premises of customer {suborder.customer_id} ({', '.join(i.service_code for i in suborder.items)})"

    def apply_schedule_visit(self, part: dict, params: dict) -> dict:
        slot = "SLOT-" + self.ref("V", params["customer_id"], line_key(params))[-4:]
        record = {"status": "SCHEDULED", "slot": slot, "address_ref": params.get("crm.address_ref", "")}
        _create(part.setdefault("visits", {}), line_key(params), record)
        return {"visit.slot": slot}

    def apply_cancel_visit(self, part: dict, params: dict) -> dict:
        _delete(part.setdefault("visits", {}), line_key(params))
        return {}

    def apply_complete_task(self, part: dict, params: dict) -> dict:
        visits = part.setdefault("visits", {})
        key = line_key(params)
        if key not in visits:
            raise PlatformError("NOT_FOUND", f"no visit {key}")
        outputs = {k[len("task."):]: v for k, v in params.items() if k.startswith("task.")}
        visits[key] = {**visits[key], "status": "DONE", "outputs": outputs}
        return outputs


class TaskPlatform(SimulatedPlatform):
    """Target for pure human-task sub-orders; records what the human reported."""

    supported_verbs = frozenset({Verb.COMPLETE_TASK})
    manual_verbs = frozenset({Verb.COMPLETE_TASK})

    def item_verbs(self, service_code: str) -> list[Verb]:
        return [Verb.COMPLETE_TASK]

    def apply_complete_task(self, part: dict, params: dict) -> dict:
        outputs = {k[len("task."):]: v for k, v in params.items() if k.startswith("task.")}
        _create(part.setdefault("tasks", {}), line_key(params), outputs)
        return outputs


# -- B2B partner ---------------------------------------------------------------


class PartnerEndpoint:
    """The partner's side of the gateway. Only enveloped traffic is accepted."""

    def __init__(self, partner_id: str, platform: SimulatedPlatform):
        self.partner_id = partner_id
        self.platform = platform

    def handle(self, data: bytes) -> bytes:
        envelope = B2BEnvelope.from_bytes(data)
        if envelope.partner_id != self.partner_id:
            raise BadEnvelope(f"envelope addressed to {envelope.partner_id}")
        request = json.loads(envelope.body)
        op = request["op"]
        if op == "action":
            out = self.platform.execute_action(Action.from_dict(request["action"]))
            reply: dict[str, Any] = {"outcome": vars(out) | {"data": dict(out.data)}}
        elif op == "snapshot":
            reply = {"snapshot": self.platform.snapshot(request.get("scope")).to_dict()}
        elif op == "restore":
            self.platform.restore(StateSnapshot.from_dict(request["snapshot"]))
            reply = {}
        elif op == "dump":
            reply = {"dump": self.platform.dump().decode("utf-8")}
        else:
            raise BadEnvelope(f"unknown operation {op!r}")
        return b2b_wrap(self.partner_id, json.dumps(reply, sort_keys=True), message_id=envelope.message_id + "-r").to_bytes()


class B2BGatewayAdapter:
    """Adapter for a partner platform reached only through B2B envelopes."""

    def __init__(self, target_id: str, endpoint: PartnerEndpoint, translator: SimulatedPlatform | None = None):
        self.target_id = target_id
        self.endpoint = endpoint
        self.partner_id = endpoint.partner_id
        self._translator = translator or endpoint.platform
        self.supported_verbs = self._translator.supported_verbs
        self.manual_verbs = self._translator.manual_verbs
        self.envelopes_sent = 0

    def _call(self, request: dict[str, Any]) -> dict[str, Any]:
        self.envelopes_sent += 1
        envelope = b2b_wrap(self.partner_id, json.dumps(request, sort_keys=True))
        reply = self.endpoint.handle(envelope.to_bytes())
        return json.loads(b2b_unwrap(reply))

    def translate(self, suborder: SubOrder, bindings: Mapping[str, str] | None = None) -> list[Action]:
        return self._translator.translate(suborder, bindings)

    def task_instructions(self, suborder: SubOrder) -> str:
        return self._translator.task_instructions(suborder)

    def has_outcome(self, key: str) -> bool:
        return self.endpoint.platform.has_outcome(key)

    def execute_action(self, action: Action) -> Outcome:
        return Outcome(**self._call({"op": "action", "action": action.to_dict()})["outcome"])

    def snapshot(self, scope: str | None = None) -> StateSnapshot:
        snap = StateSnapshot.from_dict(self._call({"op": "snapshot", "scope": scope})["snapshot"])
        if snap.target_id != self.target_id:
            snap = StateSnapshot.make(self.target_id, snap.scope, snap.state)
        return snap

    def restore(self, snapshot: StateSnapshot) -> None:
        if snapshot.target_id != self.target_id:
            raise SnapshotMismatch(f"snapshot of {snapshot.target_id} cannot restore {self.target_id}")
        self._call({"op": "restore", "snapshot": StateSnapshot.make(self.endpoint.platform.target_id, snapshot.scope, snapshot.state).to_dict()})

    def dump(self) -> bytes:
        return self._call({"op": "dump"})["dump"].encode("utf-8")

    @property
    def effects(self) -> Counter[str]:
        return self.endpoint.platform.effects


# -- registry ------------------------------------------------------------------


class TargetRegistry:
    def __init__(self):
        self._adapters: dict[str, Any] = {}
        self._lock = threading.Lock()

    def register(self, adapter) -> "TargetRegistry":
        with self._lock:
            if adapter.target_id in self._adapters:
                raise DuplicateTarget(adapter.target_id)
            self._adapters[adapter.target_id] = adapter
        return self

    def get(self, target_id: str):
        try:
            return self._adapters[target_id]
        except KeyError:
            raise UnknownTarget(target_id) from None

    def __contains__(self, target_id: str) -> bool:
        return target_id in self._adapters

    def targets(self) -> list[str]:
        return sorted(self._adapters)

    def dumps(self) -> dict[str, bytes]:
        return {t: self._adapters[t].dump() for t in self.targets()}


def register_target(registry: TargetRegistry, adapter) -> TargetRegistry:
    return registry.register(adapter)


ADAPTER_TYPES = {
    "subscription": SubscriptionPlatform,
    "crm": CrmPlatform,
    "billing": BillingPlatform,
    "workforce": WorkforcePlatform,
    "tasks": TaskPlatform,
}

DEFAULT_ADAPTER_FOR = {
    "crm": "crm",
    "broadband": "subscription",
    "voice": "subscription",
    "iptv": "subscription",
    "billing": "billing",
    "workforce": "workforce",
    "tasks": "tasks",
    "partner-voice": "b2b",
}

KIND_DEFAULT_ADAPTER = {"SERVICE": "subscription", "BILLING": "billing", "WORK_ORDER": "workforce", "HUMAN_TASK": "tasks"}


def build_adapter(
    target_id: str,
    adapter_type: str,
    *,
    seed: int = 0,
    state: Mapping[str, Any] | None = None,
    faults: FaultPlan | None = None,
    path: str | Path | None = None,
    partner_id: str | None = None,
):
    if adapter_type == "b2b":
        inner = SubscriptionPlatform(target_id, seed=seed, state=state, faults=faults, path=path)
        return B2BGatewayAdapter(target_id, PartnerEndpoint(partner_id or f"PARTNER-{target_id}", inner))
    try:
        cls = ADAPTER_TYPES[adapter_type]
    except KeyError:
        raise UnknownTarget(f"unknown adapter type {adapter_type!r}") from None
    return cls(target_id, seed=seed, state=state, faults=faults, path=path)
