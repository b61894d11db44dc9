"""Exception hierarchy shared by every orderhub module."""

from __future__ import annotations


class OrderHubError(Exception):
    """Base class for all errors raised by orderhub."""


class ParseError(OrderHubError):
    """A document could not be parsed. Carries 1-based line/column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + where)


class MalformedDocument(ParseError):
    pass


class UnknownChannel(OrderHubError):
    pass


class InvalidOrder(OrderHubError):
    """Submission of an order that failed the structural gate."""


class UnknownProduct(OrderHubError):
    pass


class IllegalTransition(OrderHubError):
    pass


class StorageError(OrderHubError):
    pass


class CorruptJournal(StorageError):
    pass


class NotFound(OrderHubError):
    pass


class DuplicateOrder(OrderHubError):
    pass


class BusUnavailable(OrderHubError):
    pass


class UnknownQueue(OrderHubError):
    pass


class Empty(OrderHubError):
    pass


class NotInFlight(OrderHubError):
    pass


class RequestTimeout(OrderHubError):
    pass


class PlanError(OrderHubError):
    pass


class CyclicDependency(PlanError):
    def __init__(self, cycle: list[str]):
        self.cycle = list(cycle)
        super().__init__("dependency cycle: " + " -> ".join(self.cycle))


class UnsatisfiableData(PlanError):
    def __init__(self, suborder_id: str, key: str):
        self.suborder_id = suborder_id
        self.key = key
        super().__init__(f"{suborder_id} requires {key!r} but nothing provides it")


class BillingOrderViolation(PlanError):
    pass


class BindingConflict(PlanError):
    pass


class UnknownSubOrder(PlanError):
    pass


class StaleResult(PlanError):
    """A result arrived for a node that is not waiting for one."""


class DuplicateTarget(OrderHubError):
    pass


class UnknownTarget(OrderHubError):
    pass


class UnsupportedItem(OrderHubError):
    pass


class SnapshotMismatch(OrderHubError):
    pass


class BadEnvelope(OrderHubError):
    pass


class UnknownTask(OrderHubError):
    pass


class MissingOutputKeys(OrderHubError):
    pass


class AlreadyDone(OrderHubError):
    pass


class NoInverse(OrderHubError):
    pass


class DuplicateEntry(OrderHubError):
    pass


class ScenarioParseError(ParseError):
    pass


class ExpectationFailure(OrderHubError):
    pass
