"""Deterministic order orchestration: capture, manage and fulfil multi-platform orders."""

from .catalog import Catalog, load_catalog, load_catalog_file, validate_catalog
from .compensation import StrategyConfig, UndoStrategy
from .engine import Engine, EngineOptions
from .model import CanonicalOrder, OrderState, SubOrder
from .scenario import load_scenario, run_scenario

__all__ = [
    "Catalog",
    "CanonicalOrder",
    "Engine",
    "EngineOptions",
    "OrderState",
    "StrategyConfig",
    "SubOrder",
    "UndoStrategy",
    "load_catalog",
    "load_catalog_file",
    "load_scenario",
    "run_scenario",
    "validate_catalog",
]
