"""Fixture generation: toy models, parallelization strategies and bug injections."""

from .builder import GraphBuilder
from .custom import register_custom, register_custom_ops
from .fixtures import (BUGS, FAMILIES, KINDS, BugSpec, CatalogEntry, Expectation, ModelSpec,
                       SpecError, StrategySpec, generate, get_fixture, list_fixtures, running_example,
                       read_fixture, write_fixture)

__all__ = [
    "BUGS", "FAMILIES", "KINDS", "BugSpec", "CatalogEntry", "Expectation", "GraphBuilder", "ModelSpec",
    "SpecError", "StrategySpec", "generate", "get_fixture", "list_fixtures", "running_example",
    "read_fixture", "register_custom", "register_custom_ops", "write_fixture",
]
