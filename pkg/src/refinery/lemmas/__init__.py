"""Lemma library: rewrite rules used during saturation."""

from __future__ import annotations

import numpy as np

from .base import (DuplicateName, Lemma, LemmaSample, LemmaValidationError, Rule, apply_match,
                   get_lemma, instantiate, lemma, matches, register_lemma, registered_lemmas,
                   select, unregister_lemma, validate_lemma)
from .builtin import builtin_lemmas
from .pattern import load_lemma_file, pattern_lemma

_loaded = False


def load_builtin_lemmas() -> list[Lemma]:
    """Register (once) and return the builtin library; every lemma is self-validated."""
    global _loaded
    lib = builtin_lemmas()
    if not _loaded:
        rng = np.random.default_rng(2024)
        for lem in lib:
            validate_lemma(lem, rng)
            register_lemma(lem, validate=False)
        _loaded = True
    return [get_lemma(l.name) for l in lib]


__all__ = [
    "DuplicateName", "Lemma", "LemmaSample", "LemmaValidationError", "Rule", "apply_match",
    "builtin_lemmas", "get_lemma", "instantiate", "lemma", "load_builtin_lemmas", "load_lemma_file",
    "matches", "pattern_lemma", "register_lemma", "registered_lemmas", "select",
    "unregister_lemma", "validate_lemma",
]
