"""Static refinement checker for distributed tensor computation graphs."""

from .dims import DimExpr, parse_dim
from .expr import (Apply, CleanOpSet, Expr, Relation, ScalarRef, TensorRef, app, is_clean,
                   is_complete, parse_sexpr, ref, simplicity, substitute, to_sexpr)
from .graph import ComputationGraph, OpNode, TensorDecl, check_acyclic_and_sort, infer_shapes, parse_graph
from .symbolic import ConstraintStore, Tristate, decide_cmp, emit_smtlib

__version__ = "0.1.0"
