"""LC transformation and block-wise precomputation for precomputation-based GNNs."""

from .blocks import (
    BudgetedExecutor,
    BudgetExceeded,
    BudgetModel,
    DecompositionPlan,
    Infeasible,
    PrecomputedFeatures,
    block_feature_aggregation,
    block_normalize,
    solve_agg_blocks,
    solve_norm_blocks,
)
from .formula import ModelSpec, build_formula, count_redexes, render_formula
from .graph import Graph, SparseMatrix, gen_synthetic, normalized_adjacency
from .rewrite import PlanSpec, apply_f_lc, lc_transform, validate_lc

__version__ = "0.1.0"
