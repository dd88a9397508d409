"""Naive vs. blocked precomputation timing."""

from __future__ import annotations

import csv
import io
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    BudgetedExecutor,
    BudgetModel,
    DecompositionPlan,
    block_feature_aggregation,
    block_normalize,
    solve_agg_blocks,
    solve_norm_blocks,
)
from .graph import Graph

EQUAL_TOL = 1e-8


class BenchMismatch(AssertionError):
    pass


@dataclass
class BenchRecord:
    task: str
    mode: str
    plan: str
    median_ms: float
    peak_estimated: float
    peak_actual: int
    vol_gpu: float


@dataclass
class BenchReport:
    records: list = field(default_factory=list)
    max_abs_diff: float = 0.0
    environment: str = ""

    FIELDS = ("task", "mode", "plan", "median_ms", "peak_estimated", "peak_actual", "vol_gpu")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        for r in self.records:
            w.writerow([getattr(r, k) for k in self.FIELDS])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"# {self.environment}", f"max_abs_diff = {self.max_abs_diff:.3e}"]
        for r in self.records:
            lines.append(f"{r.task:<10} {r.mode:<8} plan={r.plan:<12} median_ms={r.median_ms:10.3f} "
                         f"peak_est={r.peak_estimated:.0f} peak_actual={r.peak_actual} budget={r.vol_gpu:.0f}")
        return "\n".join(lines) + "\n"


def _timed(fn, repeats):
    times, out = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return out, statistics.median(times)


def run_bench(g: Graph, x: np.ndarray, K: int, bm: BudgetModel, repeats: int = 3,
              plan: DecompositionPlan | None = None) -> BenchReport:
    """Time naive (single block, unbounded) and planned blocked precomputation.

    Outputs are compared before any timing is reported; a mismatch raises
    :class:`BenchMismatch`.  ``plan`` overrides the solver plan.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if plan is None:
        b, c = solve_agg_blocks(bm)
        plan = DecompositionPlan(solve_norm_blocks(bm), b, c)
    report = BenchReport(environment=f"python {platform.python_version()} numpy {np.__version__} "
                                     f"{platform.machine()}")

    naive = BudgetedExecutor(None)
    s_naive, t_norm_naive = _timed(lambda: block_normalize(g, 1, naive), repeats)
    f_naive, t_agg_naive = _timed(lambda: block_feature_aggregation(s_naive, x, K, 1, 1, naive), repeats)

    norm_exec = BudgetedExecutor(bm)
    s_block, t_norm_block = _timed(lambda: block_normalize(g, plan.a, norm_exec), repeats)
    agg_exec = BudgetedExecutor(bm)
    f_block, t_agg_block = _timed(
        lambda: block_feature_aggregation(s_block, x, K, plan.b, plan.c, agg_exec), repeats)

    if not (np.array_equal(s_naive.row, s_block.row) and np.array_equal(s_naive.col, s_block.col)):
        raise BenchMismatch("blocked normalization changed the sparsity structure")
    diff = float(np.max(np.abs(s_naive.val - s_block.val), initial=0.0))
    for k in f_naive.powers:
        diff = max(diff, float(np.max(np.abs(f_naive[k] - f_block[k]), initial=0.0)))
    if diff > EQUAL_TOL:
        raise BenchMismatch(f"blocked output differs from naive by {diff:.3e}")
    report.max_abs_diff = diff

    tag = f"({plan.a},{plan.b},{plan.c})"
    inf = float("inf")
    report.records = [
        BenchRecord("normalize", "naive", "(1,1,1)", t_norm_naive, naive.peak_estimated, 0, inf),
        BenchRecord("normalize", "blocked", tag, t_norm_block, norm_exec.peak_estimated,
                    norm_exec.peak_actual, bm.vol_gpu),
        BenchRecord("aggregate", "naive", "(1,1,1)", t_agg_naive, naive.peak_estimated, 0, inf),
        BenchRecord("aggregate", "blocked", tag, t_agg_block, agg_exec.peak_estimated,
                    agg_exec.peak_actual, bm.vol_gpu),
    ]
    # the naive executor logged both tasks; split its actual peaks per task
    norm_actual = max((r.actual for r in naive.log if r.op == "normalize"), default=0)
    agg_actual = max((r.actual for r in naive.log if r.op == "aggregate"), default=0)
    report.records[0].peak_actual = norm_actual
    report.records[2].peak_actual = agg_actual
    return report
