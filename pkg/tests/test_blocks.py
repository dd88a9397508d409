import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcgnn.blocks import (
    BudgetedExecutor,
    BudgetExceeded,
    BudgetModel,
    CalibrationUnstable,
    DecompositionPlan,
    Infeasible,
    LCPFError,
    MissingPower,
    block_feature_aggregation,
    block_normalize,
    budget_from_graph,
    calibrate_budget,
    fits,
    column_blocks,
    plan_report,
    precompute,
    read_lcpf,
    solve_agg_blocks,
    solve_norm_blocks,
    split_edges,
    write_lcpf,
)
from lcgnn.graph import Graph, SparseMatrix, normalized_adjacency
from lcgnn.oracle import matrix_power_aggregate

from conftest import random_graph

TRIANGLE = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
PATH2 = Graph.from_edges(2, [(0, 1)])
S_HALF = SparseMatrix(2, 2, np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]), np.full(4, 0.5))
X13 = np.array([[1.0], [3.0]])


def bm_of(alpha=(1, 1, 1), beta=(1, 1), vols=(10, 10, 1, 16), gpu=6):
    return BudgetModel(*alpha, *beta, *vols, gpu)


# ---------------------------------------------------------------- brute-force oracles (exact arithmetic)


def _q(v):
    return Fraction(v)


def brute_norm(bm, limit=4096):
    for a in range(1, limit + 1):
        lhs = (_q(bm.alpha_A) * _q(bm.vol_A) + _q(bm.alpha_S) * _q(bm.vol_S)) / a + _q(bm.alpha_D) * _q(bm.vol_D)
        if lhs <= _q(bm.vol_gpu):
            return a
    return None


def brute_agg(bm, limit):
    best = None
    p = _q(bm.beta_S) * _q(bm.vol_S)
    q = _q(bm.beta_X) * _q(bm.vol_X)
    g = _q(bm.vol_gpu)
    for b in range(1, limit + 1):
        for c in range(1, limit + 1):
            if p / b + q / c <= g and (best is None or b * c < best[0] * best[1]):
                best = (b, c)
    return best


# ---------------------------------------------------------------- split_edges


def test_split_examples():
    edges = [(i, i + 1) for i in range(10)]
    assert split_edges(edges, 3).sizes == [4, 3, 3]
    one = split_edges(edges, 1)
    np.testing.assert_array_equal(one.blocks[0], np.array(edges))
    assert split_edges(edges[:6], 6).sizes == [1] * 6
    assert split_edges(edges[:2], 4).sizes == [1, 1, 0, 0]


@settings(max_examples=100, deadline=None)
@given(pairs=st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50)), unique=True, max_size=80),
       m=st.integers(1, 20))
def test_split_partition_laws(pairs, m):
    blocks = split_edges(pairs, m)
    sizes = blocks.sizes
    assert len(sizes) == m
    assert max(sizes) - min(sizes) <= 1
    assert sum(sizes) == len(pairs)
    seen = [tuple(e) for b in blocks.blocks for e in b]
    assert len(seen) == len(set(seen))
    assert set(seen) == set(pairs)


def test_column_blocks_use_ceiling_width():
    assert column_blocks(10, 4) == [(0, 3), (3, 6), (6, 9), (9, 10)]
    assert column_blocks(5, 7) == [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 5), (5, 5)]


# ---------------------------------------------------------------- normalization


@pytest.mark.parametrize("g, a, expected", [
    (TRIANGLE, 1, np.full((3, 3), 1 / 3)),
    (TRIANGLE, 3, np.full((3, 3), 1 / 3)),
    (PATH2, 2, np.full((2, 2), 0.5)),
])
def test_block_normalize_examples(g, a, expected):
    s = block_normalize(g, a, BudgetedExecutor())
    naive = normalized_adjacency(g)
    np.testing.assert_array_equal(s.row, naive.row)
    np.testing.assert_array_equal(s.col, naive.col)
    np.testing.assert_allclose(s.to_dense(), expected, rtol=1e-15)
    np.testing.assert_allclose(s.val, naive.val, atol=1e-12, rtol=0)


def test_triangle_singleton_blocks():
    ex = BudgetedExecutor()
    block_normalize(TRIANGLE, 9, ex)
    assert len(ex.log) == 9  # nine triplets of A + I, one per block


# ---------------------------------------------------------------- solvers


def test_norm_solver_derived_instance():
    bm = bm_of()
    assert solve_norm_blocks(bm) == 4 == brute_norm(bm)
    assert bm.norm_block_volume(4) <= 6 < bm.norm_block_volume(3)


def test_norm_solver_fits_at_one():
    assert solve_norm_blocks(bm_of(vols=(1, 1, 1, 1), gpu=100)) == 1


def test_norm_solver_tight_budget():
    bm = bm_of(vols=(1e6, 1e6, 1, 1), gpu=1 + 1e-3)
    a = solve_norm_blocks(bm)
    assert a > 1000
    # exact answer is 2e9; the shared comparison tolerates a relative 1e-12 of rounding
    assert abs(a - 2_000_000_000) <= 2
    assert fits(bm.norm_block_volume(a), bm.vol_gpu)
    assert not fits(bm.norm_block_volume(a - 1), bm.vol_gpu)


def test_norm_solver_infeasible():
    with pytest.raises(Infeasible):
        solve_norm_blocks(bm_of(vols=(1, 1, 10, 1), gpu=5))


def test_agg_solver_derived_instances():
    bm = bm_of()
    assert solve_agg_blocks(bm) == (3, 6) == brute_agg(bm, 32)
    sym = bm_of(vols=(1, 8, 1, 8), gpu=8)
    assert solve_agg_blocks(sym) == (2, 2) == brute_agg(sym, 32)
    small = bm_of(vols=(1, 2, 1, 3), gpu=6)
    assert solve_agg_blocks(small) == (1, 1)


def random_budget(rng):
    vols = rng.uniform(1, 100, 4)
    coef = rng.uniform(0.5, 3, 5)
    gpu = coef[2] * vols[2] + rng.uniform(5, 150)
    return BudgetModel(*coef, *vols, gpu)


@pytest.mark.parametrize("seed", range(50))
def test_solvers_match_brute_force(seed):
    bm = random_budget(np.random.default_rng(seed))
    a = solve_norm_blocks(bm)
    assert a == brute_norm(bm)
    b, c = solve_agg_blocks(bm)
    limit = math.ceil(2 * max(bm.beta_S * bm.vol_S, bm.beta_X * bm.vol_X) / bm.vol_gpu) * 4 + 8
    ref = brute_agg(bm, limit)
    assert b * c == ref[0] * ref[1]
    assert (b, c) == ref  # same tie-breaking: smaller b first


# ---------------------------------------------------------------- aggregation


def test_aggregation_examples():
    for b in (1, 2):
        out = block_feature_aggregation(S_HALF, X13, 1, b, 1, BudgetedExecutor())
        np.testing.assert_allclose(out[1], [[2.0], [2.0]])
    out = block_feature_aggregation(S_HALF, X13, 2, 1, 1, BudgetedExecutor())
    np.testing.assert_allclose(out[2], [[2.0], [2.0]])
    np.testing.assert_array_equal(out[0], X13)


def test_aggregation_powers_filter_and_missing():
    out = block_feature_aggregation(S_HALF, X13, 3, 1, 1, BudgetedExecutor(), powers=(2,))
    assert out.powers == (2,)
    with pytest.raises(MissingPower, match="S\\^1"):
        out[1]


@pytest.mark.parametrize("n", [10, 60])
def test_block_count_independence(n, rng):
    g = random_graph(n, 0.2, rng)
    x = rng.standard_normal((n, 5))
    s_dense = normalized_adjacency(g).to_dense()
    for a, b, c in [(1, 1, 1), (2, 3, 2), (7, 7, 7), (3, 1, 7)]:
        s = block_normalize(g, a, BudgetedExecutor())
        np.testing.assert_allclose(s.to_dense(), s_dense, atol=1e-12, rtol=0)
        out = block_feature_aggregation(s, x, 3, b, c, BudgetedExecutor())
        for k in range(4):
            np.testing.assert_allclose(out[k], matrix_power_aggregate(s_dense, x, k), atol=1e-8, rtol=0)


def test_aggregation_is_bit_reproducible(rng):
    g = random_graph(40, 0.2, rng)
    s = normalized_adjacency(g)
    x = rng.standard_normal((40, 6))
    a = block_feature_aggregation(s, x, 2, 3, 2, BudgetedExecutor())
    b = block_feature_aggregation(s, x, 2, 3, 2, BudgetedExecutor())
    assert a[2].tobytes() == b[2].tobytes()


# ---------------------------------------------------------------- budget enforcement


def test_executor_enforces_derived_instance():
    bm = bm_of()
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)])  # 10 triplets in A + I
    a = solve_norm_blocks(bm)
    block_normalize(g, a, BudgetedExecutor(bm))
    with pytest.raises(BudgetExceeded):
        block_normalize(g, a - 1, BudgetedExecutor(bm))
    b, c = solve_agg_blocks(bm)
    s = normalized_adjacency(g)
    x = np.ones((4, 6))
    block_feature_aggregation(s, x, 1, b, c, BudgetedExecutor(bm))
    with pytest.raises(BudgetExceeded):
        block_feature_aggregation(s, x, 1, b, c - 1, BudgetedExecutor(bm))


def test_solver_plans_never_exceed_budget(rng):
    for trial in range(20):
        g = random_graph(80, 0.1, rng)
        x = rng.standard_normal((80, 12))
        base = budget_from_graph(g, 12, vol_gpu=1.0)
        need = base.alpha_D * base.vol_D
        gpu = need + rng.uniform(0.05, 2.0) * (base.vol_A + base.vol_S + base.vol_X)
        bm = budget_from_graph(g, 12, vol_gpu=gpu)
        b, c = solve_agg_blocks(bm)
        plan = DecompositionPlan(solve_norm_blocks(bm), b, c)
        ex = BudgetedExecutor(bm)
        precompute(g, x, 2, plan, ex)
        assert ex.peak_estimated <= bm.vol_gpu * (1 + 1e-12)


def test_plan_report_lists_slack():
    bm = bm_of()
    text = plan_report(bm, DecompositionPlan(4, 3, 6))
    assert "a = 4" in text and "normalize_slack = 0.0" in text


# ---------------------------------------------------------------- calibration


class LinearDouble:
    """Executor stand-in whose memory use is an exact linear function of the volumes."""

    def __init__(self, slope, intercept=0.0):
        self.slope, self.intercept = slope, intercept

    def probe_normalize(self, n, triplets, seed=0):
        va = vs = triplets * 16
        vd = n * 8
        return self.intercept + self.slope * (va + vs + vd), va, vs, vd

    def probe_aggregate(self, n, nnz, width, seed=0):
        vs, vx = nnz * 16, n * width * 8
        return self.intercept + self.slope * (vs + vx), vs, vx


def test_calibration_recovers_slope():
    cal = calibrate_budget(LinearDouble(2.0, 512.0), [100, 200, 400, 800, 1600])
    for v in (cal.alpha_A, cal.alpha_S, cal.alpha_D, cal.beta_S, cal.beta_X):
        assert v == pytest.approx(2.0, rel=0.01)


def test_calibration_unit_double():
    cal = calibrate_budget(LinearDouble(1.0), [10, 20, 40, 80])
    for v in (cal.alpha_A, cal.alpha_D, cal.beta_S, cal.beta_X):
        assert v == pytest.approx(1.0, rel=1e-6)
    assert abs(cal.norm_intercept) < 1e-6 * 80 * 16


def test_calibration_single_probe_is_unstable():
    with pytest.raises(CalibrationUnstable):
        calibrate_budget(LinearDouble(2.0), [100])


def test_calibration_noisy_executor_is_unstable():
    class Noisy(LinearDouble):
        def probe_normalize(self, n, triplets, seed=0):
            peak, *v = super().probe_normalize(n, triplets, seed)
            return peak * (1 + (seed % 2) * 3), *v

    with pytest.raises(CalibrationUnstable):
        calibrate_budget(Noisy(1.0), [100, 200, 400, 800, 1600], max_rel_residual=0.01)


def test_calibration_real_executor_runs():
    cal = calibrate_budget(BudgetedExecutor(), [2000, 4000, 8000, 16000, 32000], max_rel_residual=0.25)
    assert cal.alpha_A > 0 and cal.beta_X > 0


# ---------------------------------------------------------------- LCPF


def test_lcpf_round_trip(tmp_path, rng):
    g = random_graph(30, 0.2, rng)
    x = rng.standard_normal((30, 4))
    feats = precompute(g, x, 2, DecompositionPlan(2, 2, 3), BudgetedExecutor(), powers=(0, 2),
                       dataset_hash="abc")
    write_lcpf(tmp_path / "f.lcpf", feats)
    raw = (tmp_path / "f.lcpf").read_bytes()
    assert raw[:4] == b"LCPF"
    back = read_lcpf(tmp_path / "f.lcpf")
    assert back.powers == (0, 2) and back.dataset_hash == "abc"
    assert back.plan == DecompositionPlan(2, 2, 3)
    np.testing.assert_array_equal(back[2], feats[2])
    (tmp_path / "bad.lcpf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(LCPFError):
        read_lcpf(tmp_path / "bad.lcpf")
    (tmp_path / "short.lcpf").write_bytes(raw[:-8])
    with pytest.raises(LCPFError):
        read_lcpf(tmp_path / "short.lcpf")
