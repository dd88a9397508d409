"""Memory-budgeted block-wise precomputation.

The edge list of the (normalized) adjacency matrix is cut into contiguous,
size-balanced chunks; features are cut column-wise.  Every block operation
goes through a :class:`BudgetedExecutor`, which stands in for the
accelerator: it runs the kernel on the host but refuses any block whose
estimated footprint exceeds the device budget.
"""

from __future__ import annotations

import math
import struct
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Graph, SparseMatrix, add_self_loops, degree_vector, normalize_values

TRIPLET_BYTES = 16  # int32 row + int32 col + float64 value
ELEM_BYTES = 8
_REL_EPS = 1e-12


class BudgetExceeded(RuntimeError):
    pass


class Infeasible(ValueError):
    pass


class CalibrationUnstable(RuntimeError):
    pass


def fits(volume: float, capacity: float) -> bool:
    """Budget comparison shared by solvers and executor (tolerates float rounding)."""
    return volume <= capacity * (1.0 + _REL_EPS)


@dataclass(frozen=True)
class BudgetModel:
    alpha_A: float
    alpha_S: float
    alpha_D: float
    beta_S: float
    beta_X: float
    vol_A: float
    vol_S: float
    vol_D: float
    vol_X: float
    vol_gpu: float

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"BudgetModel.{name} must be positive and finite, got {value}")

    @property
    def feasible(self) -> bool:
        return self.alpha_D * self.vol_D < self.vol_gpu

    def norm_block_volume(self, a: int) -> float:
        return (self.alpha_A * self.vol_A + self.alpha_S * self.vol_S) / a + self.alpha_D * self.vol_D

    def agg_block_volume(self, b: int, c: int) -> float:
        return self.beta_S * self.vol_S / b + self.beta_X * self.vol_X / c


def budget_from_graph(g: Graph, feature_dim: int, vol_gpu: float, alpha_A=1.0, alpha_S=1.0,
                      alpha_D=1.0, beta_S=1.0, beta_X=1.0, triplet_bytes=TRIPLET_BYTES,
                      elem_bytes=ELEM_BYTES) -> BudgetModel:
    """Volumes in bytes for A~ / S (n + 2m triplets), D (n entries) and X (n x d)."""
    nnz = g.num_nodes + 2 * g.num_edges
    return BudgetModel(alpha_A, alpha_S, alpha_D, beta_S, beta_X,
                       vol_A=nnz * triplet_bytes, vol_S=nnz * triplet_bytes,
                       vol_D=g.num_nodes * elem_bytes,
                       vol_X=g.num_nodes * feature_dim * elem_bytes, vol_gpu=vol_gpu)


@dataclass(frozen=True)
class DecompositionPlan:
    a: int
    b: int
    c: int

    def __post_init__(self):
        if min(self.a, self.b, self.c) < 1:
            raise ValueError(f"block counts must be >= 1, got {self}")


# ---------------------------------------------------------------- solvers


def solve_norm_blocks(bm: BudgetModel) -> int:
    """Smallest a >= 1 with (aA*BA + aS*BS)/a + aD*BD <= B_GPU."""
    room = bm.vol_gpu - bm.alpha_D * bm.vol_D
    if room <= 0:
        raise Infeasible(f"degree matrix alone needs alpha_D*vol_D = {bm.alpha_D * bm.vol_D:g} "
                         f"bytes, budget is {bm.vol_gpu:g}")
    a = max(1, math.ceil((bm.alpha_A * bm.vol_A + bm.alpha_S * bm.vol_S) / room))
    # the closed form can be off by one under rounding; settle it with the shared test
    while a > 1 and fits(bm.norm_block_volume(a - 1), bm.vol_gpu):
        a -= 1
    while not fits(bm.norm_block_volume(a), bm.vol_gpu):
        a += 1
    return a


def _min_c(p: float, q: float, b: int):
    # smallest c with p/b + q/c <= 1 (p, q are volumes scaled by B_GPU), None if impossible
    rest = 1.0 - p / b
    if rest <= 0:
        return None
    c = max(1, math.ceil(q / rest))
    while c > 1 and fits(p / b + q / (c - 1), 1.0):
        c -= 1
    while not fits(p / b + q / c, 1.0):
        c += 1
    return c


def solve_agg_blocks(bm: BudgetModel) -> tuple[int, int]:
    """(b, c) minimizing b*c subject to bS*BS/b + bX*BX/c <= B_GPU.

    Exhaustive over b; for each b the least feasible c is found directly.
    The scan stops once the continuous lower bound q*b^2/(b-p) (increasing
    for b > 2p) can no longer beat the incumbent, so the result is the exact
    minimum.  Ties go to the smaller b.
    """
    p = bm.beta_S * bm.vol_S / bm.vol_gpu
    q = bm.beta_X * bm.vol_X / bm.vol_gpu
    best = None
    b = max(1, math.floor(p))  # b <= p leaves no room for X
    while True:
        c = _min_c(p, q, b)
        if c is not None and (best is None or b * c < best[0] * best[1]):
            best = (b, c)
        if best is not None:
            if b >= best[0] * best[1]:
                break
            if b > 2 * p and q * b * b / (b - p) * (1 - 1e-9) >= best[0] * best[1]:
                break
        b += 1
    return best


def plan_report(bm: BudgetModel, plan: DecompositionPlan) -> str:
    norm_vol = bm.norm_block_volume(plan.a)
    agg_vol = bm.agg_block_volume(plan.b, plan.c)
    lines = ["[budget]"]
    lines += [f"{k} = {v!r}" for k, v in bm.__dict__.items()]
    lines += ["", "[plan]", f"a = {plan.a}", f"b = {plan.b}", f"c = {plan.c}", "",
              "[slack]",
              f"normalize_block_volume = {norm_vol!r}",
              f"normalize_slack = {bm.vol_gpu - norm_vol!r}",
              f"aggregate_block_volume = {agg_vol!r}",
              f"aggregate_slack = {bm.vol_gpu - agg_vol!r}"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class EdgeBlockSet:
    blocks: list

    @property
    def sizes(self) -> list:
        return [len(b) for b in self.blocks]


def block_bounds(total: int, m: int) -> list:
    """Half-open ranges of m contiguous chunks; the first total % m get one extra."""
    if m < 1:
        raise ValueError("number of blocks must be >= 1")
    base, extra = divmod(total, m)
    out, start = [], 0
    for i in range(m):
        stop = start + base + (1 if i < extra else 0)
        out.append((start, stop))
        start = stop
    return out


def split_edges(edges, m: int) -> EdgeBlockSet:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = e[np.lexsort((e[:, 1], e[:, 0]))]
    return EdgeBlockSet([e[lo:hi] for lo, hi in block_bounds(len(e), m)])


# ---------------------------------------------------------------- executor


@dataclass
class BlockRecord:
    op: str
    estimated: float
    actual: int


@dataclass
class BudgetedExecutor:
    """Runs block kernels on the host while enforcing a device budget.

    With ``bm=None`` nothing is enforced (the naive path).  The charged
    estimate is the plan-level per-block share from the budget model; the
    bytes actually touched by each block are logged alongside it.
    """

    bm: BudgetModel | None = None
    triplet_bytes: int = TRIPLET_BYTES
    elem_bytes: int = ELEM_BYTES
    log: list = field(default_factory=list)

    def _charge(self, op: str, estimated: float, actual: int) -> None:
        if self.bm is not None and not fits(estimated, self.bm.vol_gpu):
            raise BudgetExceeded(f"{op} block needs {estimated:g} bytes, budget is {self.bm.vol_gpu:g}")
        self.log.append(BlockRecord(op, estimated, actual))

    @property
    def peak_estimated(self) -> float:
        return max((r.estimated for r in self.log), default=0.0)

    @property
    def peak_actual(self) -> int:
        return max((r.actual for r in self.log), default=0)

    def normalize_block(self, row, col, val, deg, a: int) -> np.ndarray:
        est = self.bm.norm_block_volume(a) if self.bm is not None else 0.0
        self._charge("normalize", est, 2 * len(val) * self.triplet_bytes + len(deg) * self.elem_bytes)
        return normalize_values(row, col, val, deg)

    def spmm_block(self, s_block: sp.csr_matrix, x_block: np.ndarray, b: int, c: int) -> np.ndarray:
        est = self.bm.agg_block_volume(b, c) if self.bm is not None else 0.0
        self._charge("aggregate", est,
                     s_block.nnz * self.triplet_bytes + x_block.size * self.elem_bytes)
        return np.asarray(s_block @ x_block)

    # calibration probes: run a real block op and report traced peak bytes

    def probe_normalize(self, num_nodes: int, num_triplets: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        tracemalloc.start()
        try:
            row = rng.integers(0, num_nodes, num_triplets).astype(np.int32)
            col = rng.integers(0, num_nodes, num_triplets).astype(np.int32)
            val = np.ones(num_triplets)
            deg = rng.integers(1, 10, num_nodes).astype(np.float64)
            out = normalize_values(row, col, val, deg)
            del out
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        vol_t = num_triplets * self.triplet_bytes
        return peak, vol_t, vol_t, num_nodes * self.elem_bytes

    def probe_aggregate(self, num_nodes: int, nnz: int, width: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        tracemalloc.start()
        try:
            row = rng.integers(0, num_nodes, nnz)
            col = rng.integers(0, num_nodes, nnz)
            s = sp.csr_matrix((np.ones(nnz), (row, col)), shape=(num_nodes, num_nodes))
            x = rng.standard_normal((num_nodes, width))
            out = s @ x
            del out
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        return peak, nnz * self.triplet_bytes, num_nodes * width * self.elem_bytes


# ---------------------------------------------------------------- block kernels


def block_normalize(g: Graph, a: int, exec: BudgetedExecutor) -> SparseMatrix:
    """S as the disjoint union of D^-1/2 A~^(l) D^-1/2 over ``a`` edge blocks."""
    if a < 1:
        raise ValueError("a must be >= 1")
    a_tilde = add_self_loops(g)
    deg = degree_vector(a_tilde)
    parts = []
    for lo, hi in block_bounds(a_tilde.nnz, a):
        parts.append(exec.normalize_block(a_tilde.row[lo:hi], a_tilde.col[lo:hi],
                                          a_tilde.val[lo:hi], deg, a))
    vals = np.concatenate(parts) if parts else np.zeros(0)
    return SparseMatrix(a_tilde.rows, a_tilde.cols, a_tilde.row, a_tilde.col, vals)


@dataclass
class PrecomputedFeatures:
    """Aggregated features S^k X keyed by power k (k = 0 is X itself)."""

    per_power: dict
    n: int
    d: int
    K: int
    dataset_hash: str = ""
    plan: DecompositionPlan | None = None

    @property
    def powers(self) -> tuple:
        return tuple(sorted(self.per_power))

    def __getitem__(self, k: int) -> np.ndarray:
        try:
            return self.per_power[k]
        except KeyError:
            raise MissingPower(k) from None

    def select(self, powers) -> "PrecomputedFeatures":
        return PrecomputedFeatures({k: self[k] for k in sorted(powers)}, self.n, self.d,
                                   self.K, self.dataset_hash, self.plan)


class MissingPower(KeyError):
    def __init__(self, power):
        super().__init__(power)
        self.power = power

    def __str__(self):
        return f"precomputed features lack S^{self.power}·X"


def column_blocks(d: int, c: int) -> list:
    """Column ranges of width ceil(d/c); trailing ranges may be short or empty."""
    w = math.ceil(d / c) if d else 0
    return [(min(i * w, d), min((i + 1) * w, d)) for i in range(c)]


def block_feature_aggregation(s: SparseMatrix, x: np.ndarray, K: int, b: int, c: int,
                              exec: BudgetedExecutor, powers=None) -> PrecomputedFeatures:
    """Block-wise S^k X for k = 1..K (plus k = 0).

    ``powers`` restricts which matrices are kept; all of 1..K are still
    computed since each power feeds the next.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if s.rows != n or s.cols != n:
        raise ValueError(f"S is {s.rows}x{s.cols} but X has {n} rows")
    if K < 1 or b < 1 or c < 1:
        raise ValueError("K, b, c must be >= 1")
    s_blocks = [sp.csr_matrix((s.val[lo:hi], (s.row[lo:hi], s.col[lo:hi])), shape=(n, n))
                for lo, hi in block_bounds(s.nnz, b)]
    cols = column_blocks(d, c)
    sx = {0: x}
    x_prev = x
    for k in range(1, K + 1):
        pieces = []
        for lo, hi in cols:
            if hi <= lo:
                continue
            x_i = np.ascontiguousarray(x_prev[:, lo:hi])
            x_tmp = np.zeros((n, hi - lo))
            for s_j in s_blocks:  # ascending j: fixed reduction order
                x_tmp += exec.spmm_block(s_j, x_i, b, c)
            pieces.append(x_tmp)
        x_conc = np.concatenate(pieces, axis=1) if pieces else np.zeros((n, 0))
        sx[k] = x_conc
        x_prev = x_conc
    keep = range(K + 1) if powers is None else powers
    return PrecomputedFeatures({k: sx[k] for k in sorted(keep)}, n, d, K)


def precompute(g: Graph, x: np.ndarray, K: int, plan: DecompositionPlan, exec: BudgetedExecutor,
               powers=None, dataset_hash: str = "") -> PrecomputedFeatures:
    s = block_normalize(g, plan.a, exec)
    feats = block_feature_aggregation(s, x, K, plan.b, plan.c, exec, powers)
    feats.dataset_hash = dataset_hash
    feats.plan = plan
    return feats


# ---------------------------------------------------------------- calibration


@dataclass
class Calibration:
    alpha_A: float
    alpha_S: float
    alpha_D: float
    beta_S: float
    beta_X: float
    norm_residual: float
    agg_residual: float
    norm_intercept: float
    agg_intercept: float


def _fit(design: np.ndarray, measured: np.ndarray, max_rel_residual: float, what: str):
    if len(measured) <= design.shape[1]:
        raise CalibrationUnstable(f"{what}: {len(measured)} probe(s) cannot determine "
                                  f"{design.shape[1]} coefficients")
    coef, *_ = np.linalg.lstsq(design, measured, rcond=None)
    resid = measured - design @ coef
    rel = float(np.sqrt(np.mean(resid ** 2)) / np.mean(measured))
    if rel > max_rel_residual:
        raise CalibrationUnstable(f"{what}: RMS residual is {rel:.3%} of the mean, "
                                  f"limit {max_rel_residual:.3%}")
    return coef, rel


def calibrate_budget(exec, probe_sizes, max_rel_residual: float = 0.05) -> Calibration:
    """Fit linear memory models to instrumented block operations.

    Normalization blocks are modelled as ``c0 + alpha_AS*(B_A + B_S) + alpha_D*B_D``;
    A~ and S blocks always hold the same triplets, so only their common
    coefficient is identifiable and is reported for both.  Aggregation blocks
    are modelled as ``c0 + beta_S*B_S + beta_X*B_X``.
    """
    sizes = [int(s) for s in probe_sizes]
    if any(s < 1 for s in sizes):
        raise ValueError("probe sizes must be positive")
    norm_rows, norm_y, agg_rows, agg_y = [], [], [], []
    for i, s in enumerate(sizes):
        # vary the triplets-per-node ratio and the width so the columns are independent
        peak, va, vs, vd = exec.probe_normalize(s, s * (2 + i % 5), seed=i)
        norm_rows.append([va + vs, vd, 1.0])
        norm_y.append(peak)
        peak, vs, vx = exec.probe_aggregate(s, s * (2 + i % 5), 1 + (i * 3) % 7, seed=i)
        agg_rows.append([vs, vx, 1.0])
        agg_y.append(peak)
    nc, nres = _fit(np.array(norm_rows, float), np.array(norm_y, float), max_rel_residual, "normalize")
    ac, ares = _fit(np.array(agg_rows, float), np.array(agg_y, float), max_rel_residual, "aggregate")
    return Calibration(alpha_A=float(nc[0]), alpha_S=float(nc[0]), alpha_D=float(nc[1]),
                       beta_S=float(ac[0]), beta_X=float(ac[1]),
                       norm_residual=nres, agg_residual=ares,
                       norm_intercept=float(nc[2]), agg_intercept=float(ac[2]))


# ---------------------------------------------------------------- LCPF files

LCPF_MAGIC = b"LCPF"
LCPF_VERSION = 1
_HEAD = struct.Struct("<4sIQQII")


class LCPFError(ValueError):
    pass


def lcpf_bytes(feats: PrecomputedFeatures) -> bytes:
    powers = feats.powers
    out = [_HEAD.pack(LCPF_MAGIC, LCPF_VERSION, feats.n, feats.d, feats.K, len(powers)),
           struct.pack(f"<{len(powers)}I", *powers)]
    for k in powers:
        m = feats.per_power[k]
        if m.shape != (feats.n, feats.d):
            raise LCPFError(f"S^{k}·X has shape {m.shape}, expected {(feats.n, feats.d)}")
        out.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
    return b"".join(out)


def write_lcpf(path, feats: PrecomputedFeatures) -> None:
    path = Path(path)
    path.write_bytes(lcpf_bytes(feats))
    plan = feats.plan
    lines = [f"dataset_hash = {feats.dataset_hash}",
             f"n = {feats.n}", f"d = {feats.d}", f"K = {feats.K}",
             "powers = " + ",".join(str(k) for k in feats.powers)]
    if plan is not None:
        lines += [f"a = {plan.a}", f"b = {plan.b}", f"c = {plan.c}"]
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_lcpf(path) -> PrecomputedFeatures:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEAD.size:
        raise LCPFError(f"{path}: truncated header")
    magic, version, n, d, K, count = _HEAD.unpack_from(raw)
    if magic != LCPF_MAGIC:
        raise LCPFError(f"{path}: bad magic {magic!r}")
    if version != LCPF_VERSION:
        raise LCPFError(f"{path}: unsupported version {version}")
    off = _HEAD.size
    powers = struct.unpack_from(f"<{count}I", raw, off)
    off += 4 * count
    if len(raw) != off + count * n * d * 8:
        raise LCPFError(f"{path}: payload size does not match header")
    per_power = {}
    for k in powers:
        per_power[k] = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d).copy()
        off += n * d * 8
    feats = PrecomputedFeatures(per_power, n, d, K)
    manifest = Path(str(path) + ".manifest")
    if manifest.exists():
        meta = dict(line.split(" = ", 1) for line in manifest.read_text(encoding="utf-8").splitlines()
                    if " = " in line)
        feats.dataset_hash = meta.get("dataset_hash", "")
        if {"a", "b", "c"} <= meta.keys():
            feats.plan = DecompositionPlan(int(meta["a"]), int(meta["b"]), int(meta["c"]))
    return feats
