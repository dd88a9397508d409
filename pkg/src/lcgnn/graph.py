"""Sparse graph containers, adjacency normalization and file I/O.

Dense matrices are plain ``numpy.ndarray`` objects (row-major, float64 on the
precompute path).  Sparse matrices are kept in coordinate form with the
triplets sorted by ``(row, col)`` so that block decompositions and their
disjoint unions reproduce the same structure byte for byte.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph.

    ``edges`` is an ``(m, 2)`` int64 array with ``src < dst``, sorted
    lexicographically and free of duplicates.  Use :meth:`from_edges` to build
    one from arbitrary pairs.
    """

    num_nodes: int
    edges: np.ndarray

    def __post_init__(self):
        e = self.edges
        if e.ndim != 2 or e.shape[1] != 2:
            raise GraphError(f"edges must have shape (m, 2), got {e.shape}")
        if len(e):
            if e.min() < 0 or e.max() >= self.num_nodes:
                raise GraphError("node id out of range [0, n)")
            if np.any(e[:, 0] >= e[:, 1]):
                raise GraphError("edges must satisfy src < dst")
            key = e[:, 0] * self.num_nodes + e[:, 1]
            if np.any(np.diff(key) <= 0):
                raise GraphError("edges must be sorted and unique")
        e.setflags(write=False)

    @classmethod
    def from_edges(cls, num_nodes: int, pairs) -> "Graph":
        """Canonicalize arbitrary pairs: orient, drop self-loops, dedup, sort."""
        e = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if len(e) and (e.min() < 0 or e.max() >= num_nodes):
            raise GraphError("node id out of range [0, n)")
        e = np.sort(e, axis=1)
        e = e[e[:, 0] != e[:, 1]]
        e = np.unique(e, axis=0)
        return cls(int(num_nodes), np.ascontiguousarray(e))

    @property
    def num_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class SparseMatrix:
    """COO matrix with sorted, duplicate-free ``(row, col)`` triplets."""

    rows: int
    cols: int
    row: np.ndarray
    col: np.ndarray
    val: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not (len(self.row) == len(self.col) == len(self.val)):
            raise GraphError("triplet arrays differ in length")
        if len(self.row):
            if self.row.min() < 0 or self.row.max() >= self.rows:
                raise GraphError("row index out of range")
            if self.col.min() < 0 or self.col.max() >= self.cols:
                raise GraphError("column index out of range")
            key = self.row.astype(np.int64) * self.cols + self.col
            if np.any(np.diff(key) <= 0):
                raise GraphError("triplets must be sorted by (row, col) without duplicates")
        for a in (self.row, self.col, self.val):
            a.setflags(write=False)

    @property
    def nnz(self) -> int:
        return len(self.val)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=np.float64)
        out[self.row, self.col] = self.val
        return out

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.val, (self.row, self.col)), shape=(self.rows, self.cols))

    def max_asymmetry(self) -> float:
        if self.rows != self.cols:
            raise GraphError("matrix is not square")
        t = self.to_scipy()
        diff = abs(t - t.T)
        return float(diff.max()) if diff.nnz else 0.0


def self_loop_pairs(g: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Sorted (row, col) coordinates of A + I, both edge directions included."""
    n = g.num_nodes
    diag = np.arange(n, dtype=np.int64)
    r = np.concatenate([g.edges[:, 0], g.edges[:, 1], diag])
    c = np.concatenate([g.edges[:, 1], g.edges[:, 0], diag])
    order = np.lexsort((c, r))
    return r[order], c[order]


def add_self_loops(g: Graph) -> SparseMatrix:
    r, c = self_loop_pairs(g)
    return SparseMatrix(g.num_nodes, g.num_nodes, r, c, np.ones(len(r)))


def degree_vector(a_tilde: SparseMatrix) -> np.ndarray:
    return np.bincount(a_tilde.row, weights=a_tilde.val, minlength=a_tilde.rows).astype(np.float64)


def normalize_values(row: np.ndarray, col: np.ndarray, val: np.ndarray, deg: np.ndarray) -> np.ndarray:
    """Entry-wise ``val / sqrt(d[row] * d[col])``; shared by the naive and blocked paths."""
    return val / np.sqrt(deg[row] * deg[col])


def normalize_adjacency(a_tilde: SparseMatrix, d: np.ndarray) -> SparseMatrix:
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (a_tilde.rows,):
        raise GraphError("degree vector length does not match matrix")
    if np.any(d <= 0):
        raise GraphError("zero degree: add self-loops before normalizing")
    vals = normalize_values(a_tilde.row, a_tilde.col, a_tilde.val, d)
    return SparseMatrix(a_tilde.rows, a_tilde.cols, a_tilde.row, a_tilde.col, vals)


def normalized_adjacency(g: Graph) -> SparseMatrix:
    a = add_self_loops(g)
    return normalize_adjacency(a, degree_vector(a))


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class Split:
    """Train / validation / test node masks."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    CODES = ("t", "v", "s")

    def codes(self) -> list[str]:
        out = np.full(len(self.train), "", dtype=object)
        out[self.train] = "t"
        out[self.val] = "v"
        out[self.test] = "s"
        return list(out)

    @classmethod
    def from_codes(cls, codes) -> "Split":
        a = np.asarray(list(codes))
        bad = set(np.unique(a)) - set(cls.CODES)
        if bad:
            raise GraphError(f"unknown split codes {sorted(bad)}; expected t/v/s")
        return cls(a == "t", a == "v", a == "s")


def random_split(n: int, rng: np.random.Generator, fractions=(0.6, 0.2)) -> Split:
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    train[perm[:n_train]] = True
    val[perm[n_train:n_train + n_val]] = True
    return Split(train, val, ~(train | val))


# ---------------------------------------------------------------- synthetic data


def _planted_edges(groups: np.ndarray, avg_degree: float, homophily: float,
                   rng: np.random.Generator) -> np.ndarray:
    # Expected intra-group degree avg_degree*h, inter-group avg_degree*(1-h).
    n = len(groups)
    ids = np.unique(groups)
    members = [np.flatnonzero(groups == k) for k in ids]
    chunks = []
    for a in range(len(ids)):
        na = len(members[a])
        p_in = min(1.0, avg_degree * homophily / max(na - 1, 1))
        n_pairs = na * (na - 1) // 2
        if n_pairs and p_in > 0:
            cnt = rng.binomial(n_pairs, p_in)
            flat = rng.choice(n_pairs, size=cnt, replace=False)
            iu, ju = np.triu_indices(na, 1)
            chunks.append(np.stack([members[a][iu[flat]], members[a][ju[flat]]], axis=1))
        for b in range(a + 1, len(ids)):
            nb = len(members[b])
            p_out = min(1.0, avg_degree * (1.0 - homophily) / max(n - na, 1))
            n_pairs = na * nb
            if n_pairs and p_out > 0:
                cnt = rng.binomial(n_pairs, p_out)
                flat = rng.choice(n_pairs, size=cnt, replace=False)
                chunks.append(np.stack([members[a][flat // nb], members[b][flat % nb]], axis=1))
    if not chunks:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(chunks).astype(np.int64)


def gen_synthetic(n: int, classes: int, feature_dim: int, homophily: float,
                  feature_mode: str = "linear", seed: int = 0, avg_degree: float = 10.0,
                  noise: float | None = None):
    """Planted-partition graph with class-structured features.

    ``linear``: features are a class mean plus Gaussian noise, separable once
    neighbourhoods are averaged.  ``xor``: each node carries two latent sign
    bits, the label is their XOR (plus a linearly encoded offset when
    ``classes > 2``), and communities are planted on the latent groups so that
    aggregation denoises without making the task linear.

    Returns ``(graph, features, labels, split)``.
    """
    if classes < 1 or n < classes:
        raise GraphError(f"need 1 <= classes <= n, got classes={classes}, n={n}")
    if feature_dim < 2:
        raise GraphError("feature_dim must be >= 2")
    if not 0.0 <= homophily <= 1.0:
        raise GraphError("homophily must lie in [0, 1]")
    if feature_mode not in ("linear", "xor"):
        raise GraphError(f"unknown feature_mode {feature_mode!r}")
    rng = np.random.default_rng(seed)

    if feature_mode == "linear":
        labels = np.arange(n) % classes
        rng.shuffle(labels)
        groups = labels
        sigma = 2.0 if noise is None else noise
        means = rng.standard_normal((classes, feature_dim))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        x = means[labels] + sigma * rng.standard_normal((n, feature_dim))
    else:
        if classes % 2:
            raise GraphError("xor mode needs an even number of classes")
        if classes > 2 and feature_dim < 3:
            raise GraphError("xor mode with more than 2 classes needs feature_dim >= 3")
        half = classes // 2
        groups = np.arange(n) % (4 * half)
        rng.shuffle(groups)
        b1, b2, offset = groups % 2, (groups // 2) % 2, groups // 4
        labels = (b1 ^ b2) + 2 * offset
        sigma = 1.0 if noise is None else noise
        x = sigma * rng.standard_normal((n, feature_dim))
        x[:, 0] += 2.0 * b1 - 1.0
        x[:, 1] += 2.0 * b2 - 1.0
        if half > 1:
            x[:, 2] += 2.0 * offset / (half - 1) - 1.0

    edges = _planted_edges(groups, min(avg_degree, n - 1), homophily, rng)
    g = Graph.from_edges(n, edges)
    split = random_split(n, rng)
    return g, x.astype(np.float64), labels.astype(np.int64), split


# ---------------------------------------------------------------- file formats


def read_edge_list(path) -> tuple[int, np.ndarray]:
    """Return (max node id + 1, raw pairs) from a whitespace edge-list file."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 2:
                raise GraphError(f"{path}:{lineno}: expected 'src dst'")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise GraphError(f"{path}:{lineno}: {exc}") from None
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return (int(arr.max()) + 1 if len(arr) else 0), arr


def load_graph(path, num_nodes: int | None = None) -> Graph:
    inferred, pairs = read_edge_list(path)
    return Graph.from_edges(num_nodes if num_nodes is not None else inferred, pairs)


def write_edge_list(path, g: Graph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n={g.num_nodes} m={g.num_edges}\n")
        for s, d in g.edges:
            fh.write(f"{s} {d}\n")


_FEAT_HEADER = struct.Struct("<QQ")


def write_features(path, x: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        np.savetxt(path, x, delimiter=",", fmt="%.9g")
        return
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(*x.shape))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
    raw = path.read_bytes()
    if len(raw) < _FEAT_HEADER.size:
        raise GraphError(f"{path}: truncated feature header")
    n, d = _FEAT_HEADER.unpack_from(raw)
    body = raw[_FEAT_HEADER.size:]
    if len(body) != n * d * 4:
        raise GraphError(f"{path}: expected {n * d} float32 values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float64)


def write_labels(path, labels) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels), encoding="utf-8")


def read_labels(path) -> np.ndarray:
    lines = [s.strip() for s in Path(path).read_text(encoding="utf-8").splitlines()]
    return np.array([int(s) for s in lines if s], dtype=np.int64)


def write_split(path, split: Split) -> None:
    Path(path).write_text("".join(c + "\n" for c in split.codes()), encoding="utf-8")


def read_split(path) -> Split:
    lines = [s.strip() for s in Path(path).read_text(encoding="utf-8").splitlines()]
    return Split.from_codes([s for s in lines if s])


def dataset_hash(g: Graph, x: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<Q", g.num_nodes))
    h.update(np.ascontiguousarray(g.edges, dtype="<i8").tobytes())
    h.update(struct.pack("<QQ", *x.shape))
    h.update(np.ascontiguousarray(x, dtype="<f8").tobytes())
    return h.hexdigest()
