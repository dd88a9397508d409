"""Dense float64 reference evaluator used as ground truth in tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .formula import (
    Activation,
    AttnSum,
    Combine,
    FeatureVar,
    FilterPower,
    Formula,
    Softmax,
    WeightMul,
)

MAX_ORACLE_NODES = 2048


class ShapeMismatch(ValueError):
    pass


@dataclass
class ParamSet:
    weights: dict
    attn: list = field(default_factory=list)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_size(s_dense, x):
    if s_dense.shape[0] > MAX_ORACLE_NODES:
        raise ValueError(f"oracle refuses n={s_dense.shape[0]} > {MAX_ORACLE_NODES}")
    if s_dense.ndim != 2 or s_dense.shape[0] != s_dense.shape[1]:
        raise ShapeMismatch(f"S must be square, got {s_dense.shape}")
    if x.ndim != 2 or x.shape[0] != s_dense.shape[0]:
        raise ShapeMismatch(f"X has {x.shape[0]} rows, S is {s_dense.shape}")


def _matmul(a, b, what):
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"{what}: {a.shape} @ {b.shape}")
    return a @ b


def evaluate_formula(f: Formula, p: ParamSet, s_dense: np.ndarray, x: np.ndarray) -> np.ndarray:
    s_dense = np.asarray(s_dense, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_size(s_dense, x)

    def ev(node):
        if isinstance(node, FeatureVar):
            return x
        if isinstance(node, FilterPower):
            out = ev(node.child)
            for _ in range(node.power):
                out = _matmul(s_dense, out, "filter")
            return out
        if isinstance(node, WeightMul):
            if node.index not in p.weights:
                raise ShapeMismatch(f"no weight W_{node.index} in parameter set")
            return _matmul(ev(node.child), np.asarray(p.weights[node.index], dtype=np.float64),
                           f"W_{node.index}")
        if isinstance(node, Activation):
            h = ev(node.child)
            return np.maximum(h, 0.0) if node.kind == "relu" else h
        if isinstance(node, Combine):
            parts = [ev(c) for c in node.children]
            if node.kind == "concat":
                return np.concatenate(parts, axis=1)
            if len({q.shape for q in parts}) != 1:
                raise ShapeMismatch("COMB_max branches differ in shape")
            return np.maximum.reduce(parts)
        if isinstance(node, AttnSum):
            if len(p.attn) != len(node.children):
                raise ShapeMismatch(f"{len(node.children)} terms but {len(p.attn)} attention weights")
            parts = [ev(c) for c in node.children]
            if len({q.shape for q in parts}) != 1:
                raise ShapeMismatch("attention terms differ in shape")
            return sum(float(g) * q for g, q in zip(p.attn, parts))
        if isinstance(node, Softmax):
            return softmax_rows(ev(node.child))
        raise TypeError(f"not a formula node: {node!r}")

    return ev(f)


def matrix_power_aggregate(s_dense: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
    s_dense = np.asarray(s_dense, dtype=np.float64)
    out = np.asarray(x, dtype=np.float64)
    _check_size(s_dense, out)
    for _ in range(k):
        out = s_dense @ out
    return out
