"""Expression trees for GNN architectures.

A formula is a tree of frozen dataclasses, so structural equality is plain
``==`` and nodes hash.  Matrix chains are left-associated: ``S^1·X·W_1`` is
``WeightMul(1, FilterPower(1, FeatureVar()))``.  In canonical form a filter
never sits directly above a weight multiplication or another filter; use
:func:`push_filter` to build filtered terms.

Rendering grammar::

    X                    feature matrix
    S^k·t                k-fold filter application
    t·W_i   (t·W)        weight multiplication (unindexed for SGC)
    σ(t)    id(t)        ReLU / identity activation
    COMB_concat[t, ...]  COMB_max[t, ...]
    Σγ[γ_0·t, γ_1·t, ...]
    softmax(t)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Union

FAMILIES = ("GCN", "SGC", "JKNet", "GPRGNN")
ACTIVATIONS = ("relu", "identity")
COMBINES = ("concat", "max")


class FormulaError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVar:
    pass


@dataclass(frozen=True)
class FilterPower:
    power: int
    child: "Formula"

    def __post_init__(self):
        if self.power < 1:
            raise FormulaError(f"filter power must be >= 1, got {self.power}")


@dataclass(frozen=True)
class WeightMul:
    index: Optional[int]
    child: "Formula"


@dataclass(frozen=True)
class Activation:
    kind: str
    child: "Formula"

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise FormulaError(f"unknown activation {self.kind!r}")


@dataclass(frozen=True)
class Combine:
    kind: str
    children: tuple

    def __post_init__(self):
        if self.kind not in COMBINES:
            raise FormulaError(f"unknown COMB kind {self.kind!r}")
        if not self.children:
            raise FormulaError("COMB needs at least one branch")


@dataclass(frozen=True)
class AttnSum:
    children: tuple

    def __post_init__(self):
        if not self.children:
            raise FormulaError("attention sum needs at least one term")


@dataclass(frozen=True)
class Softmax:
    child: "Formula"


Formula = Union[FeatureVar, FilterPower, WeightMul, Activation, Combine, AttnSum, Softmax]
X = FeatureVar()


def Filter(child: Formula) -> FilterPower:
    return FilterPower(1, child)


def children(f: Formula) -> tuple:
    if isinstance(f, FeatureVar):
        return ()
    if isinstance(f, (Combine, AttnSum)):
        return f.children
    return (f.child,)


def replace_children(f: Formula, new: tuple) -> Formula:
    if isinstance(f, FeatureVar):
        return f
    if isinstance(f, Combine):
        return Combine(f.kind, tuple(new))
    if isinstance(f, AttnSum):
        return AttnSum(tuple(new))
    (c,) = new
    if isinstance(f, FilterPower):
        return FilterPower(f.power, c)
    if isinstance(f, WeightMul):
        return WeightMul(f.index, c)
    if isinstance(f, Activation):
        return Activation(f.kind, c)
    return Softmax(c)


def walk(f: Formula) -> Iterator[Formula]:
    """Pre-order traversal, children left to right."""
    stack = [f]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def push_filter(power: int, t: Formula) -> Formula:
    """Canonical ``S^power·t``: slide below weight products, merge adjacent filters."""
    if isinstance(t, WeightMul):
        return WeightMul(t.index, push_filter(power, t.child))
    if isinstance(t, FilterPower):
        return FilterPower(t.power + power, t.child)
    return FilterPower(power, t)


def canonicalize(f: Formula) -> Formula:
    kids = tuple(canonicalize(c) for c in children(f))
    if isinstance(f, FilterPower):
        return push_filter(f.power, kids[0])
    return replace_children(f, kids)


def check_formula(f: Formula) -> None:
    """Raise :class:`FormulaError` unless ``f`` is well formed.

    Softmax may only appear at the root, and filters may not be applied to
    COMB / attention sums (the multiplicative chain would lose its single X).
    """
    def visit(node, at_root):
        if isinstance(node, Softmax) and not at_root:
            raise FormulaError("softmax must be the outermost node")
        if isinstance(node, FilterPower) and isinstance(node.child, (Combine, AttnSum, Softmax)):
            raise FormulaError(f"filter applied to {type(node.child).__name__}")
        if not isinstance(node, (FeatureVar, FilterPower, WeightMul, Activation, Combine, AttnSum, Softmax)):
            raise FormulaError(f"not a formula node: {node!r}")
        for c in children(node):
            visit(c, False)
    visit(f, True)


def render_formula(f: Formula) -> str:
    if isinstance(f, FeatureVar):
        return "X"
    if isinstance(f, FilterPower):
        return f"S^{f.power}·{render_formula(f.child)}"
    if isinstance(f, WeightMul):
        w = "W" if f.index is None else f"W_{f.index}"
        return f"{render_formula(f.child)}·{w}"
    if isinstance(f, Activation):
        name = "σ" if f.kind == "relu" else "id"
        return f"{name}({render_formula(f.child)})"
    if isinstance(f, Combine):
        return f"COMB_{f.kind}[" + ", ".join(render_formula(c) for c in f.children) + "]"
    if isinstance(f, AttnSum):
        return "Σγ[" + ", ".join(f"γ_{k}·{render_formula(c)}" for k, c in enumerate(f.children)) + "]"
    if isinstance(f, Softmax):
        return f"softmax({render_formula(f.child)})"
    raise FormulaError(f"not a formula node: {f!r}")


def count_redexes(f: Formula) -> int:
    """Number of filter nodes applied directly to an activation."""
    return sum(1 for node in walk(f)
               if isinstance(node, FilterPower) and isinstance(node.child, Activation))


def weight_indices(f: Formula) -> list:
    return [node.index for node in walk(f) if isinstance(node, WeightMul)]


# ---------------------------------------------------------------- model specs


@dataclass(frozen=True)
class ModelSpec:
    family: str
    conv_layers: int
    dims: tuple
    mlp_layers: int = 1
    combine: str = "concat"
    activation: str = "relu"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise FormulaError(f"unsupported model family {self.family!r}; choose from {FAMILIES}")
        if self.conv_layers < 1:
            raise FormulaError("conv_layers (K) must be >= 1")
        if self.family == "GPRGNN" and self.mlp_layers < 1:
            raise FormulaError("mlp_layers (T) must be >= 1")
        if self.combine not in COMBINES:
            raise FormulaError(f"unknown combine {self.combine!r}")
        if self.activation not in ACTIVATIONS:
            raise FormulaError(f"unknown activation {self.activation!r}")
        if len(self.dims) != 3 or any(int(v) < 1 for v in self.dims):
            raise FormulaError(f"dims must be three positive counts (d, h, y), got {self.dims}")
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))


def _chain(n_weights: int, act: str, leaf: Formula, filtered: bool) -> Formula:
    h = leaf
    for k in range(1, n_weights + 1):
        h = WeightMul(k, Filter(h) if filtered else h)
        if k < n_weights:
            h = Activation(act, h)
    return h


def build_formula(spec: ModelSpec) -> Formula:
    K, act = spec.conv_layers, spec.activation
    if spec.family == "GCN":
        return Softmax(_chain(K, act, X, filtered=True))
    if spec.family == "SGC":
        return Softmax(WeightMul(None, FilterPower(K, X)))
    if spec.family == "JKNet":
        branches = tuple(_chain(k, act, X, filtered=True) for k in range(1, K + 1))
        return Softmax(WeightMul(K + 1, Combine(spec.combine, branches)))
    if spec.family == "GPRGNN":
        mlp = _chain(spec.mlp_layers, act, X, filtered=False)
        terms = (mlp,) + tuple(push_filter(k, mlp) for k in range(1, K + 1))
        return Softmax(AttnSum(terms))
    raise FormulaError(f"unsupported model family {spec.family!r}")


def weight_shapes(spec: ModelSpec) -> dict:
    """Shape of every weight matrix, keyed by weight index."""
    d, h, y = spec.dims
    K = spec.conv_layers
    if spec.family == "SGC":
        return {None: (d, y)}
    if spec.family in ("GCN", "GPRGNN"):
        L = K if spec.family == "GCN" else spec.mlp_layers
        if L == 1:
            return {1: (d, y)}
        return {k: (d if k == 1 else h, y if k == L else h) for k in range(1, L + 1)}
    # JKNet: branch weights are shared, COMB output is projected to y classes
    shapes = {k: (d if k == 1 else h, h) for k in range(1, K + 1)}
    shapes[K + 1] = (K * h if spec.combine == "concat" else h, y)
    return shapes


def num_attention(spec: ModelSpec) -> int:
    return spec.conv_layers + 1 if spec.family == "GPRGNN" else 0
