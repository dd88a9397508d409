"""LC transformation: commute graph filters past activations until every
filter touches the feature matrix directly.

One rewrite step turns ``S^j·σ(t)`` into ``σ(S^j·t)`` where ``S^j·t`` is
rebuilt canonically (slid under weight products, merged with an inner
filter).  Redexes are chosen outermost-leftmost.
"""

from __future__ import annotations

from dataclasses import dataclass

from .formula import (
    Activation,
    AttnSum,
    Combine,
    FeatureVar,
    FilterPower,
    Formula,
    WeightMul,
    canonicalize,
    check_formula,
    children,
    count_redexes,
    push_filter,
    replace_children,
    walk,
)


@dataclass(frozen=True)
class PlanSpec:
    """Powers k for which S^k·X must be precomputed (0 means raw X)."""

    powers: tuple

    @property
    def max_power(self) -> int:
        return max(self.powers)


def _rewrite_first(f: Formula):
    # returns (new_formula, rewritten?)
    if isinstance(f, FilterPower) and isinstance(f.child, Activation):
        act = f.child
        return Activation(act.kind, push_filter(f.power, act.child)), True
    kids = children(f)
    for i, c in enumerate(kids):
        new, done = _rewrite_first(c)
        if done:
            return replace_children(f, kids[:i] + (new,) + kids[i + 1:]), True
    return f, False


def apply_f_lc(f: Formula) -> Formula:
    """Rewrite the outermost-leftmost ``S^j·σ(t)`` redex; identity when none exists."""
    return _rewrite_first(f)[0]


def lc_steps(f: Formula) -> list:
    """Every intermediate formula, starting with the canonicalized input."""
    check_formula(f)
    cur = canonicalize(f)
    steps = [cur]
    while count_redexes(cur):
        cur = apply_f_lc(cur)
        steps.append(cur)
    return steps


def plan_spec(f: Formula) -> PlanSpec:
    powers = set()

    def visit(node, above):
        if isinstance(node, FeatureVar):
            powers.add(above)
            return
        for c in children(node):
            visit(c, node.power if isinstance(node, FilterPower) else 0)

    visit(f, 0)
    return PlanSpec(tuple(sorted(powers)))


def lc_transform(f: Formula) -> tuple[Formula, PlanSpec]:
    out = lc_steps(f)[-1]
    return out, plan_spec(out)


def validate_lc(f: Formula) -> bool:
    bad = (Activation, WeightMul, Combine, AttnSum)
    return not any(isinstance(node, FilterPower) and isinstance(node.child, bad)
                   for node in walk(f))


def activation_measure(f: Formula) -> int:
    """Sum over activation nodes of the filter nodes above them; f_LC strictly lowers it."""
    total = 0

    def visit(node, filters_above):
        nonlocal total
        if isinstance(node, Activation):
            total += filters_above
        bump = 1 if isinstance(node, FilterPower) else 0
        for c in children(node):
            visit(c, filters_above + bump)

    visit(f, 0)
    return total


def path_signatures(f: Formula) -> list:
    """Per root-to-X path: (total filter power, weight indices, activation count).

    Paths are listed left to right; the tuple is what the LC rewrite preserves.
    """
    out = []

    def visit(node, power, weights, acts):
        if isinstance(node, FeatureVar):
            out.append((power, tuple(sorted(weights, key=str)), acts))
            return
        if isinstance(node, FilterPower):
            power += node.power
        elif isinstance(node, WeightMul):
            weights = weights + [node.index]
        elif isinstance(node, Activation):
            acts += 1
        for c in children(node):
            visit(c, power, weights, acts)

    visit(f, 0, [], 0)
    return out
