import numpy as np
import pytest
from hypothesis import strategies as st

from lcgnn.formula import (
    Activation,
    AttnSum,
    Combine,
    FeatureVar,
    FilterPower,
    Softmax,
    WeightMul,
)
from lcgnn.graph import Graph

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_graph(n, p, rng):
    upper = np.triu(rng.random((n, n)) < p, 1)
    return Graph.from_edges(n, np.argwhere(upper))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Formulas whose weights are all square, so any tree evaluates with d x d weights.

def _chains(max_weight=4):
    leaf = st.just(FeatureVar())

    def extend(inner):
        return st.one_of(
            st.builds(FilterPower, st.integers(1, 2), inner),
            st.builds(WeightMul, st.integers(1, max_weight), inner),
            st.builds(Activation, st.sampled_from(["relu", "identity"]), inner),
        )

    return st.recursive(leaf, extend, max_leaves=8)


def formulas(max_branches=3):
    chain = _chains()
    branches = st.lists(chain, min_size=1, max_size=max_branches)
    square = st.one_of(
        chain,
        st.builds(lambda kids: Combine("max", tuple(kids)), branches),
        st.builds(lambda kids: AttnSum(tuple(kids)), branches),
    )
    concat = st.builds(lambda kids: Combine("concat", tuple(kids)), branches)
    # a trailing weight only follows bodies that keep the d columns
    outer = st.one_of(square, concat, st.builds(WeightMul, st.integers(1, 4), square))
    return st.one_of(outer, st.builds(Softmax, outer))
