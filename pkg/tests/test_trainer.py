import numpy as np
import pytest

from lcgnn.blocks import BudgetedExecutor, DecompositionPlan, precompute
from lcgnn.formula import ModelSpec
from lcgnn.graph import Split, normalized_adjacency
from lcgnn.oracle import evaluate_formula
from lcgnn.trainer import (
    EmptyMask,
    ModelParams,
    NonFiniteGradient,
    TrainConfig,
    accuracy_from_logits,
    adam_step,
    cross_entropy,
    evaluate_accuracy,
    forward,
    init_params,
    lc_formula,
    loss_and_grads,
    train,
)

from conftest import random_graph

N, D, H, Y = 14, 4, 5, 3


@pytest.fixture
def data(rng):
    g = random_graph(N, 0.3, rng)
    x = rng.standard_normal((N, D))
    feats = precompute(g, x, 3, DecompositionPlan(1, 1, 1), BudgetedExecutor())
    return g, x, feats


def f64(**kw):
    return TrainConfig(precision="f64", **kw)


def spec(family, K=2, **kw):
    return ModelSpec(family, K, (D, H, Y), **kw)


# ---------------------------------------------------------------- init


def test_attention_init_extremes():
    s = spec("GPRGNN", 3)
    g0 = init_params(s, f64(attn_alpha=0.0)).values["gamma"]
    np.testing.assert_array_equal(g0, [0, 0, 0, 1])
    g1 = init_params(s, f64(attn_alpha=1.0)).values["gamma"]
    np.testing.assert_array_equal(g1, [1, 0, 0, 0])


def test_init_is_deterministic_per_seed():
    a = init_params(spec("GCN"), f64(seed=3)).values
    b = init_params(spec("GCN"), f64(seed=3)).values
    c = init_params(spec("GCN"), f64(seed=4)).values
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["W_1"], c["W_1"])


def test_config_validation():
    with pytest.raises(ValueError, match="patience"):
        TrainConfig(patience=0)
    with pytest.raises(ValueError, match="dropout"):
        TrainConfig(dropout=1.0)
    with pytest.raises(ValueError, match="precision"):
        TrainConfig(precision="f16")


# ---------------------------------------------------------------- forward


def test_zero_weights_give_uniform_probabilities(data):
    _, _, feats = data
    p = init_params(spec("GCN"), f64())
    p.values = {k: np.zeros_like(v) for k, v in p.values.items()}
    logits = forward(spec("GCN"), p, feats)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    np.testing.assert_allclose(z / z.sum(axis=1, keepdims=True), np.full((N, Y), 1 / Y))


def test_gprgnn_one_hot_attention_is_mlp_on_raw_features(data):
    _, x, feats = data
    s = spec("GPRGNN", 3, mlp_layers=2)
    p = init_params(s, f64(attn_alpha=1.0))
    logits = forward(s, p, feats)
    ref = np.maximum(x @ p.values["W_1"], 0) @ p.values["W_2"]
    np.testing.assert_allclose(logits, ref, rtol=1e-12)


FAMILIES = [
    spec("GCN", 2),
    spec("GCN", 3),
    spec("SGC", 2),
    spec("JKNet", 3),
    spec("JKNet", 3, combine="max"),
    spec("GPRGNN", 3, mlp_layers=2),
]


@pytest.mark.parametrize("s", FAMILIES, ids=lambda s: f"{s.family}-{s.conv_layers}-{s.combine}")
@pytest.mark.parametrize("precision, tol", [("f64", 1e-10), ("f32", 1e-6)])
def test_forward_matches_oracle(s, precision, tol, data):
    g, x, feats = data
    p = init_params(s, TrainConfig(precision=precision, attn_alpha=0.3))
    f, _ = lc_formula(s)
    ps = p.to_paramset()
    ps.weights = {k: v.astype(np.float64) for k, v in ps.weights.items()}
    ref = evaluate_formula(f, ps, normalized_adjacency(g).to_dense(), x)
    logits = forward(s, p, feats)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = z / z.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(probs, ref, atol=tol, rtol=0)


# ---------------------------------------------------------------- loss and gradients


def test_cross_entropy_extremes():
    logits = np.array([[50.0, 0.0, 0.0]])
    loss, _ = cross_entropy(logits, np.array([0]))
    assert loss < 1e-20
    loss, grad = cross_entropy(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(np.log(5), rel=1e-12)
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-15)


def _numeric_grad(s, p, feats, rows, labels, cfg, name, eps=1e-5):
    arr = p.values[name]
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        up, _ = loss_and_grads(s, p, feats, rows, labels, cfg)
        arr[idx] = old - eps
        dn, _ = loss_and_grads(s, p, feats, rows, labels, cfg)
        arr[idx] = old
        out[idx] = (up - dn) / (2 * eps)
    return out


@pytest.mark.parametrize("s", FAMILIES, ids=lambda s: f"{s.family}-{s.conv_layers}-{s.combine}")
def test_gradients_match_finite_differences(s, data, rng):
    _, _, feats = data
    cfg = f64(weight_decay=0.01, attn_alpha=0.3)
    p = init_params(s, cfg)
    rows = np.arange(0, N, 2)
    labels = rng.integers(0, Y, len(rows))
    _, grads = loss_and_grads(s, p, feats, rows, labels, cfg)
    for name in p.values:
        num = _numeric_grad(s, p, feats, rows, labels, cfg, name)
        err = np.linalg.norm(grads[name] - num) / max(np.linalg.norm(num), 1e-12)
        assert err < 1e-4, name


def test_frozen_attention_has_no_gradient(data):
    _, _, feats = data
    s = spec("GPRGNN", 2, mlp_layers=2)
    cfg = f64(train_attn=False)
    _, grads = loss_and_grads(s, init_params(s, cfg), feats, [0, 1], [0, 1], cfg)
    assert "gamma" not in grads


# ---------------------------------------------------------------- optimizer


def _tiny_params():
    v = {"W": np.array([[1.0, -2.0]])}
    return ModelParams(v, {"W": np.zeros((1, 2))}, {"W": np.zeros((1, 2))})


def test_adam_zero_gradient_is_noop():
    p = _tiny_params()
    adam_step(p, {"W": np.zeros((1, 2))}, f64())
    np.testing.assert_array_equal(p.values["W"], [[1.0, -2.0]])


def test_adam_first_step_is_signed_learning_rate():
    p = _tiny_params()
    adam_step(p, {"W": np.array([[3.0, -0.5]])}, f64(learning_rate=0.1))
    np.testing.assert_allclose(p.values["W"], [[0.9, -1.9]], rtol=1e-7)


def test_adam_rejects_non_finite():
    p = _tiny_params()
    with pytest.raises(NonFiniteGradient):
        adam_step(p, {"W": np.array([[np.nan, 0.0]])}, f64())
    np.testing.assert_array_equal(p.values["W"], [[1.0, -2.0]])


# ---------------------------------------------------------------- accuracy


def test_accuracy_cases():
    logits = np.eye(3)
    assert accuracy_from_logits(logits, np.array([0, 1, 2])) == 1.0
    assert accuracy_from_logits(logits, np.array([1, 2, 0])) == 0.0
    assert accuracy_from_logits(np.zeros((2, 3)), np.array([0, 0])) == 1.0  # ties go to class 0
    with pytest.raises(EmptyMask):
        accuracy_from_logits(np.zeros((0, 3)), np.array([], dtype=int))


def test_evaluate_accuracy_empty_mask(data):
    _, _, feats = data
    s = spec("SGC")
    with pytest.raises(EmptyMask):
        evaluate_accuracy(s, init_params(s, f64()), feats, np.zeros(N, int), np.zeros(N, bool))


# ---------------------------------------------------------------- training loop


def separable(rng, n=100):
    from lcgnn.graph import Graph
    labels = np.repeat([0, 1], n // 2)
    x = rng.standard_normal((n, 4)) * 0.3
    x[:, 0] += np.where(labels == 1, 2.0, -2.0)
    edges = [(i, i + 1) for i in range(n - 1) if labels[i] == labels[i + 1]]
    g = Graph.from_edges(n, edges)
    codes = list("tttvs" * (n // 5))
    return g, x, labels, Split.from_codes(codes)


def test_training_fits_separable_data(rng):
    g, x, labels, split = separable(rng)
    s = ModelSpec("GCN", 2, (4, 16, 2))
    feats = precompute(g, x, 2, DecompositionPlan(1, 1, 1), BudgetedExecutor())
    cfg = TrainConfig(max_epochs=500, patience=500, hidden_dim=16)
    best, hist = train(s, feats, labels, split, cfg)
    assert evaluate_accuracy(s, best, feats, labels, split.train) == 1.0
    assert len(hist.records) <= 500


def test_training_is_deterministic_and_keeps_best(rng):
    g, x, labels, split = separable(rng)
    s = ModelSpec("JKNet", 2, (4, 8, 2))
    feats = precompute(g, x, 2, DecompositionPlan(1, 1, 1), BudgetedExecutor())
    cfg = TrainConfig(max_epochs=60, patience=10, batch_size=16, dropout=0.2, seed=5)
    b1, h1 = train(s, feats, labels, split, cfg)
    b2, h2 = train(s, feats, labels, split, cfg)
    assert h1.deterministic_view() == h2.deterministic_view()
    assert all(np.array_equal(b1.values[k], b2.values[k]) for k in b1.values)
    assert evaluate_accuracy(s, b1, feats, labels, split.val) == max(r.val_acc for r in h1.records)
    # early stopping: the run ends patience epochs after the best one, or at the cap
    last = h1.records[-1].epoch
    assert last == min(h1.best_epoch + cfg.patience, cfg.max_epochs - 1)


def test_training_rejects_missing_power(rng):
    g, x, labels, split = separable(rng)
    feats = precompute(g, x, 1, DecompositionPlan(1, 1, 1), BudgetedExecutor())
    from lcgnn.blocks import MissingPower
    with pytest.raises(MissingPower):
        train(ModelSpec("SGC", 2, (4, 8, 2)), feats, labels, split, TrainConfig(max_epochs=1))
