"""Mini-batch training of LC models on precomputed features.

The LC formula is interpreted directly: leaves ``S^k·X`` are looked up in the
precomputed feature table for the batch rows, and every other node carries a
small forward/backward rule.  Parameters live in a flat name -> array dict
(``W_1``, ``W_2``, ..., ``W`` for SGC, ``gamma`` for GPRGNN attention).
"""

from __future__ import annotations

import copy
import functools
import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import PrecomputedFeatures
from .formula import (
    Activation,
    AttnSum,
    Combine,
    FeatureVar,
    FilterPower,
    ModelSpec,
    Softmax,
    WeightMul,
    build_formula,
    num_attention,
    weight_shapes,
)
from .oracle import ParamSet
from .rewrite import lc_transform, validate_lc


class NonFiniteGradient(FloatingPointError):
    pass


class EmptyMask(ValueError):
    pass


class NotLCFormula(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    dropout: float = 0.0
    prop_dropout: float = 0.0
    batch_size: int = 4096
    patience: int = 300
    max_epochs: int = 2000
    hidden_dim: int = 256
    activation: str = "relu"
    attn_alpha: float = 0.1
    train_attn: bool = True
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        for name in ("batch_size", "patience", "max_epochs", "hidden_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"TrainConfig.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("dropout", "prop_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"TrainConfig.{name} must lie in [0, 1)")
        if not 0.0 <= self.attn_alpha <= 1.0:
            raise ValueError("TrainConfig.attn_alpha must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("TrainConfig.learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("TrainConfig.weight_decay must be >= 0")
        if self.activation != "relu":
            raise ValueError("TrainConfig.activation supports only 'relu'")
        if self.precision not in ("f32", "f64"):
            raise ValueError("TrainConfig.precision must be 'f32' or 'f64'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def weight_name(index) -> str:
    return "W" if index is None else f"W_{index}"


@dataclass
class ModelParams:
    values: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def to_paramset(self) -> ParamSet:
        weights = {}
        for name, arr in self.values.items():
            if name == "W":
                weights[None] = arr
            elif name.startswith("W_"):
                weights[int(name[2:])] = arr
        attn = list(self.values["gamma"]) if "gamma" in self.values else []
        return ParamSet(weights, attn)


@functools.lru_cache(maxsize=64)
def lc_formula(spec: ModelSpec):
    """LC form and plan for ``spec``; the training path only accepts LC formulas."""
    f, plan = lc_transform(build_formula(spec))
    if not validate_lc(f):
        raise NotLCFormula(f"{spec.family} did not reach an LC form")
    return f, plan


def attention_init(K: int, alpha: float) -> np.ndarray:
    """gamma_k = alpha(1-alpha)^k for k < K, gamma_K = (1-alpha)^K."""
    g = np.array([alpha * (1 - alpha) ** k for k in range(K)] + [(1 - alpha) ** K])
    return g


def init_params(spec: ModelSpec, cfg: TrainConfig) -> ModelParams:
    lc_formula(spec)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    values = {}
    for index, (fan_in, fan_out) in weight_shapes(spec).items():
        bound = 1.0 / np.sqrt(fan_in)
        values[weight_name(index)] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(cfg.dtype)
    if num_attention(spec):
        values["gamma"] = attention_init(spec.conv_layers, cfg.attn_alpha).astype(cfg.dtype)
    return ModelParams(values,
                       {k: np.zeros_like(a) for k, a in values.items()},
                       {k: np.zeros_like(a) for k, a in values.items()})


# ---------------------------------------------------------------- forward / backward


def _forward(f, values, feats: PrecomputedFeatures, rows, dtype, train: bool, cfg: TrainConfig | None,
             rng: np.random.Generator | None, prop_dropout: float):
    """Return ``(logits, backward)``; ``backward(dlogits)`` yields a grads dict."""
    grads = {}

    def add(name, g):
        if name in grads:
            grads[name] = grads[name] + g
        else:
            grads[name] = g

    def drop(h, p):
        if not train or p <= 0:
            return h, None
        mask = (rng.random(h.shape) >= p).astype(dtype) / dtype(1 - p)
        return h * mask, mask

    def ev(node):
        if isinstance(node, (FeatureVar, FilterPower)):
            k = node.power if isinstance(node, FilterPower) else 0
            if isinstance(node, FilterPower) and not isinstance(node.child, FeatureVar):
                raise NotLCFormula("filter not adjacent to X")
            h = np.asarray(feats[k][rows], dtype=dtype)
            h, _ = drop(h, prop_dropout)
            return h, lambda g: None
        if isinstance(node, WeightMul):
            name = weight_name(node.index)
            w = values[name]
            h, back = ev(node.child)

            def b_mul(g):
                add(name, h.T @ g)
                back(g @ w.T)
            return h @ w, b_mul
        if isinstance(node, Activation):
            h, back = ev(node.child)
            if node.kind == "relu":
                pos = h > 0
                out = np.where(pos, h, dtype(0))
            else:
                pos = None
                out = h
            out, mask = drop(out, cfg.dropout if cfg is not None else 0.0)

            def b_act(g):
                if mask is not None:
                    g = g * mask
                back(g * pos if pos is not None else g)
            return out, b_act
        if isinstance(node, Combine):
            parts = [ev(c) for c in node.children]
            outs = [p[0] for p in parts]
            if node.kind == "concat":
                widths = np.cumsum([0] + [o.shape[1] for o in outs])

                def b_cat(g):
                    for (_, back), lo, hi in zip(parts, widths[:-1], widths[1:]):
                        back(g[:, lo:hi])
                return np.concatenate(outs, axis=1), b_cat
            stack = np.stack(outs)
            winner = np.argmax(stack, axis=0)  # ties -> lowest branch index

            def b_max(g):
                for i, (_, back) in enumerate(parts):
                    back(np.where(winner == i, g, dtype(0)))
            return np.take_along_axis(stack, winner[None], axis=0)[0], b_max
        if isinstance(node, AttnSum):
            gamma = values["gamma"]
            parts = [ev(c) for c in node.children]
            out = sum(gamma[k] * p[0] for k, p in enumerate(parts))

            def b_attn(g):
                add("gamma", np.array([np.sum(g * p[0]) for p in parts], dtype=dtype))
                for k, (_, back) in enumerate(parts):
                    back(gamma[k] * g)
            return out, b_attn
        if isinstance(node, Softmax):
            # softmax is fused into the loss; logits pass straight through
            return ev(node.child)
        raise NotLCFormula(f"unsupported node {type(node).__name__}")

    logits, back = ev(f)

    def backward(dlogits):
        grads.clear()
        back(dlogits)
        return dict(grads)

    return logits, backward


def forward(spec: ModelSpec, params: ModelParams, features: PrecomputedFeatures, rows=None,
            mode: str = "eval", cfg: TrainConfig | None = None, rng=None) -> np.ndarray:
    """Logits for ``rows`` (all nodes when None)."""
    f, _ = lc_formula(spec)
    rows = np.arange(features.n) if rows is None else np.asarray(rows)
    dtype = next(iter(params.values.values())).dtype.type
    train = mode == "train"
    if train and rng is None:
        rng = np.random.default_rng(cfg.seed if cfg is not None else 0)
    logits, _ = _forward(f, params.values, features, rows, dtype, train, cfg, rng,
                         _prop_dropout(spec, cfg))
    return logits


def _prop_dropout(spec, cfg):
    return cfg.prop_dropout if (cfg is not None and spec.family == "GPRGNN") else 0.0


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = len(labels)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


def loss_and_grads(spec: ModelSpec, params: ModelParams, features: PrecomputedFeatures, rows,
                   labels, cfg: TrainConfig | None = None, mode: str = "eval", rng=None):
    """Mean cross-entropy (+ L2 on weight matrices) and gradients for every parameter."""
    f, _ = lc_formula(spec)
    rows = np.asarray(rows)
    labels = np.asarray(labels)
    dtype = next(iter(params.values.values())).dtype.type
    train = mode == "train"
    logits, backward = _forward(f, params.values, features, rows, dtype, train, cfg, rng,
                                _prop_dropout(spec, cfg))
    if labels.max(initial=0) >= logits.shape[1] or labels.min(initial=0) < 0:
        raise ValueError(f"label ids must lie in [0, {logits.shape[1]})")
    loss, dlogits = cross_entropy(logits, labels)
    grads = backward(dlogits.astype(dtype))
    for name, arr in params.values.items():
        grads.setdefault(name, np.zeros_like(arr))
    wd = cfg.weight_decay if cfg is not None else 0.0
    if wd:
        for name, arr in params.values.items():
            if name.startswith("W"):
                loss += 0.5 * wd * float(np.sum(arr.astype(np.float64) ** 2))
                grads[name] = grads[name] + wd * arr
    if cfg is not None and not cfg.train_attn:
        grads.pop("gamma", None)
    return loss, grads


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params: ModelParams, grads: dict, cfg: TrainConfig) -> ModelParams:
    """One Adam update in place; parameters without a gradient entry stay frozen."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    params.step += 1
    t = params.step
    lr = cfg.learning_rate
    for name, g in grads.items():
        m = params.m[name] = ADAM_BETA1 * params.m[name] + (1 - ADAM_BETA1) * g
        v = params.v[name] = ADAM_BETA2 * params.v[name] + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        params.values[name] = (params.values[name] - update).astype(params.values[name].dtype)
    return params


def evaluate_accuracy(spec: ModelSpec, params: ModelParams, features: PrecomputedFeatures,
                      labels, mask) -> float:
    rows = np.flatnonzero(np.asarray(mask))
    if len(rows) == 0:
        raise EmptyMask("accuracy requested over an empty mask")
    logits = forward(spec, params, features, rows)
    return accuracy_from_logits(logits, np.asarray(labels)[rows])


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise EmptyMask("accuracy requested over an empty mask")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# ---------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    cum_ms: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    precompute_ms: float = 0.0
    best_epoch: int = -1
    best_val_acc: float = -1.0

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_acc,cum_time_ms"]
        lines += [f"{r.epoch},{r.train_loss!r},{r.val_acc!r},{r.cum_ms:.3f}" for r in self.records]
        return "\n".join(lines) + "\n"

    def deterministic_view(self) -> list:
        return [(r.epoch, r.train_loss, r.val_acc) for r in self.records] + [self.best_epoch]


def train(spec: ModelSpec, features: PrecomputedFeatures, labels, split, cfg: TrainConfig,
          precompute_ms: float = 0.0, on_epoch=None):
    """Mini-batch Adam with early stopping on validation accuracy.

    Stops after ``cfg.patience`` epochs without a strictly better validation
    accuracy, or at ``cfg.max_epochs``; returns the best-epoch parameters.
    """
    _, plan = lc_formula(spec)
    missing = [k for k in plan.powers if k not in features.per_power]
    if missing:
        features[missing[0]]  # raises MissingPower naming the power
    labels = np.asarray(labels)
    if len(labels) != features.n:
        raise ValueError(f"{len(labels)} labels for {features.n} feature rows")
    train_rows = np.flatnonzero(split.train)
    if len(train_rows) == 0:
        raise EmptyMask("no training rows")
    if not np.any(split.val):
        raise EmptyMask("no validation rows")

    seeds = np.random.SeedSequence([cfg.seed, 1]).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])
    params = init_params(spec, cfg)
    history = TrainHistory(precompute_ms=precompute_ms)
    best = copy.deepcopy(params)
    start = time.perf_counter()

    for epoch in range(cfg.max_epochs):
        order = shuffle_rng.permutation(train_rows)
        total, count = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            loss, grads = loss_and_grads(spec, params, features, batch, labels[batch], cfg,
                                         mode="train", rng=dropout_rng)
            adam_step(params, grads, cfg)
            total += loss * len(batch)
            count += len(batch)
        val_acc = evaluate_accuracy(spec, params, features, labels, split.val)
        cum_ms = precompute_ms + (time.perf_counter() - start) * 1e3
        rec = EpochRecord(epoch, total / count, val_acc, cum_ms)
        history.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if val_acc > history.best_val_acc:
            history.best_val_acc = val_acc
            history.best_epoch = epoch
            best = copy.deepcopy(params)
        elif epoch - history.best_epoch >= cfg.patience:
            break
    return best, history
