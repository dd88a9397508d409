"""Command-line pipelines: transform, plan, precompute, train, bench, gen-synthetic, calibrate.

Configuration is an INI file whose sections mirror the module types
(``[data]``, ``[synthetic]``, ``[model]``, ``[train]``, ``[budget]``,
``[output]``).  ``--set section.key=value`` and the dedicated flags override
file values.  Exit codes: 0 success, 1 usage/config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import datetime as _dt
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blocks, graph
from .bench import run_bench
from .blocks import (
    BudgetedExecutor,
    BudgetModel,
    DecompositionPlan,
    MissingPower,
    budget_from_graph,
    calibrate_budget,
    plan_report,
    precompute,
    read_lcpf,
    solve_agg_blocks,
    solve_norm_blocks,
    write_lcpf,
)
from .formula import FormulaError, ModelSpec, build_formula, render_formula
from .rewrite import lc_steps, plan_spec
from .trainer import TrainConfig, evaluate_accuracy, train

FAMILY_NAMES = {"gcn": "GCN", "sgc": "SGC", "jknet": "JKNet", "gprgnn": "GPRGNN"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config

DEFAULTS = {
    "synthetic": {"n": "2000", "classes": "4", "feature_dim": "16", "homophily": "0.8",
                  "mode": "linear", "avg_degree": "10"},
    "model": {"family": "gcn", "layers": "2", "mlp_layers": "2", "combine": "concat"},
    "budget": {"vol_gpu": "1048576", "alpha_A": "1", "alpha_S": "1", "alpha_D": "1",
               "beta_S": "1", "beta_X": "1"},
    "output": {"dir": "runs"},
    "run": {"seed": "0"},
}

TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


@dataclass
class RunConfig:
    data: dict | None
    synthetic: dict | None
    model: dict
    train: TrainConfig
    budget: dict
    out_dir: Path
    seed: int
    raw: dict = field(default_factory=dict)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:12]


def _num(section, key, value, kind):
    try:
        return kind(value)
    except ValueError:
        raise UsageError(f"[{section}] {key}: expected {kind.__name__}, got {value!r}") from None


def load_config(path: str | None, overrides: list) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if path:
        if not Path(path).exists():
            raise UsageError(f"config file not found: {path}")
        cp.read(path, encoding="utf-8")
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value)

    raw = {s: dict(cp.items(s)) for s in cp.sections()}
    known = {"data", "synthetic", "model", "train", "budget", "output", "run"}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown config section(s): {sorted(unknown)}")

    data = raw.get("data")
    if data is not None:
        if "synthetic" in raw:
            raise UsageError("config must define exactly one of [data] and [synthetic]")
        for key in ("edges", "features", "labels", "split"):
            if key not in data:
                raise UsageError(f"[data] {key}: missing")
            if not Path(data[key]).exists():
                raise UsageError(f"[data] {key}: file not found: {data[key]}")
        synthetic = None
    else:
        synthetic = {**DEFAULTS["synthetic"], **raw.get("synthetic", {})}
        for key, kind in (("n", int), ("classes", int), ("feature_dim", int)):
            synthetic[key] = _num("synthetic", key, synthetic[key], kind)
            if synthetic[key] < 1:
                raise UsageError(f"[synthetic] {key}: must be >= 1")
        for key in ("homophily", "avg_degree"):
            synthetic[key] = _num("synthetic", key, synthetic[key], float)
        if not 0 <= synthetic["homophily"] <= 1:
            raise UsageError("[synthetic] homophily: must lie in [0, 1]")
        if synthetic["mode"] not in ("linear", "xor"):
            raise UsageError("[synthetic] mode: must be 'linear' or 'xor'")

    model = {**DEFAULTS["model"], **raw.get("model", {})}
    if model["family"].lower() not in FAMILY_NAMES:
        raise UsageError(f"[model] family: unsupported {model['family']!r}; "
                         f"choose from {sorted(FAMILY_NAMES)}")
    for key in ("layers", "mlp_layers"):
        model[key] = _num("model", key, model[key], int)
        if model[key] < 1:
            raise UsageError(f"[model] {key}: must be >= 1")
    if model["combine"] not in ("concat", "max"):
        raise UsageError("[model] combine: must be 'concat' or 'max'")

    seed = _num("run", "seed", raw.get("run", {}).get("seed", DEFAULTS["run"]["seed"]), int)
    tkw = {"seed": seed}
    for key, value in raw.get("train", {}).items():
        if key not in TRAIN_FIELDS or key == "seed":
            raise UsageError(f"[train] {key}: unknown field")
        default = TRAIN_FIELDS[key].default
        if isinstance(default, bool):
            tkw[key] = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(default, (int, float)):
            tkw[key] = _num("train", key, value, type(default))
        else:
            tkw[key] = value
    try:
        tcfg = TrainConfig(**tkw)
    except ValueError as exc:
        raise UsageError(f"[train] {exc}") from None

    budget = {**DEFAULTS["budget"], **raw.get("budget", {})}
    for key in list(budget):
        budget[key] = _num("budget", key, budget[key], float)
        if not budget[key] > 0:
            raise UsageError(f"[budget] {key}: must be positive")

    out_dir = Path(raw.get("output", {}).get("dir", DEFAULTS["output"]["dir"]))
    resolved = {"data": data, "synthetic": synthetic, "model": model,
                "train": dataclasses.asdict(tcfg), "budget": budget, "seed": seed}
    return RunConfig(data, synthetic, model, tcfg, budget, out_dir, seed, resolved)


def load_dataset(cfg: RunConfig):
    if cfg.data is not None:
        x = graph.read_features(cfg.data["features"])
        g = graph.load_graph(cfg.data["edges"], num_nodes=x.shape[0])
        labels = graph.read_labels(cfg.data["labels"])
        split = graph.read_split(cfg.data["split"])
        if len(labels) != g.num_nodes or len(split.train) != g.num_nodes:
            raise ValueError("labels / split length does not match feature rows")
        return g, x, labels, split
    s = cfg.synthetic
    return graph.gen_synthetic(s["n"], s["classes"], s["feature_dim"], s["homophily"],
                               s["mode"], seed=cfg.seed, avg_degree=s["avg_degree"])


def model_spec(cfg: RunConfig, d: int, y: int) -> ModelSpec:
    m = cfg.model
    return ModelSpec(FAMILY_NAMES[m["family"].lower()], m["layers"], (d, cfg.train.hidden_dim, y),
                     mlp_layers=m["mlp_layers"], combine=m["combine"])


def budget_model(cfg: RunConfig, g: graph.Graph, d: int) -> BudgetModel:
    b = cfg.budget
    bm = budget_from_graph(g, d, b["vol_gpu"], b["alpha_A"], b["alpha_S"], b["alpha_D"],
                           b["beta_S"], b["beta_X"])
    explicit = {k: b[k] for k in ("vol_A", "vol_S", "vol_D", "vol_X") if k in b}
    return dataclasses.replace(bm, **explicit) if explicit else bm


def solve_plan(bm: BudgetModel) -> DecompositionPlan:
    b, c = solve_agg_blocks(bm)
    return DecompositionPlan(solve_norm_blocks(bm), b, c)


def make_run_dir(cfg: RunConfig, command: str) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S_%f")
    path = cfg.out_dir / f"{command}-{cfg.digest()}-{stamp}"
    path.mkdir(parents=True, exist_ok=False)
    (path / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- commands


def cmd_transform(args, out) -> int:
    try:
        spec = ModelSpec(FAMILY_NAMES[args.model], args.layers, (1, 1, 1),
                         mlp_layers=args.mlp_layers, combine=args.combine)
    except (KeyError, FormulaError) as exc:
        raise UsageError(str(exc)) from None
    steps = lc_steps(build_formula(spec))
    out.write(f"original: {render_formula(steps[0])}\n")
    out.write(f"rewrites: {len(steps) - 1}\n")
    for i, f in enumerate(steps[1:], 1):
        out.write(f"  step {i}: {render_formula(f)}\n")
    out.write(f"lc: {render_formula(steps[-1])}\n")
    out.write("powers: " + " ".join(str(k) for k in plan_spec(steps[-1]).powers) + "\n")
    return 0


def cmd_gen_synthetic(args, out) -> int:
    g, x, labels, split = graph.gen_synthetic(args.n, args.classes, args.feature_dim,
                                              args.homophily, args.mode, seed=args.seed,
                                              avg_degree=args.avg_degree)
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    graph.write_edge_list(d / "edges.txt", g)
    graph.write_features(d / "features.bin", x)
    graph.write_labels(d / "labels.txt", labels)
    graph.write_split(d / "split.txt", split)
    out.write(f"wrote n={g.num_nodes} m={g.num_edges} d={x.shape[1]} to {d}\n")
    return 0


def cmd_plan(args, out) -> int:
    cfg = load_config(args.config, args.set)
    g, x, _, _ = load_dataset(cfg)
    bm = budget_model(cfg, g, x.shape[1])
    out.write(plan_report(bm, solve_plan(bm)))
    return 0


def _precompute(cfg: RunConfig, g, x, spec: ModelSpec):
    bm = budget_model(cfg, g, x.shape[1])
    plan = solve_plan(bm)
    _, pspec = lc_steps_plan(spec)
    t0 = time.perf_counter()
    feats = precompute(g, x, spec.conv_layers, plan, BudgetedExecutor(bm), powers=pspec.powers,
                       dataset_hash=graph.dataset_hash(g, x))
    return feats, bm, plan, (time.perf_counter() - t0) * 1e3


def lc_steps_plan(spec: ModelSpec):
    steps = lc_steps(build_formula(spec))
    return steps[-1], plan_spec(steps[-1])


def cmd_precompute(args, out) -> int:
    cfg = load_config(args.config, args.set)
    g, x, labels, _ = load_dataset(cfg)
    spec = model_spec(cfg, x.shape[1], int(labels.max()) + 1)
    feats, bm, plan, _ = _precompute(cfg, g, x, spec)
    run = make_run_dir(cfg, "precompute")
    write_lcpf(run / "features.lcpf", feats)
    (run / "plan.txt").write_text(plan_report(bm, plan))
    out.write(f"{run / 'features.lcpf'}\n")
    return 0


def cmd_train(args, out) -> int:
    cfg = load_config(args.config, args.set)
    g, x, labels, split = load_dataset(cfg)
    spec = model_spec(cfg, x.shape[1], int(labels.max()) + 1)
    if args.lcpf:
        feats = read_lcpf(args.lcpf)
        if feats.n != len(labels):
            raise ValueError(f"{args.lcpf}: {feats.n} rows but dataset has {len(labels)} nodes")
        pre_ms = 0.0
    else:
        feats, _, _, pre_ms = _precompute(cfg, g, x, spec)
    run = make_run_dir(cfg, "train")
    params, hist = train(spec, feats, labels, split, cfg.train, precompute_ms=pre_ms)
    test_acc = evaluate_accuracy(spec, params, feats, labels, split.test)
    with open(run / "metrics.jsonl", "w") as fh:
        for r in hist.records:
            fh.write(json.dumps({"epoch": r.epoch, "train_loss": r.train_loss,
                                 "val_acc": r.val_acc, "cum_ms": round(r.cum_ms, 3)}) + "\n")
        total_ms = hist.records[-1].cum_ms if hist.records else pre_ms
        fh.write(json.dumps({"summary": True, "test_acc": test_acc, "best_epoch": hist.best_epoch,
                             "precompute_ms": round(pre_ms, 3), "total_ms": round(total_ms, 3)}) + "\n")
    (run / "history.csv").write_text(hist.to_csv())
    out.write(f"test_acc = {test_acc:.4f}  best_epoch = {hist.best_epoch}  run = {run}\n")
    return 0


def cmd_bench(args, out) -> int:
    cfg = load_config(args.config, args.set)
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    g, x, _, _ = load_dataset(cfg)
    bm = budget_model(cfg, g, x.shape[1])
    plan = DecompositionPlan(*args.plan) if args.plan else None
    report = run_bench(g, x, cfg.model["layers"], bm, repeats=args.repeats, plan=plan)
    run = make_run_dir(cfg, "bench")
    (run / "report.csv").write_text(report.to_csv())
    (run / "report.txt").write_text(report.to_text())
    out.write(report.to_text())
    return 0


def cmd_calibrate(args, out) -> int:
    cal = calibrate_budget(BudgetedExecutor(), args.probe_sizes, args.max_residual)
    for k, v in dataclasses.asdict(cal).items():
        out.write(f"{k} = {v!r}\n")
    return 0


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lcgnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("transform", help="print the LC rewrite of a model family")
    t.add_argument("--model", required=True, choices=sorted(FAMILY_NAMES))
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--mlp-layers", type=int, default=2)
    t.add_argument("--combine", choices=("concat", "max"), default="concat")
    t.set_defaults(fn=cmd_transform)

    s = sub.add_parser("gen-synthetic", help="write a planted-partition dataset")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--feature-dim", type=int, default=16)
    s.add_argument("--homophily", type=float, default=0.8)
    s.add_argument("--mode", choices=("linear", "xor"), default="linear")
    s.add_argument("--avg-degree", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_synthetic)

    for name, fn, helptext in (("plan", cmd_plan, "solve block counts for a budget"),
                               ("precompute", cmd_precompute, "write S^k X to an LCPF file"),
                               ("train", cmd_train, "train an LC model"),
                               ("bench", cmd_bench, "time naive vs blocked precomputation")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--config")
        c.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        c.add_argument("--seed", type=int)
        c.add_argument("--model", choices=sorted(FAMILY_NAMES))
        c.add_argument("--layers", type=int)
        c.add_argument("--out")
        c.set_defaults(fn=fn)
        if name == "train":
            c.add_argument("--lcpf", help="use an existing LCPF file instead of precomputing")
        if name == "bench":
            c.add_argument("--repeats", type=int, default=3)
            c.add_argument("--plan", type=int, nargs=3, metavar=("A", "B", "C"))

    cal = sub.add_parser("calibrate", help="fit budget coefficients from probe runs")
    cal.add_argument("--probe-sizes", type=int, nargs="+", default=[2000, 4000, 8000, 16000, 32000])
    cal.add_argument("--max-residual", type=float, default=0.05)
    cal.set_defaults(fn=cmd_calibrate)
    return p


def _fold_flags(args) -> None:
    if not hasattr(args, "set"):
        return
    if args.seed is not None:
        args.set.append(f"run.seed={args.seed}")
    if args.model is not None:
        args.set.append(f"model.family={args.model}")
    if args.layers is not None:
        args.set.append(f"model.layers={args.layers}")
    if args.out is not None:
        args.set.append(f"output.dir={args.out}")


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        _fold_flags(args)
        return args.fn(args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except MissingPower as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (blocks.Infeasible, blocks.BudgetExceeded, blocks.CalibrationUnstable, blocks.LCPFError,
            graph.GraphError, FormulaError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
