"""Command-line runner: ``propulsion-lab {train,sweep,ntk,budget} --config FILE``.

Every command is a function of (config, seed) to output bytes; the only
exception is the ``wall_clock_s`` field of ``summary.json``.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ntk as N
from . import tensor as T
from .config import ExperimentConfig, load_config, parse_config
from .data import Dataset, load_dataset
from .errors import ConfigError, DataError, DivergedError, LabError
from .model import DTYPES, FrozenModel, build, enumerate_sites, expand_group
from .peft import AdapterSet, count_trainable, make_adapter_set
from .reporting import write_grid, write_json, write_rows
from .trainer import TrainConfig, make_optimizer, task_loss, train


@dataclass
class RunRecord:
    config_hash: str
    out_dir: str | None
    history: list = field(default_factory=list)
    budget: dict = field(default_factory=dict)
    ntk: dict | None = None
    wall_clock: float = 0.0
    initial_loss: float | None = None
    steps_to_threshold: int | None = None
    final: dict = field(default_factory=dict)


# ----------------------------------------------------------------------------
# shared setup
# ----------------------------------------------------------------------------


def resolve_sites(sites, groups):
    """Union of site groups, in model order."""
    chosen = set()
    for g in groups:
        chosen.update(s.name for s in expand_group(sites, g))
    return [s for s in sites if s.name in chosen]


def build_run(cfg: ExperimentConfig):
    """Model, dataset and adapter set for a config."""
    spec = cfg.model
    model = build(spec, dtype=DTYPES[cfg.precision])
    ds = load_dataset(cfg.data, seed=cfg.seed, val_fraction=cfg.val_fraction, vocab_size=spec.vocab_size, max_seq=spec.max_seq)
    check_compatible(cfg, ds)
    a = cfg.adapter
    targets = resolve_sites(model.sites, a.groups)
    clamp = a.clamp_range if a.clamp else None
    aset = make_adapter_set(
        model, a.kind, targets, degree=a.degree, p=a.p, pooling=a.pooling, rank=a.rank, alpha=a.alpha, seed=cfg.seed, clamp=clamp
    )
    return model, ds, aset


def check_compatible(cfg: ExperimentConfig, ds: Dataset):
    spec = cfg.model
    if (spec.kind == "transformer") != ds.is_tokens:
        need = "token sequences" if spec.kind == "transformer" else "numeric features"
        raise ConfigError(f"model kind {spec.kind!r} needs {need}", "data")
    if ds.is_tokens:
        if ds.inputs.shape[1] > spec.max_seq:
            raise ConfigError(f"sequences of length {ds.inputs.shape[1]} exceed max_seq", "model.max_seq")
        if ds.inputs.max() >= spec.vocab_size:
            raise ConfigError("token ids exceed the vocabulary", "model.vocab_size")
    elif ds.inputs.shape[1] != spec.input_dim:
        raise ConfigError(f"dataset has {ds.inputs.shape[1]} features, model expects {spec.input_dim}", "model.d_in")
    if ds.task == "regression":
        if cfg.train.loss != "mse":
            raise ConfigError("regression data needs loss: mse", "train.loss")
    elif ds.n_classes > spec.n_classes:
        raise ConfigError(f"dataset has {ds.n_classes} classes, model head has {spec.n_classes}", "model.n_classes")


def budget_of(model: FrozenModel, aset: AdapterSet, cfg: ExperimentConfig) -> dict:
    """Trainable count actually allocated, next to the formula count where one exists."""
    a = cfg.adapter
    sites = [model.site(n) for n in aset.adapters] if aset.adapters else []
    formula = None
    if a.kind == "propulsion":
        formula = count_trainable("propulsion", sites).total
    elif a.kind == "multi_propulsion":
        formula = count_trainable("multi_propulsion", sites, p=a.p).total
    elif a.kind == "lora":
        formula = count_trainable("lora", sites, r=a.rank).total
    elif a.kind == "bitfit":
        formula = int(sum(model.params[n].size for n in model.bias_names()))
    elif a.kind == "full_ft":
        formula = model.n_params()
    n = aset.n_trainable()
    return {
        "method": a.kind,
        "trainable": n,
        "formula_total": formula,
        "base_params": model.n_params(),
        "fraction": n / model.n_params(),
    }


def _prepare_out(out):
    if out is not None:
        os.makedirs(out, exist_ok=True)
    return out


def _write_lock(cfg, out):
    with open(os.path.join(out, "config.lock"), "w") as fh:
        fh.write(cfg.dump())


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, out=None) -> RunRecord:
    """Build, attach, train and report one run."""
    t0 = time.perf_counter()
    model, ds, aset = build_run(cfg)
    out = _prepare_out(out if out is not None else cfg.output)
    result = train(model, aset, ds, cfg.train)
    final = dict(result.history[-1]) if result.history else {}
    rec = RunRecord(
        config_hash=cfg.hash(),
        out_dir=out,
        history=result.history,
        budget=budget_of(model, aset, cfg),
        initial_loss=result.initial_loss,
        steps_to_threshold=result.steps_to_threshold,
        final=final,
    )
    rec.wall_clock = time.perf_counter() - t0
    if out is not None:
        write_rows(os.path.join(out, "metrics.csv"), result.history)
        aset.save(os.path.join(out, "adapters.ckpt"), {"config_hash": rec.config_hash})
        _write_lock(cfg, out)
        write_json(os.path.join(out, "summary.json"), _summary(rec, cfg))
    return rec


def _summary(rec: RunRecord, cfg: ExperimentConfig) -> dict:
    return {
        "config_hash": rec.config_hash,
        "seed": cfg.seed,
        "epochs": len(rec.history),
        "initial_loss": rec.initial_loss,
        "final": rec.final,
        "steps_to_threshold": rec.steps_to_threshold,
        "threshold": cfg.train.threshold,
        "budget": rec.budget,
        "wall_clock_s": rec.wall_clock,
    }


def _axis_label(value):
    return ",".join(value) if isinstance(value, list) else str(value)


def _sweep_one(args):
    raw, out = args
    cfg = parse_config(raw)
    return cmd_train(cfg, out)


def cmd_sweep(cfg: ExperimentConfig, out=None, jobs=1):
    """One training run per point of the Cartesian product of the sweep axes.

    Runs share the config seed so that axis values are compared on identical
    data, initial weights and batch order. Returns ``(records, summary_rows)``.
    """
    if not cfg.sweep:
        raise ConfigError("no sweep axes given", "sweep")
    out = _prepare_out(out if out is not None else cfg.output)
    axes = list(cfg.sweep)
    points = [dict(zip(axes, combo)) for combo in itertools.product(*(cfg.sweep[a] for a in axes))]
    tasks = []
    for point in points:
        sub = cfg.with_overrides(**point)
        name = "_".join(f"{a}={_axis_label(v)}" for a, v in point.items()).replace("/", "-")
        tasks.append((sub.to_dict(), None if out is None else os.path.join(out, "runs", name)))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_sweep_one, tasks))
    else:
        records = [_sweep_one(t) for t in tasks]

    metric = "train_pearson" if "train_pearson" in records[0].final and "train_accuracy" not in records[0].final else "train_accuracy"
    rows = []
    for point, rec in zip(points, records):
        row = {a: _axis_label(v) for a, v in point.items()}
        row.update(
            {
                "final_loss": rec.final.get("loss"),
                metric: rec.final.get(metric),
                "steps_to_threshold": rec.steps_to_threshold,
                "initial_loss": rec.initial_loss,
                "n_trainable": rec.budget["trainable"],
                "config_hash": rec.config_hash,
            }
        )
        rows.append((tuple(_sort_key(v) for v in point.values()), row))
    rows = [r for _, r in sorted(rows, key=lambda kv: kv[0])]
    summary = {"axes": {a: cfg.sweep[a] for a in axes}, "runs": len(rows), "config_hash": cfg.hash()}
    if "degree" in axes:
        summary["degree_trend"] = degree_trend(rows, axes)
    if out is not None:
        write_rows(os.path.join(out, "summary.csv"), rows)
        _write_lock(cfg, out)
        write_json(os.path.join(out, "summary.json"), summary)
    return records, rows


def _sort_key(v):
    if isinstance(v, (int, float)):
        return (0, float(v), "")
    return (1, 0.0, _axis_label(v))


def degree_trend(rows, axes):
    """Per group of the non-degree axes: do lower degrees reach the threshold in no more steps?

    Runs that never reach it count as infinitely slow. Reported, never enforced.
    """
    others = [a for a in axes if a != "degree"]
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[a] for a in others), []).append(row)
    out = []
    for key, grp in groups.items():
        grp = sorted(grp, key=lambda r: float(r["degree"]))
        steps = [r["steps_to_threshold"] for r in grp]
        as_num = [float("inf") if s is None else s for s in steps]
        out.append(
            {
                "group": dict(zip(others, key)),
                "degrees": [int(r["degree"]) for r in grp],
                "steps_to_threshold": steps,
                "lower_degree_no_slower": all(a <= b for a, b in zip(as_num, as_num[1:])),
            }
        )
    return out


def _probe_set(cfg: ExperimentConfig, ds: Dataset):
    n = cfg.ntk.probes
    if n > N.MAX_PROBES:
        raise ConfigError(f"at most {N.MAX_PROBES} probes, got {n}", "ntk.probes")
    tr = ds.subset("train")
    if len(tr) < n:
        raise DataError(f"{n} probes requested but the training split has {len(tr)} items")
    probes = tr.inputs[:n]
    mask = None if tr.mask is None else tr.mask[:n]
    if cfg.ntk.unit_probes and not ds.is_tokens:
        probes = probes / np.linalg.norm(probes, axis=1, keepdims=True)
    return probes, mask, tr


def cmd_ntk(cfg: ExperimentConfig, out=None) -> RunRecord:
    """Full and propulsion kernels at init, then Jacobian drift and linearization residuals along training.

    The kernels use a propulsion adapter set on the configured sites
    (pooled when ``adapter.kind`` is ``multi_propulsion``). Training runs
    ``ntk.steps`` full-batch steps on the training split with dropout off.
    """
    t0 = time.perf_counter()
    a = cfg.adapter
    kind = "multi_propulsion" if a.kind == "multi_propulsion" else "propulsion"
    spec = cfg.model
    model = build(spec, dtype=DTYPES[cfg.precision])
    ds = load_dataset(cfg.data, seed=cfg.seed, val_fraction=cfg.val_fraction, vocab_size=spec.vocab_size, max_seq=spec.max_seq)
    check_compatible(cfg, ds)
    out = _prepare_out(out if out is not None else cfg.output)
    aset = make_adapter_set(
        model, kind, resolve_sites(model.sites, a.groups), degree=a.degree, p=a.p, pooling=a.pooling, seed=cfg.seed
    )
    probes, mask, tr = _probe_set(cfg, ds)

    k_full = N.compute_ntk(model, aset, probes, "full", mask)
    k_prop = N.compute_ntk(model, aset, probes, "propulsion", mask)
    dist = N.ntk_distance(k_full, k_prop, normalize=True)

    lr = cfg.train.learning_rate if cfg.ntk.learning_rate is None else cfg.ntk.learning_rate
    tcfg = TrainConfig(
        learning_rate=lr,
        weight_decay=cfg.train.weight_decay,
        dropout=0.0,
        optimizer=cfg.ntk.optimizer,
        loss=cfg.train.loss,
        decay_toward_one=cfg.train.decay_toward_one,
    )
    params = aset.parameters()
    opt = make_optimizer(params, tcfg)
    snap0 = N.jacobian_snapshot(model, aset, probes, 0, mask=mask)
    drift = [{"step": 0, "loss": None, "relative_drift": 0.0, "residual_abs": 0.0, "residual_rel": 0.0}]
    for step in range(1, cfg.ntk.steps + 1):
        before = aset.state()
        for p in params:
            p.grad = None
        loss = task_loss(model.forward(tr.inputs, aset, mask=tr.mask), tr.targets, tcfg)
        if not np.isfinite(loss.item()):
            raise DivergedError(step, loss.item())
        T.backward(loss, params)
        opt.step()
        after = aset.state()
        res = N.linearization_residual(model, aset, probes, before, after, mask)
        _, rel = N.jacobian_drift(snap0, N.jacobian_snapshot(model, aset, probes, step, mask=mask))
        drift.append(
            {"step": step, "loss": loss.item(), "relative_drift": rel, "residual_abs": res.absolute, "residual_rel": res.relative}
        )

    jl = None
    if cfg.ntk.jl is not None:
        j = cfg.ntk.jl
        jl = N.jl_empirical(j.d, j.trials, j.eps, j.c, seed=cfg.seed).as_dict()

    ntk_info = {
        "probe_id": k_full.probe_id,
        "n_probes": len(probes),
        "kernel_full_valid": k_full.is_valid(),
        "kernel_propulsion_valid": k_prop.is_valid(),
        "kernel_full_min_eig": k_full.min_eigenvalue(),
        "kernel_propulsion_min_eig": k_prop.min_eigenvalue(),
        "normalized_max_diff": dist.max,
        "normalized_frobenius_diff": dist.frobenius,
        "final_relative_drift": drift[-1]["relative_drift"],
        "max_residual_abs": max(r["residual_abs"] for r in drift),
        "jl": jl,
    }
    rec = RunRecord(config_hash=cfg.hash(), out_dir=out, ntk=ntk_info, budget=budget_of(model, aset, cfg))
    rec.history = drift
    rec.wall_clock = time.perf_counter() - t0
    if out is not None:
        write_grid(os.path.join(out, "kernel_F.csv"), k_full.matrix)
        write_grid(os.path.join(out, "kernel_P.csv"), k_prop.matrix)
        write_grid(os.path.join(out, "kernel_diff.csv"), dist.diff)
        write_rows(os.path.join(out, "drift.csv"), drift)
        if jl is not None:
            write_json(os.path.join(out, "jl.json"), jl)
        _write_lock(cfg, out)
        write_json(
            os.path.join(out, "summary.json"),
            {"config_hash": rec.config_hash, "ntk": ntk_info, "wall_clock_s": rec.wall_clock},
        )
    return rec


def cmd_budget(cfg: ExperimentConfig, out=None):
    """Per-site and total trainable counts for each configured method; no weights are drawn."""
    out = _prepare_out(out if out is not None else cfg.output)
    spec = cfg.model
    sites = resolve_sites(enumerate_sites(spec), cfg.adapter.groups)
    b = cfg.budget
    rows, totals = [], {}
    for method in b.methods:
        pb = count_trainable(method, sites, r=b.rank, p=b.p, prompt_len=b.prompt_len, n_layers=spec.depth, d_model=spec.d_model)
        by_name = {s.name: s for s in sites}
        for name, count in pb.per_site:
            s = by_name[name]
            rows.append({"method": pb.method, "formula": pb.formula, "site": name, "d_in": s.d_in, "d_out": s.d_out, "count": count})
        rows.append({"method": pb.method, "formula": pb.formula, "site": "TOTAL", "d_in": None, "d_out": None, "count": pb.total})
        totals[pb.method] = pb.total
    if out is not None:
        write_rows(os.path.join(out, "budget.csv"), rows)
        _write_lock(cfg, out)
        ref = totals.get("propulsion")
        write_json(
            os.path.join(out, "summary.json"),
            {
                "config_hash": cfg.hash(),
                "sites": len(sites),
                "totals": totals,
                "ratio_to_propulsion": {m: (t / ref if ref else None) for m, t in totals.items()},
            },
        )
    return rows, totals


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "ntk": cmd_ntk, "budget": cmd_budget}


def build_parser():
    parser = argparse.ArgumentParser(prog="propulsion-lab", description="Propulsion PEFT desk lab")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML experiment file")
    parser.add_argument("--out", default=None, help="output directory (default: config 'output', else runs/<hash>)")
    parser.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    parser.add_argument("--jobs", type=int, default=1, help="parallel sweep runs")
    parser.add_argument("--precision", choices=sorted(DTYPES), default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed)
        if args.precision is not None:
            raw = cfg.to_dict()
            raw["precision"] = args.precision
            cfg = parse_config(raw)
        if args.jobs < 1:
            raise ConfigError("must be >= 1", "--jobs")
        out = args.out or cfg.output or os.path.join("runs", cfg.hash())
        if args.command == "sweep":
            cmd_sweep(cfg, out, args.jobs)
        else:
            COMMANDS[args.command](cfg, out)
    except LabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
