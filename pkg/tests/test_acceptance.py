"""Acceptance suite: the thirteen exit criteria of the build, at their stated tolerances.

Each test prints one ``[PASS]``/``[FAIL]`` line; the lines are repeated in the
pytest terminal summary. Run standalone with ``python3 tests/test_acceptance.py``.
"""

import math
import os
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest
import yaml
from scipy import stats

from propulsion_lab import ntk as N
from propulsion_lab import tensor as T
from propulsion_lab.data import blobs
from propulsion_lab.metrics import f1_from_counts, mcc_from_counts, pearson, spearman
from propulsion_lab.model import ModelSpec, build
from propulsion_lab.peft import (
    count_trainable,
    lora_apply,
    make_adapter_set,
    materialize_effective_weight,
    multi_propulsion_apply,
    propulsion_apply,
)
from propulsion_lab.tensor import Parameter, Tensor
from propulsion_lab.trainer import TrainConfig, cross_entropy, mse, train

pytestmark = pytest.mark.acceptance

RESULTS = []


def report(num, title, ok, detail, started):
    line = f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {title}: {detail} ({time.perf_counter() - started:.1f}s)"
    RESULTS.append(line)
    print(line)
    return ok


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


# ----------------------------------------------------------------------------
# 1. identity at init
# ----------------------------------------------------------------------------


def random_spec(rng, seed):
    kind = ["linear", "mlp", "transformer"][seed % 3]
    heads = int(rng.integers(1, 4))
    return ModelSpec(
        kind=kind,
        depth=int(rng.integers(1, 4)),
        d_model=heads * int(rng.integers(2, 6)),
        d_ff=int(rng.integers(2, 17)),
        n_heads=heads,
        vocab_size=int(rng.integers(5, 30)),
        max_seq=int(rng.integers(2, 8)),
        n_classes=int(rng.integers(2, 5)),
        d_in=int(rng.integers(2, 10)),
        seed=seed,
    )


def random_inputs(spec, rng, n=4):
    if spec.kind == "transformer":
        return rng.integers(0, spec.vocab_size, (n, spec.max_seq))
    return rng.standard_normal((n, spec.input_dim))


# multi-propulsion with L2 pooling is excluded: its root-mean-square of identical
# candidates returns |V|, which is not V wherever V < 0
ADAPTER_VARIANTS = [
    ("none", {}),
    ("propulsion", {"degree": 1}),
    ("propulsion", {"degree": 15}),
    ("multi_propulsion", {"p": 3, "pooling": "average", "degree": 2}),
    ("multi_propulsion", {"p": 4, "pooling": "max"}),
    ("multi_propulsion", {"p": 2, "pooling": "min"}),
    ("lora", {"rank": 1}),
    ("bitfit", {}),
    ("full_ft", {}),
]


def test_01_identity_at_init():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst, cases = 0.0, 0
    for seed in range(20):
        spec = random_spec(rng, seed)
        model = build(spec)
        x = random_inputs(spec, rng)
        base = model.forward(x).data
        for kind, kw in ADAPTER_VARIANTS:
            aset = make_adapter_set(model, kind, "All", seed=seed, **kw)
            worst = max(worst, float(np.abs(model.forward(x, aset).data - base).max()))
            cases += 1
    ok = worst <= 1e-12
    assert report(1, "identity at init", ok, f"{cases} spec/adapter cases, max |diff| = {worst:.2e} <= 1e-12", t0)


# ----------------------------------------------------------------------------
# 2. gradient correctness
# ----------------------------------------------------------------------------


def grad_error(loss_fn, params):
    for p in params:
        p.grad = None
    T.backward(loss_fn(), params)
    analytic = np.concatenate([p.grad.reshape(-1) for p in params])
    numeric = np.concatenate([T.finite_diff_grad(loss_fn, p, 1e-6).reshape(-1) for p in params])
    return rel_err(analytic, numeric)


def test_02_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(200)
    errors = {}

    def log(key, err):
        errors.setdefault(key, []).append(err)

    for k in (1, 2, 15, 55):
        for _ in range(75):
            s, d = rng.integers(1, 5, 2)
            v = Parameter(rng.standard_normal((s, d)), trainable=True)
            z = Parameter(1.0 + 0.01 * rng.standard_normal(d), trainable=True)
            w = Tensor(rng.standard_normal((s, d)))
            log(f"propulsion k={k}", grad_error(lambda: T.sum(T.ew_mul(propulsion_apply(v, z, k), w)), [v, z]))
    for _ in range(100):
        s, d_in, d_out = rng.integers(1, 6, 3)
        r = int(rng.integers(1, min(d_in, d_out) + 1))
        x, wt = Tensor(rng.standard_normal((s, d_in))), Tensor(rng.standard_normal((d_in, d_out)))
        a = Parameter(rng.standard_normal((d_in, r)), trainable=True)
        b = Parameter(rng.standard_normal((r, d_out)), trainable=True)
        c = Tensor(rng.standard_normal((s, d_out)))
        scaling = float(rng.uniform(0.5, 2.0))
        log("lora", grad_error(lambda: T.sum(T.ew_mul(T.tanh(lora_apply(x, wt, a, b, scaling)), c)), [a, b]))
    for _ in range(50):
        n, classes = rng.integers(1, 8), rng.integers(2, 6)
        logits = Parameter(2 * rng.standard_normal((n, classes)), trainable=True)
        labels = rng.integers(0, classes, n)
        log("cross_entropy", grad_error(lambda: cross_entropy(logits, labels), [logits]))
    for _ in range(50):
        n = rng.integers(1, 10)
        pred = Parameter(rng.standard_normal(n), trainable=True)
        target = rng.standard_normal(n)
        log("mse", grad_error(lambda: mse(pred, target), [pred]))
    # end to end: propulsion z through a transformer and the training loss
    for k in (1, 2, 15, 55):
        spec = ModelSpec(kind="transformer", depth=1, d_model=4, d_ff=6, n_heads=2, vocab_size=9, max_seq=3, seed=k)
        model = build(spec)
        aset = make_adapter_set(model, "propulsion", "All", degree=k)
        for p in aset.parameters():
            p.data = 1.0 + 0.005 * rng.standard_normal(p.shape)
        ids, y = rng.integers(0, 9, (3, 3)), rng.integers(0, 2, 3)
        log(f"model k={k}", grad_error(lambda: cross_entropy(model.forward(ids, aset), y), aset.parameters()))

    total = sum(len(v) for v in errors.values())
    worst = max(max(v) for v in errors.values())
    ok = total >= 500 and worst <= 1e-5
    per = ", ".join(f"{key} {max(v):.1e}" for key, v in errors.items())
    assert report(2, "gradient correctness", ok, f"{total} probes, worst rel err {worst:.2e} <= 1e-5 [{per}]", t0)


# ----------------------------------------------------------------------------
# 3. effective weight
# ----------------------------------------------------------------------------


def test_03_effective_weight():
    t0 = time.perf_counter()
    rng = np.random.default_rng(300)
    worst = 0.0
    for i in range(1000):
        n, d_in, d_out = rng.integers(1, 9, 3)
        k = [0, 1, 2, 15, 55][i % 5]
        w, x = rng.standard_normal((d_in, d_out)), rng.standard_normal((n, d_in))
        z = 1.0 + 0.02 * rng.standard_normal(d_out)
        lhs = x @ materialize_effective_weight(w, z, k)
        rhs = propulsion_apply(Tensor(x @ w), Tensor(z), k).data
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    ok = worst <= 1e-10
    assert report(3, "effective weight", ok, f"1000 instances, max |diff| = {worst:.2e} <= 1e-10", t0)


# ----------------------------------------------------------------------------
# 4. degree scaling
# ----------------------------------------------------------------------------


def z_grad(model, x, y, k, mask=None):
    aset = make_adapter_set(model, "propulsion", "All", degree=k)
    params = aset.parameters()
    T.backward(cross_entropy(model.forward(x, aset, mask=mask), y), params)
    return np.concatenate([p.grad for p in params])


def test_04_degree_scaling():
    t0 = time.perf_counter()
    rng = np.random.default_rng(400)
    worst = 0.0
    specs = [
        ModelSpec(kind="mlp", depth=3, d_model=12, d_in=5, n_classes=3, seed=1),
        ModelSpec(kind="transformer", depth=2, d_model=8, d_ff=12, n_heads=2, vocab_size=15, max_seq=5, seed=2),
    ]
    for spec in specs:
        model = build(spec)
        x = random_inputs(spec, rng, 6)
        y = rng.integers(0, spec.n_classes, 6)
        g1 = z_grad(model, x, y, 1)
        for k in (2, 15, 55):
            worst = max(worst, rel_err(z_grad(model, x, y, k), k * g1))
    ok = worst <= 1e-8
    assert report(4, "degree-gradient scaling", ok, f"k in {{2,15,55}}, worst rel err {worst:.2e} <= 1e-8", t0)


# ----------------------------------------------------------------------------
# 5. parameter budgets
# ----------------------------------------------------------------------------


def test_05_parameter_budgets():
    t0 = time.perf_counter()
    failures = []
    for d in (64, 768):
        for r in (1, 8):
            table = {
                "propulsion": d,
                "lora": 2 * d * r,
                "adalora": 2 * d * r + r * r,
                "loha": 4 * d * r,
                "ft": d * d,
                "ia3": 3 * d,
            }
            for method, expected in table.items():
                got = count_trainable(method, [(d, d)], r=r).total
                if got != expected:
                    failures.append(f"{method} d={d} r={r}: {got} != {expected}")
    prop = count_trainable("propulsion", [(768, 768)]).total
    ft = count_trainable("ft", [(768, 768)]).total
    lora = count_trainable("lora", [(768, 768)], r=8).total
    ratio = Fraction(prop, ft)
    if ratio != Fraction(1, 768):
        failures.append(f"propulsion:ft = {ratio}")
    if not lora / prop > 10:
        failures.append(f"lora/propulsion = {lora / prop}")
    ok = not failures
    detail = "24 table entries exact, propulsion:FT = 1/768, LoRA(r=8):propulsion = 16" if ok else "; ".join(failures)
    assert report(5, "parameter budgets", ok, detail, t0)


# ----------------------------------------------------------------------------
# 6. NTK closed form
# ----------------------------------------------------------------------------


def test_06_ntk_closed_form():
    t0 = time.perf_counter()
    rng = np.random.default_rng(600)
    worst = 0.0
    for seed, (d_in, d_out, n) in enumerate([(4, 3, 5), (16, 16, 8), (32, 64, 10), (64, 128, 12)]):
        model = build(ModelSpec(kind="linear", depth=1, d_model=d_out, d_in=d_in, n_classes=d_out, seed=seed))
        aset = make_adapter_set(model, "propulsion")
        x = rng.standard_normal((n, d_in))
        theta = model.params["layer1.weight"].data
        kf = N.compute_ntk(model, aset, x, "full").matrix
        kp = N.compute_ntk(model, aset, x, "propulsion").matrix
        worst = max(worst, rel_err(kf, d_out * (x @ x.T)), rel_err(kp, (x @ theta) @ (x @ theta).T))
    ok = worst <= 1e-8
    assert report(6, "NTK closed form", ok, f"full and propulsion kernels, worst rel err {worst:.2e} <= 1e-8", t0)


# ----------------------------------------------------------------------------
# 7. NTK approximation
# ----------------------------------------------------------------------------


def test_07_kernel_gap():
    t0 = time.perf_counter()
    medians = {d: float(np.median([N.kernel_gap(d, seed=s) for s in range(20)])) for d in (32, 128, 512)}
    m = list(medians.values())
    ok = m[0] > m[1] > m[2] and m[2] <= 0.25
    detail = "median normalized max |K^F - K^P|: " + ", ".join(f"d={d} {v:.3f}" for d, v in medians.items())
    assert report(7, "NTK approximation", ok, detail + " (strictly decreasing, <= 0.25 at 512)", t0)


# ----------------------------------------------------------------------------
# 8. JL bound
# ----------------------------------------------------------------------------


def test_08_jl_bound():
    t0 = time.perf_counter()
    records = [N.jl_empirical(d, 10_000, eps, seed=800 + i) for i, (d, eps) in enumerate([(64, 0.5), (128, 0.5), (128, 0.3)])]
    expected = 4 * math.exp(-(0.25 - 0.125) * 128 / 4)
    ok = all(r.passed and r.trials == 10_000 for r in records) and abs(records[1].bound - 0.07326) < 5e-6
    ok = ok and abs(records[1].bound - expected) <= 1e-15
    detail = ", ".join(f"(d={r.d}, eps={r.eps}) {r.empirical:.4f} <= {r.bound:.4f}+{r.margin:.4f}" for r in records)
    assert report(8, "JL bound", ok, detail, t0)


# ----------------------------------------------------------------------------
# 9. kernel behavior
# ----------------------------------------------------------------------------


def residual_exact_zero():
    # dyadic weights, inputs and step keep the arithmetic exact
    rng = np.random.default_rng(900)
    worst = 0.0
    for seed in range(10):
        model = build(ModelSpec(kind="linear", depth=1, d_model=6, d_in=4, n_classes=6, seed=seed))
        model.params["layer1.weight"].data = rng.integers(-8, 9, (4, 6)) / 8.0
        aset = make_adapter_set(model, "propulsion", degree=1)
        x = rng.integers(-4, 5, (5, 4)) / 4.0
        before = aset.state()
        params = aset.parameters()
        T.backward(T.sum(model.forward(x, aset)), params)
        after = {p.name: before[p.name] - 0.0625 * p.grad for p in params}
        worst = max(worst, N.linearization_residual(model, aset, x, before, after).absolute)
    return worst


def residual_halving():
    rng = np.random.default_rng(901)
    ratios = []
    for seed in range(5):
        model = build(ModelSpec(kind="mlp", depth=2, d_model=16, d_in=4, seed=seed))
        aset = make_adapter_set(model, "propulsion", degree=2)
        x = rng.standard_normal((6, 4))
        y = rng.integers(0, 2, 6)
        start = aset.state()
        params = aset.parameters()
        T.backward(cross_entropy(model.forward(x, aset), y), params)
        grad = {p.name: p.grad.copy() for p in params}
        res = [
            N.linearization_residual(model, aset, x, start, {n: start[n] - lr * grad[n] for n in start}).absolute
            for lr in (0.1, 0.05)
        ]
        ratios.append(res[0] / res[1])
    return min(ratios)


def test_09_kernel_behavior():
    t0 = time.perf_counter()
    zero = residual_exact_zero()
    ratio = residual_halving()
    wins = 0
    for seed in range(20):
        _, wide = N.drift_run(512, seed=seed, steps=100, lr=1e-3, record_every=0)
        _, narrow = N.drift_run(8, seed=seed, steps=100, lr=1e-3, record_every=0)
        wins += wide[-1] < narrow[-1]
    ok = zero == 0.0 and ratio >= 3.5 and wins >= 18
    detail = f"(a) linear-in-z residual {zero!r}, k=2 halving ratio min {ratio:.2f} >= 3.5; (b) wide drifts less in {wins}/20 >= 18"
    assert report(9, "kernel behavior", ok, detail, t0)


# ----------------------------------------------------------------------------
# 10. end-to-end convergence
# ----------------------------------------------------------------------------


def test_10_convergence():
    t0 = time.perf_counter()
    spec = ModelSpec(kind="mlp", depth=2, d_model=32, d_in=8, n_classes=2, seed=0)
    ds = blobs(200, 8, 2, 3.0, seed=0)
    cfg = TrainConfig(epochs=200, learning_rate=1e-2, seed=0)
    finals, first = {}, {}
    for kind in ("propulsion", "full_ft"):
        model = build(spec)
        res = train(model, make_adapter_set(model, kind, "All"), ds, cfg)
        acc = [row["train_accuracy"] for row in res.history]
        finals[kind] = acc[-1]
        first[kind] = next((i + 1 for i, a in enumerate(acc) if a >= 0.95), None)
    ok = first["propulsion"] is not None and finals["full_ft"] >= finals["propulsion"]
    detail = (
        f"Propulsion(All) reaches 0.95 at epoch {first['propulsion']}, final {finals['propulsion']:.3f}; "
        f"FullFT final {finals['full_ft']:.3f}"
    )
    assert report(10, "end-to-end convergence", ok, detail, t0)


# ----------------------------------------------------------------------------
# 11. pooling
# ----------------------------------------------------------------------------


def brute_pool(cands, mode):
    p = len(cands)
    out = np.empty_like(cands[0])
    for idx in np.ndindex(out.shape):
        vals = [float(c[idx]) for c in cands]
        if mode == "average":
            out[idx] = math.fsum(vals) / p
        elif mode == "max":
            out[idx] = max(vals)
        elif mode == "min":
            out[idx] = min(vals)
        else:
            out[idx] = math.sqrt(math.fsum(v * v for v in vals) / p)
    return out


def test_11_pooling():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1100)
    worst = 0.0
    identical_exact = True
    for i in range(1000):
        s, d = rng.integers(1, 5, 2)
        p = int(rng.integers(1, 6))
        k = int(rng.integers(0, 4))
        v = rng.standard_normal((s, d))
        zs = [1.0 + 0.3 * rng.standard_normal(d) for _ in range(p)]
        cands = [v * z**k for z in zs]
        for mode in ("average", "max", "min", "l2"):
            got = multi_propulsion_apply(Tensor(v), [Tensor(z) for z in zs], k, mode).data
            want = cands[0] if p == 1 else brute_pool(cands, mode)
            worst = max(worst, float(np.max(np.abs(got - want) / np.maximum(1.0, np.abs(want)))))
        z = Tensor(zs[0])
        same = multi_propulsion_apply(Tensor(v), [z] * (p + 1), k, "average").data
        identical_exact &= np.array_equal(same, propulsion_apply(Tensor(v), z, k).data)
    ok = worst <= 1e-12 and identical_exact
    detail = f"1000 instances x 4 modes, worst err {worst:.1e} <= 1e-12; Average of identical vectors bit-exact: {identical_exact}"
    assert report(11, "pooling correctness", ok, detail, t0)


# ----------------------------------------------------------------------------
# 12. metric formulas
# ----------------------------------------------------------------------------

# (TP, TN, FP, FN) -> MCC and F1 evaluated by hand
CONFUSION_FIXTURES = [
    ((5, 3, 2, 1), 13 / math.sqrt(840), 10 / 13),
    ((1, 1, 1, 1), 0.0, 0.5),
    ((10, 10, 0, 0), 1.0, 1.0),
    ((0, 0, 10, 10), -1.0, 0.0),
    ((6, 2, 1, 3), 9 / math.sqrt(7 * 9 * 3 * 5), 12 / 16),
    ((50, 40, 5, 5), 1975 / math.sqrt(55 * 55 * 45 * 45), 100 / 110),
    ((3, 7, 0, 2), 21 / math.sqrt(3 * 5 * 7 * 9), 6 / 8),
    ((8, 0, 2, 0), 0.0, 16 / 18),  # TN + FN = 0: degenerate MCC, reported as 0
    ((2, 9, 4, 1), 14 / math.sqrt(6 * 3 * 13 * 10), 4 / 9),
    ((4, 4, 4, 4), 0.0, 0.5),
]

# (x, y, pearson, spearman) by hand
RANK_FIXTURES = [
    ([1, 2, 3], [3, 2, 1], -1.0, -1.0),
    ([1, 2, 3, 4, 5], [2, 4, 6, 8, 10], 1.0, 1.0),
    ([1, 2, 3, 4], [1, 3, 2, 4], 0.8, 0.8),
    ([1, 2, 3, 4, 5], [5, 6, 7, 8, 7], 6 / math.sqrt(52), 8 / math.sqrt(95)),  # y ranks with a tie: [1, 2, 3.5, 5, 3.5]
]


def counts_to_arrays(tp, tn, fp, fn):
    pred = np.array([1] * tp + [0] * tn + [1] * fp + [0] * fn)
    target = np.array([1] * tp + [0] * tn + [0] * fp + [1] * fn)
    return pred, target


def test_12_metric_formulas():
    t0 = time.perf_counter()
    from propulsion_lab.metrics import f1, mcc

    worst = 0.0
    for counts, m_want, f_want in CONFUSION_FIXTURES:
        pred, target = counts_to_arrays(*counts)
        worst = max(worst, abs(mcc_from_counts(*counts)[0] - m_want), abs(f1_from_counts(*counts) - f_want))
        worst = max(worst, abs(mcc(pred, target)[0] - m_want), abs(f1(pred, target) - f_want))
    for x, y, r_want, s_want in RANK_FIXTURES:
        worst = max(worst, abs(pearson(x, y) - r_want), abs(spearman(x, y) - s_want))
        # cross-check against scipy's implementations
        worst = max(worst, abs(pearson(x, y) - stats.pearsonr(x, y)[0]), abs(spearman(x, y) - stats.spearmanr(x, y)[0]))
    ok = worst <= 1e-12
    detail = f"10 confusion fixtures + {len(RANK_FIXTURES)} rank fixtures, max |err| {worst:.1e} <= 1e-12"
    assert report(12, "metric formulas", ok, detail, t0)


# ----------------------------------------------------------------------------
# 13. determinism
# ----------------------------------------------------------------------------


def test_13_cli_determinism(tmp_path):
    t0 = time.perf_counter()
    config = {
        "seed": 11,
        "model": {"kind": "transformer", "depth": 1, "d_model": 8, "d_ff": 16, "n_heads": 2, "vocab_size": 16, "max_seq": 6},
        "adapter": {"kind": "propulsion", "sites": "All", "degree": 2},
        "train": {"learning_rate": 0.05, "epochs": 4, "batch_size": 16},
        "data": {"generator": "keywords", "n": 64, "seq_len": 6, "vocab_size": 16},
        "val_fraction": 0.25,
    }
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(config))
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        cmd = [sys.executable, "-m", "propulsion_lab.cli", "train", "--config", str(path), "--out", str(out)]
        subprocess.run(cmd, check=True, capture_output=True, env=dict(os.environ))
        outs.append((out / "metrics.csv").read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    assert report(13, "CLI determinism", ok, f"two invocations, metrics.csv byte-identical ({len(outs[0])} bytes)", t0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
