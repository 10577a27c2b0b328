"""Empirical neural tangent kernels and kernel-regime diagnostics.

The scalar read-out used throughout is the sum of a model's logits, so one
probe input contributes one gradient row to a Jacobian and the kernel is
``K = J @ J.T``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError, ResourceLimitError
from .model import FrozenModel, ModelSpec, build
from .peft import (
    AdapterSet,
    MultiPropulsionAdapter,
    PropulsionAdapter,
    make_adapter_set,
)

MAX_PROBES = 64
MAX_JACOBIAN_ENTRIES = 64 * 512 * 512 + 64 * 4096


@dataclass
class KernelMatrix:
    matrix: np.ndarray
    subset: str
    probe_id: str
    jacobian: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self):
        return self.matrix.shape[0]

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.T)).min())

    def is_valid(self, sym_tol=1e-10, psd_tol=1e-8) -> bool:
        scale = max(1.0, float(np.abs(self.matrix).max()))
        sym = np.abs(self.matrix - self.matrix.T).max() <= sym_tol * scale
        return bool(sym and self.min_eigenvalue() >= -psd_tol * scale)


@dataclass
class JacobianSnapshot:
    matrix: np.ndarray
    step: int
    probe_id: str


@dataclass
class KernelDistance:
    diff: np.ndarray
    max: float
    frobenius: float
    normalized: bool


@dataclass
class JLBoundRecord:
    eps: float
    c: float
    d: int
    bound: float
    empirical: float
    trials: int
    margin: float
    vacuous: bool

    @property
    def passed(self) -> bool:
        return self.empirical <= self.bound + self.margin

    def as_dict(self):
        return {
            "eps": self.eps,
            "c": self.c,
            "d": self.d,
            "bound": self.bound,
            "empirical": self.empirical,
            "trials": self.trials,
            "margin": self.margin,
            "vacuous": self.vacuous,
            "passed": self.passed,
            "success_probability_lower_bound": jl_bound(self.eps, self.d),
        }


def probe_id(probes) -> str:
    return hashlib.sha256(np.ascontiguousarray(probes).tobytes()).hexdigest()[:16]


def propulsion_parameters(adapters: AdapterSet):
    return [
        p
        for a in adapters.adapters.values()
        if isinstance(a, (PropulsionAdapter, MultiPropulsionAdapter))
        for p in a.parameters()
    ]


def _subset(model, adapters, subset):
    """Adapter set to run the forward with, and the parameters to differentiate."""
    adapters = adapters if adapters is not None else AdapterSet()
    if subset == "propulsion":
        params = propulsion_parameters(adapters)
        if not params:
            raise ConfigError("no propulsion vectors attached; cannot form the propulsion kernel", "ntk.subset")
        return adapters, params
    if subset == "full":
        if adapters.kind == "full_ft":
            return adapters, list(adapters.overrides.values())
        full = make_adapter_set(model, "full_ft")
        full.adapters = dict(adapters.adapters)
        return full, list(full.overrides.values())
    if subset == "adapter":
        return adapters, [p for p in adapters.parameters() if p.trainable]
    raise ConfigError(f"unknown parameter subset {subset!r}", "ntk.subset")


def jacobian(model: FrozenModel, adapters, probes, subset="propulsion", mask=None) -> np.ndarray:
    """``(n, P)`` gradients of the summed logits, one row per probe."""
    probes = np.asarray(probes)
    n = len(probes)
    if n == 0:
        raise ConfigError("empty probe set", "ntk.probes")
    if n > MAX_PROBES:
        raise ConfigError(f"at most {MAX_PROBES} probes, got {n}", "ntk.probes")
    fwd_set, params = _subset(model, adapters, subset)
    size = sum(p.size for p in params)
    if n * size > MAX_JACOBIAN_ENTRIES:
        raise ResourceLimitError(
            f"Jacobian of {n} x {size} exceeds the limit of {MAX_JACOBIAN_ENTRIES} entries; "
            "reduce the width or the probe count"
        )
    saved = {id(p): p.requires_grad for p in fwd_set.parameters()}
    watched = {id(p) for p in params}
    for p in fwd_set.parameters():
        p.requires_grad = id(p) in watched
    rows = []
    try:
        for i in range(n):
            for p in params:
                p.grad = None
            m = None if mask is None else mask[i : i + 1]
            phi = T.sum(model.forward(probes[i : i + 1], fwd_set, train=False, mask=m))
            T.backward(phi, params)
            rows.append(np.concatenate([p.grad.reshape(-1) for p in params]).astype(np.float64))
    finally:
        for p in fwd_set.parameters():
            p.requires_grad = saved[id(p)]
            p.grad = None
    return np.stack(rows)


def compute_ntk(model, adapters, probe_inputs, subset="propulsion", mask=None) -> KernelMatrix:
    """``K_ij = <grad phi(x_i), grad phi(x_j)>`` over the chosen parameter subset.

    ``subset`` is ``"full"`` (every base parameter), ``"propulsion"`` (the z
    vectors of the attached propulsion adapters) or ``"adapter"`` (all of the
    adapter set's trainable parameters).
    """
    jac = jacobian(model, adapters, probe_inputs, subset, mask)
    k = jac @ jac.T
    return KernelMatrix(0.5 * (k + k.T), subset, probe_id(probe_inputs), jac)


def normalize_kernel(k) -> np.ndarray:
    k = np.asarray(getattr(k, "matrix", k), dtype=np.float64)
    scale = float(np.mean(np.diag(k)))
    return k / scale if scale > 0 else k


def ntk_distance(k_a, k_b, normalize=True) -> KernelDistance:
    """``|K_a - K_b|`` elementwise, after dividing each by its mean diagonal when ``normalize``."""
    a = np.asarray(getattr(k_a, "matrix", k_a), dtype=np.float64)
    b = np.asarray(getattr(k_b, "matrix", k_b), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"kernel shapes differ: {a.shape} vs {b.shape}")
    if normalize:
        a, b = normalize_kernel(a), normalize_kernel(b)
    diff = np.abs(a - b)
    return KernelDistance(diff, float(diff.max()), float(np.linalg.norm(diff)), normalize)


def jacobian_snapshot(model, adapters, probes, step=0, subset="propulsion", mask=None) -> JacobianSnapshot:
    return JacobianSnapshot(jacobian(model, adapters, probes, subset, mask), step, probe_id(probes))


def jacobian_drift(snap0: JacobianSnapshot, snap_t: JacobianSnapshot):
    """Returns ``(|J_t - J_0|, ||J_t - J_0||_F / ||J_0||_F)``."""
    if snap0.matrix.shape != snap_t.matrix.shape:
        raise DimensionError(f"snapshot shapes differ: {snap0.matrix.shape} vs {snap_t.matrix.shape}")
    diff = snap_t.matrix - snap0.matrix
    base = np.linalg.norm(snap0.matrix)
    rel = float(np.linalg.norm(diff) / base) if base > 0 else float(np.linalg.norm(diff))
    return np.abs(diff), rel


@dataclass
class Residual:
    absolute: float
    relative: float
    delta_phi: float


def linearization_residual(model, adapters, x, before: dict, after: dict, mask=None) -> Residual:
    """First-order Taylor error of the summed-logit output between two adapter states.

    ``absolute = |phi(after) - phi(before) - <grad phi(before), after - before>|``;
    ``relative`` divides by ``|phi(after) - phi(before)|`` and is 0 when that is 0.
    The adapter set is left in the ``after`` state.
    """
    x = np.asarray(x)
    params = [p for p in adapters.parameters() if p.name in before]
    adapters.load_state(before)
    for p in params:
        p.grad = None
    phi0 = T.sum(model.forward(x, adapters, train=False, mask=mask))
    T.backward(phi0, params)
    lin = float(np.sum([np.sum(p.grad * (after[p.name] - before[p.name])) for p in params]))
    for p in params:
        p.grad = None
    adapters.load_state(after)
    with T.no_grad():
        phi1 = T.sum(model.forward(x, adapters, train=False, mask=mask)).item()
    delta = phi1 - phi0.item()
    absolute = abs(delta - lin)
    relative = absolute / abs(delta) if delta != 0 else 0.0
    return Residual(absolute, relative, delta)


# ----------------------------------------------------------------------------
# Johnson-Lindenstrauss
# ----------------------------------------------------------------------------


def jl_failure_bound(eps, d) -> float:
    """``4 exp(-(eps^2 - eps^3) d / 4)``: bound on the chance of a deviation >= c*eps."""
    _check_eps(eps, d)
    return 4.0 * math.exp(-(eps**2 - eps**3) * d / 4.0)


def jl_bound(eps, d) -> float:
    """Success probability ``1 - 4 exp(-(eps^2 - eps^3) d / 4)``, clamped to [0, 1]."""
    return min(1.0, max(0.0, 1.0 - jl_failure_bound(eps, d)))


def _check_eps(eps, d):
    if not 0.0 < eps < 1.0:
        raise DomainError(f"eps must lie in (0, 1), got {eps}")
    if d < 1:
        raise DomainError(f"d must be >= 1, got {d}")


def unit_vectors(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def jl_empirical(d, trials=10_000, eps=0.5, c=1.0, seed=0, same_pair=False, chunk=256) -> JLBoundRecord:
    """Monte-Carlo failure frequency of the inner-product JL bound.

    Each trial draws ``theta`` in R^{d x d} with i.i.d. N(0, 1/d) entries and a
    pair of unit vectors (identical when ``same_pair``), and fails when
    ``|<theta x_i, theta x_j> - <x_i, x_j>| >= c * eps``.
    """
    _check_eps(eps, d)
    if trials < 1:
        raise DomainError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    failures = 0
    done = 0
    while done < trials:
        t = min(chunk, trials - done)
        theta = rng.standard_normal((t, d, d)) / math.sqrt(d)
        xi = unit_vectors(rng, t, d)
        xj = xi if same_pair else unit_vectors(rng, t, d)
        failures += int(np.sum(kernels.jl_deviations(theta, xi, xj) >= c * eps))
        done += t
    bound = jl_failure_bound(eps, d)
    p = min(bound, 1.0)
    margin = 3.0 * math.sqrt(p * (1.0 - p) / trials)
    return JLBoundRecord(eps, c, d, bound, failures / trials, trials, margin, bound >= 1.0)


# ----------------------------------------------------------------------------
# desk-scale studies
# ----------------------------------------------------------------------------


def linear_kernels(d, seed=0, n_probes=8, degree=1):
    """Full and propulsion kernels of a ``d x d`` linear model on unit-norm probes, at init."""
    model = build(ModelSpec(kind="linear", depth=1, d_model=d, d_in=d, n_classes=d, seed=seed, dropout=0.0))
    probes = unit_vectors(np.random.default_rng([seed, 7]), n_probes, d)
    adapters = make_adapter_set(model, "propulsion", "All", degree=degree)
    k_full = compute_ntk(model, adapters, probes, "full")
    k_prop = compute_ntk(model, adapters, probes, "propulsion")
    return model, probes, k_full, k_prop


def kernel_gap(d, seed=0, n_probes=8) -> float:
    """Normalized max distance between the full and propulsion kernels of the linear model."""
    _, _, k_full, k_prop = linear_kernels(d, seed, n_probes)
    return ntk_distance(k_full, k_prop).max


def drift_run(
    width, seed=0, steps=100, lr=1e-3, n_probes=8, depth=2, d_in=8, degree=1, optimizer="sgd", record_every=1
):
    """Relative Jacobian drift of a propulsion-adapted MLP over ``steps`` full-batch steps.

    Returns ``(first_and_last_snapshot, drift_series)``; the series holds the
    drift every ``record_every`` steps (0: only after the last step).
    """
    from .data import blobs
    from .trainer import TrainConfig, make_optimizer, task_loss

    model = build(ModelSpec(kind="mlp", depth=depth, d_model=width, d_in=d_in, seed=seed, dropout=0.0))
    ds = blobs(64, d_in, 2, 3.0, seed=seed + 1000)
    probes = ds.inputs[:n_probes]
    adapters = make_adapter_set(model, "propulsion", "All", degree=degree)
    params = adapters.parameters()
    cfg = TrainConfig(learning_rate=lr, weight_decay=0.0, dropout=0.0, optimizer=optimizer)
    opt = make_optimizer(params, cfg)
    snap0 = jacobian_snapshot(model, adapters, probes, 0)
    series = []
    snap = snap0
    for step in range(1, steps + 1):
        for p in params:
            p.grad = None
        loss = task_loss(model.forward(ds.inputs, adapters), ds.targets, cfg)
        T.backward(loss, params)
        opt.step()
        if step == steps or (record_every and step % record_every == 0):
            snap = jacobian_snapshot(model, adapters, probes, step)
            series.append(jacobian_drift(snap0, snap)[1])
    return (snap0, snap), series
