"""Adapters: Propulsion (single and pooled), LoRA, BitFit, full fine-tuning.

Adapters never touch a model's own parameters. Site adapters rewrite an
attachment site's output during the forward pass; BitFit and full
fine-tuning hold trainable copies of base parameters that shadow the
originals (see :meth:`AdapterSet.resolve`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import AttachmentError, ConfigError, DimensionError
from .model import AttachmentSite, FrozenModel, expand_group
from .tensor import Parameter, Tensor

ADAPTER_KINDS = ("none", "propulsion", "multi_propulsion", "lora", "bitfit", "full_ft")
POOLINGS = ("average", "max", "min", "l2")


def propulsion_apply(v, z, k: int) -> Tensor:
    """Scale every row (token) of ``v`` by ``z**k``."""
    v, z = T.as_tensor(v), T.as_tensor(z)
    if z.ndim != 1 or v.shape[-1] != z.shape[0]:
        raise AttachmentError(f"propulsion vector of length {z.shape} does not match output width {v.shape[-1]}")
    return T.propulsion(v, z, k)


def multi_propulsion_apply(v, vectors, k: int, pooling: str = "average") -> Tensor:
    """Apply each vector separately, then pool the candidates elementwise."""
    if not vectors:
        raise ConfigError("multi-propulsion needs at least one vector")
    pooling = pooling.lower()
    if pooling not in POOLINGS:
        raise ConfigError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")
    outs = [propulsion_apply(v, z, k) for z in vectors]
    if len(outs) == 1:
        return outs[0]
    return T.pool(outs, pooling)


def lora_apply(x, w, a, b, scaling: float) -> Tensor:
    """``x @ w + scaling * (x @ a) @ b``."""
    x, w, a, b = (T.as_tensor(t) for t in (x, w, a, b))
    r = a.shape[-1]
    if r > min(w.shape):
        raise ConfigError(f"LoRA rank {r} exceeds min(d_in, d_out) = {min(w.shape)}")
    return T.add(T.matmul(x, w), T.scale(T.matmul(T.matmul(x, a), b), scaling))


def materialize_effective_weight(w, z, k: int) -> np.ndarray:
    """``W @ diag(z**k)``: the plain weight reproducing a propulsion-adapted affine map."""
    w = np.asarray(w.data if isinstance(w, Tensor) else w)
    z = np.asarray(z.data if isinstance(z, Tensor) else z)
    if w.shape[-1] != z.shape[0]:
        raise AttachmentError(f"weight {w.shape} does not match propulsion vector {z.shape}")
    return w * z**k


class PropulsionAdapter:
    def __init__(self, site: AttachmentSite, degree: int = 1, dtype=np.float64, clamp=None):
        if degree < 0:
            raise ConfigError(f"degree must be non-negative, got {degree}")
        self.site = site
        self.degree = int(degree)
        self.clamp = clamp
        self.z = Parameter(np.ones(site.d_out), f"{site.name}.z", trainable=True, dtype=dtype, decay_center=1.0)

    def parameters(self):
        return [self.z]

    def transform(self, v, x):
        return propulsion_apply(v, self.z, self.degree)


class MultiPropulsionAdapter:
    def __init__(self, site, degree=1, p=2, pooling="average", dtype=np.float64, clamp=None):
        if p < 1:
            raise ConfigError(f"number of propulsion vectors must be >= 1, got {p}")
        if pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {pooling!r}")
        self.site = site
        self.degree = int(degree)
        self.pooling = pooling
        self.clamp = clamp
        self.vectors = [
            Parameter(np.ones(site.d_out), f"{site.name}.z{i}", trainable=True, dtype=dtype, decay_center=1.0)
            for i in range(p)
        ]

    @property
    def p(self):
        return len(self.vectors)

    def parameters(self):
        return list(self.vectors)

    def transform(self, v, x):
        return multi_propulsion_apply(v, self.vectors, self.degree, self.pooling)


class LoRAAdapter:
    def __init__(self, site, rank=8, alpha=None, rng=None, dtype=np.float64):
        if rank < 1 or rank > min(site.d_in, site.d_out):
            raise ConfigError(f"LoRA rank {rank} outside [1, {min(site.d_in, site.d_out)}] at {site.name}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.site = site
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.scaling = self.alpha / rank
        a = rng.standard_normal((site.d_in, rank)) / math.sqrt(site.d_in)
        self.A = Parameter(a, f"{site.name}.lora_A", trainable=True, dtype=dtype)
        self.B = Parameter(np.zeros((rank, site.d_out)), f"{site.name}.lora_B", trainable=True, dtype=dtype)

    def parameters(self):
        return [self.A, self.B]

    def transform(self, v, x):
        if self.site.kind == "Embedding":
            xa = T.take_rows(self.A, x)
        else:
            xa = T.matmul(x, self.A)
        return T.add(v, T.scale(T.matmul(xa, self.B), self.scaling))


@dataclass
class AdapterSet:
    """At most one adapter per site, plus trainable shadows of base parameters."""

    kind: str = "none"
    adapters: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ADAPTER_KINDS:
            raise ConfigError(f"unknown adapter kind {self.kind!r}")

    def add(self, adapter):
        key = adapter.site.name
        if key in self.adapters:
            raise AttachmentError(f"site {key} already has an adapter")
        self.adapters[key] = adapter

    def get(self, site):
        return self.adapters.get(site.name)

    def resolve(self, name, base):
        return self.overrides.get(name, base)

    def check(self, model: FrozenModel):
        for key, adapter in self.adapters.items():
            try:
                site = model.site(key)
            except AttachmentError:
                raise AttachmentError(f"adapter attached to unknown site {key!r}") from None
            if site.d_out != adapter.site.d_out or site.d_in != adapter.site.d_in:
                raise AttachmentError(
                    f"adapter for {key} built for {adapter.site.d_in}x{adapter.site.d_out}, "
                    f"site is {site.d_in}x{site.d_out}"
                )
        for name in self.overrides:
            if name not in model.params:
                raise AttachmentError(f"override for unknown parameter {name!r}")

    def parameters(self):
        params = [p for a in self.adapters.values() for p in a.parameters()]
        params += list(self.overrides.values())
        return params

    def n_trainable(self) -> int:
        return int(np.sum([p.size for p in self.parameters() if p.trainable], dtype=np.int64))

    def clamp_ranges(self):
        """``{param_name: (lo, hi)}`` for adapters constructed with a clamp."""
        out = {}
        for a in self.adapters.values():
            if getattr(a, "clamp", None):
                for p in a.parameters():
                    out[p.name] = tuple(a.clamp)
        return out

    def state(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, arrays):
        by_name = {p.name: p for p in self.parameters()}
        for name, arr in arrays.items():
            if name not in by_name:
                raise AttachmentError(f"no adapter parameter named {name!r}")
            if by_name[name].shape != arr.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != {by_name[name].shape}")
            by_name[name].data = np.array(arr, dtype=by_name[name].dtype)

    def save(self, path, meta=None):
        from .checkpoint import save_checkpoint

        save_checkpoint(path, self.state(), {"kind": self.kind, **(meta or {})})

    def effective_params(self, model: FrozenModel) -> dict:
        """Base parameters with overrides applied, as arrays."""
        return {n: self.resolve(n, p).data for n, p in model.params.items()}


def bitfit_enable(model: FrozenModel) -> AdapterSet:
    """Trainable copies of every bias; weights stay frozen."""
    aset = AdapterSet(kind="bitfit")
    for name in model.bias_names():
        base = model.params[name]
        aset.overrides[name] = Parameter(base.data.copy(), name, trainable=True, dtype=base.dtype)
    return aset


def full_ft_enable(model: FrozenModel) -> AdapterSet:
    aset = AdapterSet(kind="full_ft")
    for name, base in model.params.items():
        aset.overrides[name] = Parameter(base.data.copy(), name, trainable=True, dtype=base.dtype)
    return aset


def make_adapter_set(
    model: FrozenModel,
    kind: str = "propulsion",
    sites="All",
    degree: int = 1,
    p: int = 1,
    pooling: str = "average",
    rank: int = 8,
    alpha=None,
    seed: int = 0,
    clamp=None,
) -> AdapterSet:
    """Build an adapter set. ``sites`` is a group name or a list of sites/site names."""
    kind = kind.lower()
    if kind == "bitfit":
        return bitfit_enable(model)
    if kind == "full_ft":
        return full_ft_enable(model)
    aset = AdapterSet(kind=kind)
    if kind == "none":
        return aset
    if isinstance(sites, str):
        targets = expand_group(model.sites, sites)
    else:
        targets = [s if isinstance(s, AttachmentSite) else model.site(s) for s in sites]
    rng = np.random.default_rng(seed)
    for site in targets:
        if kind == "propulsion":
            aset.add(PropulsionAdapter(site, degree, dtype=model.dtype, clamp=clamp))
        elif kind == "multi_propulsion":
            aset.add(MultiPropulsionAdapter(site, degree, p, pooling, dtype=model.dtype, clamp=clamp))
        elif kind == "lora":
            aset.add(LoRAAdapter(site, rank, alpha, rng=rng, dtype=model.dtype))
        else:
            raise ConfigError(f"unknown adapter kind {kind!r}")
    return aset


# ----------------------------------------------------------------------------
# parameter budgets
# ----------------------------------------------------------------------------

# per-site trainable counts for a layer W in R^{d_in x d_out}; square d gives the table form
_SITE_FORMULAS = {
    "propulsion": ("d", lambda di, do, r, p: do),
    "multi_propulsion": ("p*d", lambda di, do, r, p: p * do),
    "ft": ("d^2", lambda di, do, r, p: di * do),
    "lora": ("2dr", lambda di, do, r, p: r * (di + do)),
    "lora_fa": ("dr", lambda di, do, r, p: r * do),
    "adalora": ("2dr+r^2", lambda di, do, r, p: r * (di + do) + r * r),
    "loha": ("4dr", lambda di, do, r, p: 2 * r * (di + do)),
    "ia3": ("3d", lambda di, do, r, p: 3 * do),
    "bitfit": ("d", lambda di, do, r, p: do),
}
_GLOBAL_FORMULAS = ("prompt", "prefix")
_ALIASES = {"full_ft": "ft", "fullft": "ft", "(ia)3": "ia3", "ia^3": "ia3", "multi": "multi_propulsion"}
BUDGET_METHODS = tuple(_SITE_FORMULAS) + _GLOBAL_FORMULAS


@dataclass
class ParamBudget:
    method: str
    formula: str
    per_site: list
    total: int


def count_trainable(method, sites, r=8, p=1, prompt_len=10, n_layers=None, d_model=None) -> ParamBudget:
    """Trainable-parameter count from the complexity-table formulas.

    ``sites`` holds :class:`AttachmentSite` objects or ``(d_in, d_out)`` pairs.
    Prompt and prefix tuning are per-model: ``l_p * d`` and ``L * l_p * d``
    with ``d`` = ``d_model`` (default: widest site) and ``L`` = ``n_layers``.
    """
    m = _ALIASES.get(method.lower(), method.lower())
    norm_sites = []
    for i, s in enumerate(sites):
        if isinstance(s, AttachmentSite):
            norm_sites.append((s.name, s.d_in, s.d_out))
        else:
            d_in, d_out = s
            norm_sites.append((f"site{i}", int(d_in), int(d_out)))
    if m in _SITE_FORMULAS:
        formula, fn = _SITE_FORMULAS[m]
        per = [(name, int(fn(di, do, r, p))) for name, di, do in norm_sites]
        return ParamBudget(m, formula, per, int(np.sum([c for _, c in per], dtype=np.int64)))
    if m in _GLOBAL_FORMULAS:
        d = d_model if d_model is not None else max(do for _, _, do in norm_sites)
        if m == "prompt":
            return ParamBudget(m, "l_p*d", [], int(prompt_len * d))
        layers = n_layers if n_layers is not None else len({n.split(".")[0] for n, _, _ in norm_sites})
        return ParamBudget(m, "L*l_p*d", [], int(layers * prompt_len * d))
    raise ConfigError(f"unknown budget method {method!r}; known: {BUDGET_METHODS}")
