"""Experiment configuration: YAML in, validated dataclasses out, normalized YAML back.

A config file describes one experiment::

    seed: 0
    precision: f64
    model: {kind: mlp, depth: 2, d_model: 32, d_in: 8, n_classes: 2}
    adapter: {kind: propulsion, sites: All, degree: 1}
    train: {learning_rate: 0.05, epochs: 50, batch_size: 32}
    data: {generator: blobs, n: 200, d: 8, sep: 3.0}
    sweep: {degree: [1, 15, 100]}

Every key outside the known schema is rejected with its dotted path.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import MISSING, dataclass, field, fields

import yaml

from .errors import ConfigError, SpecError
from .kernels import POOL_MODES
from .model import DTYPES, ModelSpec, enumerate_sites, expand_group
from .trainer import TrainConfig

ADAPTER_KINDS = ("propulsion", "multi_propulsion", "lora", "bitfit", "full_ft", "none")
SWEEP_AXES = ("degree", "pooling", "sites", "p", "rank", "kind", "learning_rate")
# train fields that mirror the adapter section and are filled from it
_MIRRORED = ("degree", "adapter", "sites", "clamp", "clamp_range")


@dataclass
class AdapterConfig:
    kind: str = "propulsion"
    sites: object = "All"  # group name or list of group names
    degree: int = 1
    p: int = 1
    pooling: str = "average"
    rank: int = 8
    alpha: float | None = None
    clamp: bool = False
    clamp_range: tuple = (0.0, 2.0)

    def validate(self):
        if self.kind not in ADAPTER_KINDS:
            raise ConfigError(f"unknown adapter kind {self.kind!r}; expected one of {ADAPTER_KINDS}", "adapter.kind")
        if self.degree < 0:
            raise ConfigError(f"must be >= 0, got {self.degree}", "adapter.degree")
        if self.p < 1:
            raise ConfigError(f"must be >= 1, got {self.p}", "adapter.p")
        if self.pooling not in POOL_MODES:
            raise ConfigError(f"unknown pooling {self.pooling!r}", "adapter.pooling")
        if self.rank < 1:
            raise ConfigError(f"must be >= 1, got {self.rank}", "adapter.rank")
        lo, hi = self.clamp_range
        if not lo < hi:
            raise ConfigError(f"empty range {self.clamp_range}", "adapter.clamp_range")

    @property
    def groups(self) -> list:
        return [self.sites] if isinstance(self.sites, str) else list(self.sites)


@dataclass
class JLConfig:
    d: int = 128
    eps: float = 0.5
    c: float = 1.0
    trials: int = 10_000


@dataclass
class NTKConfig:
    probes: int = 8
    steps: int = 20
    learning_rate: float | None = None  # None: use train.learning_rate
    optimizer: str = "sgd"
    unit_probes: bool = False
    jl: JLConfig | None = None


@dataclass
class BudgetConfig:
    methods: list = field(default_factory=lambda: ["propulsion", "lora", "ft"])
    rank: int = 8
    p: int = 1
    prompt_len: int = 10


@dataclass
class ExperimentConfig:
    model: ModelSpec
    adapter: AdapterConfig
    train: TrainConfig
    data: dict
    seed: int = 0
    precision: str = "f64"
    val_fraction: float = 0.0
    output: str | None = None
    ntk: NTKConfig = field(default_factory=NTKConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    sweep: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Normalized form: every field explicit, fixed key order."""
        train = {k: v for k, v in self.train.to_dict().items() if k not in _MIRRORED}
        adapter = {f.name: getattr(self.adapter, f.name) for f in fields(AdapterConfig)}
        adapter["clamp_range"] = list(adapter["clamp_range"])
        if not isinstance(adapter["sites"], str):
            adapter["sites"] = list(adapter["sites"])
        ntk = {f.name: getattr(self.ntk, f.name) for f in fields(NTKConfig)}
        ntk["jl"] = None if self.ntk.jl is None else {f.name: getattr(self.ntk.jl, f.name) for f in fields(JLConfig)}
        return {
            "seed": self.seed,
            "precision": self.precision,
            "output": self.output,
            "model": self.model.to_dict(),
            "adapter": adapter,
            "train": train,
            "data": dict(self.data),
            "val_fraction": self.val_fraction,
            "ntk": ntk,
            "budget": {f.name: copy.deepcopy(getattr(self.budget, f.name)) for f in fields(BudgetConfig)},
            "sweep": {k: list(v) for k, v in self.sweep.items()},
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    def hash(self) -> str:
        """Digest of everything that determines outputs (the output directory is excluded)."""
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **axes) -> "ExperimentConfig":
        """Copy with sweep-axis values applied and the sweep section cleared."""
        raw = self.to_dict()
        raw["sweep"] = {}
        for axis, value in axes.items():
            if axis == "learning_rate":
                raw["train"]["learning_rate"] = value
            else:
                raw["adapter"][axis] = value
        return parse_config(raw)


# ----------------------------------------------------------------------------
# parsing
# ----------------------------------------------------------------------------


def _check_type(value, default, path):
    """Coerce ``value`` to the type implied by ``default``; raise ConfigError otherwise."""
    if default is None:
        if value is None or (isinstance(value, (int, float)) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"expected a number or null, got {value!r}", path)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"expected true/false, got {value!r}", path)
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"expected an integer, got {value!r}", path)
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"expected a number, got {value!r}", path)
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"expected a string, got {value!r}", path)
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path)
        if isinstance(default, tuple):
            if len(value) != len(default):
                raise ConfigError(f"expected {len(default)} entries, got {len(value)}", path)
            return tuple(_check_type(v, d, f"{path}[{i}]") for i, (v, d) in enumerate(zip(value, default)))
        return list(value)
    return value


def _section(raw, cls, path, skip=(), overrides=None):
    """Keyword arguments for ``cls`` from mapping ``raw``, type-checked field by field."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"expected a mapping, got {type(raw).__name__}", path)
    known = {f.name: f for f in fields(cls) if f.name not in skip}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key; expected one of {sorted(known)}", f"{path}.{key}")
        f = known[key]
        default = f.default if f.default_factory is MISSING else f.default_factory()
        if overrides and key in overrides:
            kwargs[key] = overrides[key](value, f"{path}.{key}")
        else:
            kwargs[key] = _check_type(value, default, f"{path}.{key}")
    return kwargs


def _sites_value(value, path):
    if isinstance(value, str):
        return value
    if isinstance(value, list) and value and all(isinstance(v, str) for v in value):
        return list(value)
    raise ConfigError(f"expected a site group name or a non-empty list of them, got {value!r}", path)


def _model_default(name):
    for f in fields(ModelSpec):
        if f.name == name:
            return f.default
    raise KeyError(name)


def parse_config(raw, seed=None) -> ExperimentConfig:
    """Validate a mapping (as loaded from YAML) into an :class:`ExperimentConfig`.

    ``seed`` overrides the top-level seed and every section seed derived from it.
    """
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    raw = copy.deepcopy(raw)
    top = {"seed", "precision", "output", "model", "adapter", "train", "data", "val_fraction", "ntk", "budget", "sweep"}
    for key in raw:
        if key not in top:
            raise ConfigError(f"unknown key; expected one of {sorted(top)}", str(key))
    if seed is not None:
        raw["seed"] = seed
        for sec in ("model", "train"):
            if isinstance(raw.get(sec), dict):
                raw[sec].pop("seed", None)
    base_seed = _check_type(raw.get("seed", 0), 0, "seed")
    precision = _check_type(raw.get("precision", "f64"), "f64", "precision")
    if precision not in DTYPES:
        raise ConfigError(f"expected one of {sorted(DTYPES)}, got {precision!r}", "precision")

    # model
    m_raw = raw.get("model") or {}
    if not isinstance(m_raw, dict):
        raise ConfigError("expected a mapping", "model")
    m_kwargs = {}
    for key, value in m_raw.items():
        try:
            default = _model_default(key)
        except KeyError:
            raise ConfigError("unknown key", f"model.{key}") from None
        m_kwargs[key] = _check_type(value, default, f"model.{key}")
    m_kwargs.setdefault("seed", base_seed)
    try:
        model = ModelSpec(**m_kwargs)
    except SpecError as exc:
        raise ConfigError(str(exc), "model") from None

    # adapter
    adapter = AdapterConfig(**_section(raw.get("adapter"), AdapterConfig, "adapter", overrides={"sites": _sites_value}))
    adapter.validate()
    for group in adapter.groups:
        try:
            expand_group(enumerate_sites(model), group)
        except ConfigError as exc:
            raise ConfigError(str(exc), "adapter.sites") from None

    # train
    t_kwargs = _section(raw.get("train"), TrainConfig, "train", skip=_MIRRORED)
    t_kwargs.setdefault("seed", base_seed)
    t_kwargs.update(
        degree=adapter.degree,
        adapter=adapter.kind,
        sites=adapter.sites if isinstance(adapter.sites, str) else ",".join(adapter.sites),
        clamp=adapter.clamp,
        clamp_range=adapter.clamp_range,
    )
    train = TrainConfig(**t_kwargs)

    # data
    data = raw.get("data")
    if not isinstance(data, dict):
        raise ConfigError("a dataset source mapping is required", "data")
    if ("generator" in data) == ("path" in data):
        raise ConfigError("exactly one of 'generator' or 'path' is required", "data")
    val_fraction = _check_type(raw.get("val_fraction", 0.0), 0.0, "val_fraction")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"must lie in [0, 1), got {val_fraction}", "val_fraction")

    # ntk
    n_raw = dict(raw.get("ntk") or {})
    jl_raw = n_raw.pop("jl", None)
    ntk = NTKConfig(**_section(n_raw, NTKConfig, "ntk", skip=("jl",)))
    if jl_raw is not None:
        ntk.jl = JLConfig(**_section(jl_raw, JLConfig, "ntk.jl"))
    if not 1 <= ntk.probes:
        raise ConfigError(f"must be >= 1, got {ntk.probes}", "ntk.probes")
    if ntk.steps < 0:
        raise ConfigError(f"must be >= 0, got {ntk.steps}", "ntk.steps")
    if ntk.optimizer not in ("sgd", "adamw"):
        raise ConfigError(f"unknown optimizer {ntk.optimizer!r}", "ntk.optimizer")

    budget = BudgetConfig(**_section(raw.get("budget"), BudgetConfig, "budget"))
    if not budget.methods or not all(isinstance(m, str) for m in budget.methods):
        raise ConfigError("expected a non-empty list of method names", "budget.methods")

    # sweep
    s_raw = raw.get("sweep") or {}
    if not isinstance(s_raw, dict):
        raise ConfigError("expected a mapping of axis -> list of values", "sweep")
    sweep = {}
    for axis, values in s_raw.items():
        path = f"sweep.{axis}"
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown axis; expected one of {SWEEP_AXES}", path)
        if not isinstance(values, list) or not values:
            raise ConfigError("axis must be a non-empty list", path)
        sweep[axis] = list(values)

    output = raw.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError("expected a directory path", "output")

    cfg = ExperimentConfig(
        model=model,
        adapter=adapter,
        train=train,
        data=dict(data),
        seed=base_seed,
        precision=precision,
        val_fraction=val_fraction,
        output=output,
        ntk=ntk,
        budget=budget,
        sweep=sweep,
    )
    # sweep values must themselves produce valid configs
    for axis, values in sweep.items():
        for v in values:
            try:
                cfg.with_overrides(**{axis: v})
            except ConfigError as exc:
                raise ConfigError(f"value {v!r} is invalid ({exc})", f"sweep.{axis}") from None
    return cfg


def load_config(path, seed=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", "config") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}", "config") from None
    return parse_config(raw, seed=seed)
