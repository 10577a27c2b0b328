"""Small frozen-base models with named attachment sites.

Three architectures:

* ``linear``: one bias-free affine map ``x @ W``; the NTK closed forms are
  stated for this model.
* ``mlp``: ``depth`` hidden affine layers of width ``d_model`` with GELU,
  then a linear head. Each hidden affine output is an ``MLP`` site.
* ``transformer``: token + position embedding, ``depth`` post-LN encoder
  blocks (multi-head attention, GELU feed-forward), masked mean pooling and
  a linear head. Sites: ``Embedding`` once, then ``Query``, ``Key``,
  ``Value`` and ``MLP`` (first feed-forward affine, width ``d_ff``) per block.

An adapter at a site sees the raw affine output (bias included, before any
activation) and returns its replacement.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import AttachmentError, ConfigError, SpecError
from .tensor import Parameter, Tensor

SITE_KINDS = ("Embedding", "Query", "Key", "Value", "MLP")
MODEL_KINDS = ("linear", "mlp", "transformer")
DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclass
class ModelSpec:
    kind: str = "mlp"
    depth: int = 2
    d_model: int = 16
    d_ff: int = 32
    n_heads: int = 2
    vocab_size: int = 64
    max_seq: int = 16
    n_classes: int = 2
    seed: int = 0
    d_in: int | None = None
    dropout: float = 0.1

    def __post_init__(self):
        self.validate()

    @property
    def input_dim(self) -> int:
        return self.d_model if self.d_in is None else self.d_in

    def validate(self):
        if self.kind not in MODEL_KINDS:
            raise SpecError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        dims = {
            "depth": self.depth,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "n_heads": self.n_heads,
            "vocab_size": self.vocab_size,
            "max_seq": self.max_seq,
            "n_classes": self.n_classes,
            "d_in": self.input_dim,
        }
        for name, value in dims.items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise SpecError(f"{name} must be a positive integer, got {value!r}")
        if self.kind == "transformer" and self.d_model % self.n_heads:
            raise SpecError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise SpecError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class AttachmentSite:
    layer: int
    kind: str
    d_in: int
    d_out: int

    @property
    def name(self) -> str:
        if self.kind == "Embedding":
            return "embedding"
        return f"layer{self.layer}.{self.kind.lower()}"


def enumerate_sites(spec: ModelSpec) -> list[AttachmentSite]:
    """Sites a model built from ``spec`` exposes (no weights are drawn)."""
    d = spec.d_model
    if spec.kind == "linear":
        return [AttachmentSite(1, "MLP", spec.input_dim, d)]
    if spec.kind == "mlp":
        return [AttachmentSite(i, "MLP", spec.input_dim if i == 1 else d, d) for i in range(1, spec.depth + 1)]
    sites = [AttachmentSite(0, "Embedding", spec.vocab_size, d)]
    for i in range(1, spec.depth + 1):
        sites += [
            AttachmentSite(i, "Query", d, d),
            AttachmentSite(i, "Key", d, d),
            AttachmentSite(i, "Value", d, d),
            AttachmentSite(i, "MLP", d, spec.d_ff),
        ]
    return sites


def expand_group(sites, group: str) -> list[AttachmentSite]:
    """``Attn`` (alias ``K+Q+V``) = every Key/Query/Value; ``All`` = every site; else one kind."""
    g = group.strip().lower()
    if g in ("all",):
        return list(sites)
    if g in ("attn", "attention", "k+q+v", "qkv"):
        return [s for s in sites if s.kind in ("Key", "Query", "Value")]
    for kind in SITE_KINDS:
        if g == kind.lower():
            return [s for s in sites if s.kind == kind]
    raise ConfigError(f"unknown site group {group!r}")


@dataclass
class FrozenModel:
    spec: ModelSpec
    params: dict = field(default_factory=dict)
    sites: list = field(default_factory=list)
    dtype: type = np.float64

    # -- structure ---------------------------------------------------------

    def site(self, name) -> AttachmentSite:
        for s in self.sites:
            if s.name == name:
                return s
        raise AttachmentError(f"model has no site {name!r}")

    def bias_names(self):
        return [n for n in self.params if n.endswith(".bias")]

    def n_params(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- persistence -------------------------------------------------------

    def save(self, path):
        meta = {"spec": self.spec.to_dict(), "seed": self.spec.seed, "dtype": np.dtype(self.dtype).name}
        save_checkpoint(path, {n: p.data for n, p in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "FrozenModel":
        arrays, meta = load_checkpoint(path)
        model = build(ModelSpec(**meta["spec"]), dtype=np.dtype(meta["dtype"]).type)
        for name, arr in arrays.items():
            model.params[name].data = arr.copy()
        return model

    # -- forward -----------------------------------------------------------

    def forward(self, inputs, adapters=None, train=False, rng=None, mask=None, dropout=None) -> Tensor:
        """Logits for a batch.

        ``inputs`` is a float matrix (``linear`` / ``mlp``) or an integer token
        matrix (``transformer``; ``mask`` marks real tokens, default all).
        Dropout (rate ``dropout``, default ``spec.dropout``) is active only when
        ``train`` is true.
        """
        rate = self.spec.dropout if dropout is None else dropout
        ctx = _Context(self, adapters, train and rate > 0, rng, rate)
        if self.spec.kind == "transformer":
            return _transformer_forward(ctx, np.asarray(inputs), mask)
        x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=self.dtype))
        if self.spec.kind == "linear":
            return ctx.affine(x, "layer1", self.sites[0], bias=False)
        return _mlp_forward(ctx, x)

    __call__ = forward


class _Context:
    def __init__(self, model, adapters, train, rng, rate):
        self.model = model
        self.rate = rate
        self.adapters = adapters
        self.train = train
        self.rng = rng if rng is not None else np.random.default_rng(0)
        if adapters is not None:
            adapters.check(model)

    def p(self, name) -> Tensor:
        base = self.model.params[name]
        if self.adapters is None:
            return base
        return self.adapters.resolve(name, base)

    def drop(self, x):
        return T.dropout(x, self.rate, self.rng, self.train)

    def adapt(self, site, v, x):
        if site is None or self.adapters is None:
            return v
        adapter = self.adapters.get(site)
        return v if adapter is None else adapter.transform(v, x)

    def affine(self, x, prefix, site=None, bias=True):
        v = T.matmul(x, self.p(prefix + ".weight"))
        if bias:
            v = T.add(v, self.p(prefix + ".bias"))
        return self.adapt(site, v, x)

    def norm(self, x, prefix):
        y = T.layer_norm(x)
        return T.add(T.ew_mul(y, self.p(prefix + ".weight")), self.p(prefix + ".bias"))


def _mlp_forward(ctx, x):
    h = x
    for site in ctx.model.sites:
        v = ctx.affine(h, f"layer{site.layer}", site)
        h = ctx.drop(T.gelu(v))
    return ctx.affine(h, "head")


def _transformer_forward(ctx, ids, mask):
    spec = ctx.model.spec
    if ids.ndim != 2:
        raise AttachmentError(f"transformer expects a (batch, seq) token matrix, got shape {ids.shape}")
    b, s = ids.shape
    if s > spec.max_seq:
        raise AttachmentError(f"sequence length {s} exceeds max_seq={spec.max_seq}")
    mask = np.ones((b, s), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    sites = {(st.layer, st.kind): st for st in ctx.model.sites}
    dtype = ctx.model.dtype

    e = T.take_rows(ctx.p("embedding.weight"), ids)
    e = ctx.adapt(sites[(0, "Embedding")], e, ids)
    pos = T.take_rows(ctx.p("position.weight"), np.broadcast_to(np.arange(s), (b, s)))
    h = ctx.drop(ctx.norm(T.add(e, pos), "embedding.norm"))

    heads = spec.n_heads
    dh = spec.d_model // heads
    key_bias = np.where(mask, 0.0, -1e9).astype(dtype)[:, None, None, :]

    def split(t):
        return T.permute(T.reshape(t, (b, s, heads, dh)), (0, 2, 1, 3))

    for i in range(1, spec.depth + 1):
        pre = f"layer{i}"
        q = split(ctx.affine(h, pre + ".attn.query", sites[(i, "Query")]))
        k = split(ctx.affine(h, pre + ".attn.key", sites[(i, "Key")]))
        v = split(ctx.affine(h, pre + ".attn.value", sites[(i, "Value")]))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
        probs = ctx.drop(T.softmax_rows(T.add_const(scores, key_bias)))
        att = T.reshape(T.permute(T.matmul(probs, v), (0, 2, 1, 3)), (b, s, spec.d_model))
        att = ctx.drop(ctx.affine(att, pre + ".attn.out"))
        h = ctx.norm(T.add(h, att), pre + ".norm1")
        m = T.gelu(ctx.affine(h, pre + ".mlp.fc1", sites[(i, "MLP")]))
        m = ctx.drop(ctx.affine(m, pre + ".mlp.fc2"))
        h = ctx.norm(T.add(h, m), pre + ".norm2")

    weights = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1)
    pooled = T.reshape(T.matmul(Tensor(weights[:, None, :].astype(dtype)), h), (b, spec.d_model))
    return ctx.affine(pooled, "head")


def build(spec: ModelSpec, dtype=np.float64) -> FrozenModel:
    """Draw a frozen model from ``spec.seed``.

    Weight matrices are N(0, 1/fan_in); biases N(0, 0.1^2); layer-norm gains
    one and shifts zero; embedding tables N(0, 1).
    """
    spec.validate()
    dtype = DTYPES.get(dtype, dtype)
    rng = np.random.default_rng(spec.seed)
    params = {}

    def dense(prefix, d_in, d_out, bias=True):
        w = rng.standard_normal((d_in, d_out)) / math.sqrt(d_in)
        params[prefix + ".weight"] = Parameter(w, prefix + ".weight", dtype=dtype)
        if bias:
            b = 0.1 * rng.standard_normal(d_out)
            params[prefix + ".bias"] = Parameter(b, prefix + ".bias", dtype=dtype)

    def norm(prefix, d):
        params[prefix + ".weight"] = Parameter(np.ones(d), prefix + ".weight", dtype=dtype)
        params[prefix + ".bias"] = Parameter(np.zeros(d), prefix + ".bias", dtype=dtype)

    d = spec.d_model
    if spec.kind == "linear":
        dense("layer1", spec.input_dim, d, bias=False)
    elif spec.kind == "mlp":
        for i in range(1, spec.depth + 1):
            dense(f"layer{i}", spec.input_dim if i == 1 else d, d)
        dense("head", d, spec.n_classes)
    else:
        params["embedding.weight"] = Parameter(
            rng.standard_normal((spec.vocab_size, d)), "embedding.weight", dtype=dtype
        )
        params["position.weight"] = Parameter(
            rng.standard_normal((spec.max_seq, d)), "position.weight", dtype=dtype
        )
        norm("embedding.norm", d)
        for i in range(1, spec.depth + 1):
            for part in ("query", "key", "value", "out"):
                dense(f"layer{i}.attn.{part}", d, d)
            norm(f"layer{i}.norm1", d)
            dense(f"layer{i}.mlp.fc1", d, spec.d_ff)
            dense(f"layer{i}.mlp.fc2", spec.d_ff, d)
            norm(f"layer{i}.norm2", d)
        dense("head", d, spec.n_classes)
    model = FrozenModel(spec=spec, params=params, sites=enumerate_sites(spec), dtype=dtype)
    freeze_all(model)
    return model


def freeze_all(model: FrozenModel) -> None:
    for p in model.params.values():
        p.trainable = False


def sites(model: FrozenModel) -> list[AttachmentSite]:
    return list(model.sites)


def site_group(model: FrozenModel, group: str) -> list[AttachmentSite]:
    return expand_group(model.sites, group)
