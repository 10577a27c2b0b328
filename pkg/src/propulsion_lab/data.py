"""Datasets: synthetic generators and delimited-text files."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError

PAD_ID = 0


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    task: str = "classification"
    n_classes: int = 2
    mask: np.ndarray | None = None
    split: np.ndarray | None = None

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise DataError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        if self.split is None:
            self.split = np.full(len(self.targets), "train", dtype=object)
        if self.task == "classification" and len(self.targets):
            t = np.asarray(self.targets)
            if t.min() < 0 or t.max() >= self.n_classes:
                raise DataError(f"labels must lie in [0, {self.n_classes}), got range [{t.min()}, {t.max()}]")

    def __len__(self):
        return len(self.targets)

    @property
    def is_tokens(self):
        return np.issubdtype(np.asarray(self.inputs).dtype, np.integer)

    def take(self, idx) -> "Dataset":
        return replace(
            self,
            inputs=self.inputs[idx],
            targets=self.targets[idx],
            mask=None if self.mask is None else self.mask[idx],
            split=self.split[idx],
        )

    def subset(self, tag) -> "Dataset":
        return self.take(np.flatnonzero(self.split == tag))


def assign_split(ds: Dataset, val_fraction: float, seed: int) -> Dataset:
    """Tag a seeded random ``val_fraction`` of items as validation."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in [0, 1), got {val_fraction}", "data.val_fraction")
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    split = np.full(n, "train", dtype=object)
    split[order[: int(round(val_fraction * n))]] = "validation"
    return replace(ds, split=split)


# ----------------------------------------------------------------------------
# generators
# ----------------------------------------------------------------------------


def blobs(n=200, d=8, classes=2, sep=3.0, seed=0) -> Dataset:
    """Isotropic unit-variance Gaussian blobs; class ``c`` is centred at ``sep * e_c``.

    Counts are balanced (the first ``n % classes`` classes get one extra).
    """
    if classes > d:
        raise ConfigError(f"blobs needs d >= classes, got d={d}, classes={classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    centers = sep * np.eye(classes, d)
    x = centers[labels] + rng.standard_normal((n, d))
    return Dataset(x, labels.astype(np.int64), "classification", classes)


def moons(n=200, noise=0.1, seed=0) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    labels = labels[rng.permutation(n)]
    t = rng.uniform(0.0, np.pi, n)
    x = np.where(labels[:, None] == 0, np.c_[np.cos(t), np.sin(t)], np.c_[1.0 - np.cos(t), 0.5 - np.sin(t)])
    x = x + noise * rng.standard_normal((n, 2))
    return Dataset(x, labels.astype(np.int64), "classification", 2)


def keywords(n=200, seq_len=8, vocab_size=32, keyword=1, seed=0) -> Dataset:
    """Token sequences labelled 1 iff ``keyword`` occurs; filler ids avoid 0 (pad) and the keyword."""
    if vocab_size < 3 or not 1 <= keyword < vocab_size:
        raise ConfigError("keywords needs vocab_size >= 3 and keyword in [1, vocab_size)")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    labels = labels[rng.permutation(n)]
    filler = np.array([t for t in range(1, vocab_size) if t != keyword])
    ids = filler[rng.integers(0, len(filler), (n, seq_len))]
    pos = rng.integers(0, seq_len, n)
    rows = np.flatnonzero(labels == 1)
    ids[rows, pos[rows]] = keyword
    return Dataset(ids.astype(np.int64), labels.astype(np.int64), "classification", 2, np.ones((n, seq_len), bool))


def linear_regression(n=200, d=8, noise=0.1, seed=0) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    w = rng.standard_normal(d) / np.sqrt(d)
    y = x @ w + noise * rng.standard_normal(n)
    return Dataset(x, y, "regression", 1)


GENERATORS = {"blobs": blobs, "moons": moons, "keywords": keywords, "linear_regression": linear_regression}


# ----------------------------------------------------------------------------
# files
# ----------------------------------------------------------------------------


def hash_token(token: str, vocab_size: int) -> int:
    """Stable id in ``[1, vocab_size)``; 0 is reserved for padding."""
    return 1 + zlib.crc32(token.encode("utf-8")) % (vocab_size - 1)


def tokenize(text: str, vocab_size: int, max_seq: int):
    toks = text.lower().split()[:max_seq]
    return [hash_token(t, vocab_size) for t in toks]


def load_csv(path, vocab_size=64, max_seq=16, n_classes=None) -> Dataset:
    """Read ``label,text`` (token task), ``label,f1..fn`` or ``target,f1..fn``.

    A ``label`` column yields classification, ``target`` regression.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [(i, row) for i, row in enumerate(reader, start=2) if row and any(c.strip() for c in row)]
    if not rows:
        raise DataError(f"{path}: no data rows")
    if header[0] not in ("label", "target"):
        raise DataError(f"{path}: first column must be 'label' or 'target', got {header[0]!r}", line=1)
    task = "classification" if header[0] == "label" else "regression"
    text_mode = header[1:] == ["text"]

    targets, feats, ids = [], [], []
    for line, row in rows:
        if len(row) != len(header) and not text_mode:
            raise DataError(f"expected {len(header)} fields, got {len(row)}", line=line)
        try:
            t = int(row[0]) if task == "classification" else float(row[0])
        except ValueError:
            raise DataError(f"bad {header[0]} value {row[0]!r}", line=line) from None
        targets.append(t)
        if text_mode:
            ids.append(tokenize(",".join(row[1:]), vocab_size, max_seq))
        else:
            try:
                feats.append([float(c) for c in row[1:]])
            except ValueError:
                raise DataError("non-numeric feature", line=line) from None

    y = np.asarray(targets, dtype=np.int64 if task == "classification" else np.float64)
    k = int(n_classes or (y.max() + 1 if task == "classification" else 1))
    if text_mode:
        width = max(1, max(len(r) for r in ids))
        mat = np.full((len(ids), width), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(ids), width), dtype=bool)
        for i, r in enumerate(ids):
            mat[i, : len(r)] = r
            mask[i, : len(r)] = True
        mask[:, 0] |= ~mask.any(axis=1)  # empty text still attends to one pad slot
        return Dataset(mat, y, task, k, mask)
    return Dataset(np.asarray(feats, dtype=np.float64), y, task, k)


def load_dataset(source: dict, seed=0, val_fraction=0.0, vocab_size=64, max_seq=16) -> Dataset:
    """``source`` is ``{"generator": name, **params}`` or ``{"path": file}``."""
    source = dict(source)
    has_gen, has_path = "generator" in source, "path" in source
    if has_gen == has_path:
        raise ConfigError("exactly one of 'generator' or 'path' is required", "data")
    if has_gen:
        name = source.pop("generator")
        if name not in GENERATORS:
            raise ConfigError(f"unknown generator {name!r}; known: {sorted(GENERATORS)}", "data.generator")
        source.setdefault("seed", seed)
        try:
            ds = GENERATORS[name](**source)
        except TypeError as exc:
            raise ConfigError(str(exc), "data") from None
    else:
        ds = load_csv(source["path"], vocab_size, max_seq, source.get("n_classes"))
    return assign_split(ds, val_fraction, seed) if val_fraction else ds
