"""Multi-domain datasets: synthetic generators, CSV I/O, splitting and batching."""

from __future__ import annotations

import contextlib
import contextvars
import csv
import io
import math
import os
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError, ParseError, ProtocolError


class Sample(NamedTuple):
    x: np.ndarray
    y: int
    d: int


class DomainDataset:
    """Samples ``(x, y, d)`` with dense domain ids ``0..n_domains-1``.

    ``domain_ids[d]`` is the original id of dense domain ``d``; it survives
    splitting so results can be reported against the ids users chose.
    """

    def __init__(self, X, y, d, n_classes, domain_ids=None):
        X = np.array(X, dtype=np.float64)
        y = np.array(y, dtype=np.int64).reshape(-1)
        d = np.array(d, dtype=np.int64).reshape(-1)
        if X.ndim != 2:
            raise DataError(f"features must be a 2-d array, got shape {X.shape}")
        if not (len(X) == len(y) == len(d)):
            raise DataError(f"{len(X)} feature rows, {len(y)} labels, {len(d)} domain ids")
        if len(X) == 0:
            raise DataError("no samples")
        if not np.isfinite(X).all():
            raise DataError("features must be finite")
        n_classes = int(n_classes)
        if y.min() < 0 or y.max() >= n_classes:
            raise DataError(f"labels must lie in [0, {n_classes})")
        if domain_ids is None:
            domain_ids = list(range(int(d.max()) + 1))
        domain_ids = [int(i) for i in domain_ids]
        if d.min() < 0 or d.max() >= len(domain_ids):
            raise DataError(f"domain ids must lie in [0, {len(domain_ids)})")
        counts = np.bincount(d, minlength=len(domain_ids))
        if (counts == 0).any():
            empty = [domain_ids[i] for i in np.flatnonzero(counts == 0)]
            raise DataError(f"domains without samples: {empty}")
        for arr in (X, y, d):
            arr.flags.writeable = False
        self._X, self._y, self._d = X, y, d
        self.n_classes = n_classes
        self.domain_ids = domain_ids

    @property
    def X(self) -> np.ndarray:
        return self._X

    @property
    def y(self) -> np.ndarray:
        return self._y

    @property
    def d(self) -> np.ndarray:
        return self._d

    @property
    def n_domains(self) -> int:
        return len(self.domain_ids)

    @property
    def n_features(self) -> int:
        return self._X.shape[1]

    def __len__(self):
        return len(self._y)

    def sample(self, i: int) -> Sample:
        return Sample(self.X[i], int(self.y[i]), int(self.d[i]))

    def counts(self) -> np.ndarray:
        """n_domains x n_classes table of sample counts."""
        table = np.zeros((self.n_domains, self.n_classes), dtype=np.int64)
        np.add.at(table, (self.d, self.y), 1)
        return table

    def missing_classes(self) -> list[tuple[int, int]]:
        """(original domain id, class) pairs with no samples."""
        table = self.counts()
        return [(self.domain_ids[i], int(k)) for i, k in zip(*np.nonzero(table == 0))]

    def subset(self, index) -> "DomainDataset":
        index = np.asarray(index, dtype=np.int64)
        return DomainDataset(self.X[index], self.y[index], self.d[index], self.n_classes, self.domain_ids)

    def __eq__(self, other):
        if not isinstance(other, DomainDataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and self.domain_ids == other.domain_ids
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.d, other.d)
        )

    def __repr__(self):
        return (
            f"{type(self).__name__}(n={len(self)}, features={self.n_features}, "
            f"classes={self.n_classes}, domains={self.domain_ids})"
        )


# --- target-leak instrumentation -----------------------------------------


class ReadCounter:
    def __init__(self):
        self.reads = 0


_guard: contextvars.ContextVar[ReadCounter | None] = contextvars.ContextVar("ddian_target_guard", default=None)


@contextlib.contextmanager
def target_guard():
    """Count every access to held-out samples made inside the block."""
    counter = ReadCounter()
    token = _guard.set(counter)
    try:
        yield counter
    finally:
        _guard.reset(token)


class HeldOutDataset(DomainDataset):
    """The target side of a leave-one-domain-out split.

    Sample arrays stay readable, but every read made while a
    :func:`target_guard` is active is counted.
    """

    def _touch(self):
        counter = _guard.get()
        if counter is not None:
            counter.reads += 1

    @property
    def X(self):
        self._touch()
        return self._X

    @property
    def y(self):
        self._touch()
        return self._y

    @property
    def d(self):
        self._touch()
        return self._d


def leave_one_out(ds: DomainDataset, target: int) -> tuple[DomainDataset, HeldOutDataset]:
    """Split off original domain id ``target``; sources get dense ids 0..N-1."""
    if target not in ds.domain_ids:
        raise ProtocolError(f"unknown target domain {target}; available: {ds.domain_ids}")
    if ds.n_domains - 1 < 2:
        raise ProtocolError(f"leave-one-out needs >= 2 source domains, dataset has {ds.n_domains} domains")
    t = ds.domain_ids.index(target)
    keep = ds.d != t
    remap = np.full(ds.n_domains, -1, dtype=np.int64)
    kept = [i for i in range(ds.n_domains) if i != t]
    remap[kept] = np.arange(len(kept))
    sources = DomainDataset(ds.X[keep], ds.y[keep], remap[ds.d[keep]], ds.n_classes, [ds.domain_ids[i] for i in kept])
    held = HeldOutDataset(ds.X[~keep], ds.y[~keep], np.zeros(int((~keep).sum()), dtype=np.int64), ds.n_classes, [target])
    return sources, held


def batches(ds: DomainDataset, batch_size: int, seed: int, epoch: int):
    """One epoch of shuffled ``(X, y, d)`` mini-batches; the last may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(len(ds))
    X, y, d = ds.X, ds.y, ds.d
    return [(X[idx], y[idx], d[idx]) for idx in (order[i : i + batch_size] for i in range(0, len(order), batch_size))]


# --- synthetic generation -------------------------------------------------

FAMILIES = ("rotated-blobs", "rotated-moons")


@dataclass(frozen=True)
class SyntheticSpec:
    family: str = "rotated-blobs"
    n_classes: int = 3
    angles: tuple[float, ...] = (0.0, 25.0, 50.0, 75.0)
    per_class: int = 150
    sigma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "rotated-moons" and self.n_classes != 2:
            raise ConfigError(f"moons requires K=2, got K={self.n_classes}")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if len(self.angles) < 2:
            raise ConfigError("a synthetic dataset needs at least 2 domains")
        if len(set(self.angles)) != len(self.angles):
            raise ConfigError(f"domain angles must be distinct, got {self.angles}")
        if self.per_class < 1:
            raise ConfigError("per_class must be >= 1")
        if not self.sigma >= 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["angles"] = list(self.angles)
        return out


def rotate(x: np.ndarray, degrees: float) -> np.ndarray:
    theta = math.radians(degrees % 360.0)
    c, s = math.cos(theta), math.sin(theta)
    return x @ np.array([[c, s], [-s, c]])


def _domain_cloud(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, index])
    k, n = spec.n_classes, spec.per_class
    labels = np.repeat(np.arange(k), n)
    if spec.family == "rotated-blobs":
        phase = 2.0 * np.pi * np.arange(k) / k
        means = np.stack([np.cos(phase), np.sin(phase)], axis=1)
        base = means[labels]
    else:
        t = rng.uniform(0.0, np.pi, size=2 * n)
        upper = np.stack([np.cos(t[:n]), np.sin(t[:n])], axis=1)
        lower = np.stack([1.0 - np.cos(t[n:]), 0.5 - np.sin(t[n:])], axis=1)
        base = np.vstack([upper, lower]) - np.array([0.5, 0.25])
    noise = rng.standard_normal(base.shape)
    return base + spec.sigma * noise, labels


def generate(spec: SyntheticSpec) -> DomainDataset:
    """Draw every domain's base cloud from ``(seed, domain index)`` and rotate it."""
    xs, ys, ds = [], [], []
    for i, angle in enumerate(spec.angles):
        base, labels = _domain_cloud(spec, i)
        xs.append(rotate(base, angle))
        ys.append(labels)
        ds.append(np.full(len(labels), i))
    return DomainDataset(np.vstack(xs), np.concatenate(ys), np.concatenate(ds), spec.n_classes)


# --- CSV ------------------------------------------------------------------
#
# Optional first line "# n_classes=K", then the header
# "domain,label,f0,...,f{d-1}" and one sample per row. Domain ids are the
# original ids; they are densified on load.


def save_csv(ds: DomainDataset, path) -> None:
    buf = io.StringIO()
    buf.write(f"# n_classes={ds.n_classes}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["domain", "label"] + [f"f{j}" for j in range(ds.n_features)])
    X, y, d = ds.X, ds.y, ds.d
    for i in range(len(y)):
        writer.writerow([ds.domain_ids[d[i]], int(y[i])] + [repr(float(v)) for v in X[i]])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _parse_meta(line: str) -> dict:
    meta = {}
    for item in line.lstrip("#").split():
        key, _, value = item.partition("=")
        meta[key.strip()] = value.strip()
    return meta


def load_csv(path) -> DomainDataset:
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    lineno = 0
    declared_k = None
    while lineno < len(lines) and lines[lineno].startswith("#"):
        meta = _parse_meta(lines[lineno])
        if "n_classes" in meta:
            try:
                declared_k = int(meta["n_classes"])
            except ValueError:
                raise ParseError(f"bad n_classes value {meta['n_classes']!r}", lineno + 1) from None
            if declared_k < 1:
                raise ParseError("n_classes must be >= 1", lineno + 1)
        lineno += 1
    rows = [(n + 1, line) for n, line in enumerate(lines) if n >= lineno and line.strip()]
    if not rows:
        raise ParseError(f"{os.fspath(path)}: no samples")
    header_line, header_text = rows[0]
    header = next(csv.reader([header_text]))
    n_feat = len(header) - 2
    expected = ["domain", "label"] + [f"f{j}" for j in range(n_feat)]
    if n_feat < 1 or [h.strip() for h in header] != expected:
        raise ParseError("missing or malformed header; expected 'domain,label,f0,...'", header_line)
    if len(rows) == 1:
        raise ParseError(f"{os.fspath(path)}: no samples")

    X = np.empty((len(rows) - 1, n_feat))
    y = np.empty(len(rows) - 1, dtype=np.int64)
    dom = np.empty(len(rows) - 1, dtype=np.int64)
    for i, (n, text) in enumerate(rows[1:]):
        fields = next(csv.reader([text]))
        if len(fields) != n_feat + 2:
            raise ParseError(f"expected {n_feat + 2} fields, found {len(fields)}", n)
        try:
            dom[i] = int(fields[0])
            y[i] = int(fields[1])
        except ValueError:
            raise ParseError("domain and label must be integers", n) from None
        if dom[i] < 0 or y[i] < 0:
            raise ParseError("domain and label ids must be non-negative", n)
        if declared_k is not None and y[i] >= declared_k:
            raise ParseError(f"label {y[i]} >= declared n_classes={declared_k}", n)
        try:
            X[i] = [float(v) for v in fields[2:]]
        except ValueError:
            raise ParseError("non-numeric feature value", n) from None
        if not np.isfinite(X[i]).all():
            raise ParseError("non-finite feature value", n)

    originals = sorted(set(dom.tolist()))
    dense = np.searchsorted(np.array(originals), dom)
    k = declared_k if declared_k is not None else int(y.max()) + 1
    return DomainDataset(X, y, dense, k, originals)
