"""The assembled DDIAN network and its binary file format."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, ModelFormatError
from .losses import HyperParams
from .nn import Mlp, init_params

MAGIC = b"DDIA"
FORMAT_VERSION = 1

# multiplier on the base learning rate for everything trained from scratch
HEAD_LR_MULT = 10.0


@dataclass(frozen=True)
class ModelDims:
    in_dim: int
    n_classes: int
    n_domains: int
    feature_hidden: tuple[int, ...] = (32,)
    d_feat: int = 16
    global_hidden: tuple[int, ...] = (16,)
    local_hidden: tuple[int, ...] = (8,)

    def __post_init__(self):
        object.__setattr__(self, "feature_hidden", tuple(int(w) for w in self.feature_hidden))
        object.__setattr__(self, "global_hidden", tuple(int(w) for w in self.global_hidden))
        object.__setattr__(self, "local_hidden", tuple(int(w) for w in self.local_hidden))
        widths = (self.in_dim, self.n_classes, self.n_domains, self.d_feat)
        widths += self.feature_hidden + self.global_hidden + self.local_hidden
        if min(widths) < 1:
            raise ConfigError(f"all model widths must be >= 1: {self}")
        if self.n_domains < 2:
            raise ConfigError("domain discriminators need at least 2 source domains")

    @property
    def feature_dims(self):
        return [self.in_dim, *self.feature_hidden, self.d_feat]

    @property
    def classifier_dims(self):
        return [self.d_feat, self.n_classes]

    @property
    def global_dims(self):
        return [self.d_feat, *self.global_hidden, self.n_domains]

    @property
    def local_dims(self):
        return [self.d_feat, *self.local_hidden, self.n_domains]

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "n_classes": self.n_classes,
            "n_domains": self.n_domains,
            "feature_hidden": list(self.feature_hidden),
            "d_feat": self.d_feat,
            "global_hidden": list(self.global_hidden),
            "local_hidden": list(self.local_hidden),
        }


@dataclass
class DdianModel:
    dims: ModelDims
    F: Mlp
    C: Mlp
    G_d: Mlp
    local_heads: list[Mlp]
    centers: Tensor
    hp: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self):
        d = self.dims.d_feat
        if self.F.dims[-1] != d or self.C.dims[0] != d or self.G_d.dims[0] != d:
            raise DimensionError("feature width disagrees between F, C and G_d")
        if len(self.local_heads) != self.dims.n_classes:
            raise DimensionError(f"{self.dims.n_classes} classes but {len(self.local_heads)} local heads")
        if any(h.dims[0] != d for h in self.local_heads):
            raise DimensionError("a local head does not take the feature width as input")
        if self.centers.shape != (self.dims.n_classes, d):
            raise DimensionError(f"centers have shape {self.centers.shape}, expected {(self.dims.n_classes, d)}")

    def parameters(self) -> list[Tensor]:
        """All trainable tensors in registration order (also the file order)."""
        params = self.F.parameters() + self.C.parameters() + self.G_d.parameters()
        for head in self.local_heads:
            params += head.parameters()
        params.append(self.centers)
        return params

    def param_groups(self):
        """Optimizer groups: the feature extractor at the base rate, the rest at 10x."""
        rest = self.parameters()[len(self.F.parameters()) :]
        return [(self.F.parameters(), 1.0), (rest, HEAD_LR_MULT)]

    def zero_grad(self):
        ad.zero_grad_all(self.parameters())


def build_model(dims: ModelDims, hp: HyperParams | None = None, seed: int = 0) -> DdianModel:
    f_seed, c_seed, g_seed, heads_seed, centers_seed = np.random.SeedSequence(seed).spawn(5)
    heads = [init_params(dims.local_dims, s) for s in heads_seed.spawn(dims.n_classes)]
    centers = 0.1 * np.random.default_rng(centers_seed).standard_normal((dims.n_classes, dims.d_feat))
    return DdianModel(
        dims=dims,
        F=init_params(dims.feature_dims, f_seed),
        C=init_params(dims.classifier_dims, c_seed),
        G_d=init_params(dims.global_dims, g_seed),
        local_heads=heads,
        centers=Tensor(centers, requires_grad=True, name="centers"),
        hp=hp or HyperParams(),
    )


@dataclass
class ForwardOutputs:
    features: Tensor
    class_logits: Tensor
    class_probs: np.ndarray
    global_domain_logits: Tensor | None
    local_domain_logits: list[Tensor] | None
    local_gate: np.ndarray | None = None


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_all(model: DdianModel, x, lam: float, use_global=True, use_local=True, gate_labels=None) -> ForwardOutputs:
    """One pass through every branch of the network.

    With ``gate_labels`` given, the local heads are gated by the one-hot true
    label instead of the predicted class probabilities.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[1] != model.dims.in_dim:
        raise DimensionError(f"input has {x.shape[1]} columns, model expects {model.dims.in_dim}")
    features = model.F(x)
    logits = model.C(features)
    probs = softmax_rows(logits.values)

    global_logits = None
    if use_global:
        global_logits = model.G_d(ad.grad_reverse(features, lam))

    local_logits = gate = None
    if use_local:
        gate = probs
        if gate_labels is not None:
            gate = np.zeros_like(probs)
            gate[np.arange(len(probs)), np.asarray(gate_labels, dtype=np.int64)] = 1.0
        local_logits = [
            head(ad.grad_reverse(features * Tensor(gate[:, k : k + 1]), lam))
            for k, head in enumerate(model.local_heads)
        ]
    return ForwardOutputs(features, logits, probs, global_logits, local_logits, gate)


def predict(model: DdianModel, x) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index."""
    x = np.asarray(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dims.in_dim:
        raise DimensionError(f"input shape {x.shape} does not match model input width {model.dims.in_dim}")
    h = x
    for net in (model.F, model.C):
        for i, layer in enumerate(net.layers):
            h = h @ layer.weight.values + layer.bias.values
            if i < len(net.layers) - 1:
                h = np.maximum(h, 0.0)
    return np.argmax(h, axis=1)


# --- file format ----------------------------------------------------------
#
#   "DDIA" | u32 version | u32 in_dim, n_classes, n_domains, d_feat
#   | (u32 count, u32 widths...) for feature_hidden, global_hidden, local_hidden
#   | f64 alpha, beta, gamma, phi, momentum, eta0 | u32 batch_size, epochs
#   | u64 n_values | f64 values in parameter registration order
#
# All integers and floats little-endian.


def _encode(model: DdianModel) -> bytes:
    d, hp = model.dims, model.hp
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    out.append(struct.pack("<4I", d.in_dim, d.n_classes, d.n_domains, d.d_feat))
    for widths in (d.feature_hidden, d.global_hidden, d.local_hidden):
        out.append(struct.pack(f"<I{len(widths)}I", len(widths), *widths))
    out.append(struct.pack("<6d", hp.alpha, hp.beta, hp.gamma, hp.phi, hp.momentum, hp.eta0))
    out.append(struct.pack("<2I", hp.batch_size, hp.epochs))
    values = np.concatenate([p.values.ravel() for p in model.parameters()])
    out.append(struct.pack("<Q", values.size))
    out.append(values.astype("<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise ModelFormatError(f"model file truncated at byte {self.pos} (needed {size} more)")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals


def _decode(buf: bytes) -> DdianModel:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ModelFormatError("not a DDIAN model file (bad magic bytes)")
    r = _Reader(buf)
    r.pos = 4
    (version,) = r.take("<I")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}, expected {FORMAT_VERSION}")
    in_dim, n_classes, n_domains, d_feat = r.take("<4I")
    hidden = []
    for _ in range(3):
        (count,) = r.take("<I")
        if count > 1024:
            raise ModelFormatError(f"implausible layer count {count}")
        hidden.append(r.take(f"<{count}I"))
    alpha, beta, gamma, phi, momentum, eta0 = r.take("<6d")
    batch_size, epochs = r.take("<2I")
    (n_values,) = r.take("<Q")
    try:
        dims = ModelDims(in_dim, n_classes, n_domains, hidden[0], d_feat, hidden[1], hidden[2])
        hp = HyperParams(alpha, beta, gamma, phi, batch_size, momentum, eta0, epochs)
    except ConfigError as exc:
        raise ModelFormatError(f"inconsistent model header: {exc}") from None
    model = build_model(dims, hp, seed=0)
    params = model.parameters()
    expected = sum(p.values.size for p in params)
    if n_values != expected:
        raise ModelFormatError(f"payload declares {n_values} values but the architecture needs {expected}")
    remaining = len(buf) - r.pos
    if remaining < 8 * expected:
        raise ModelFormatError(f"model file truncated: {remaining} payload bytes, need {8 * expected}")
    if remaining > 8 * expected:
        raise ModelFormatError(f"{remaining - 8 * expected} unexpected trailing bytes in model file")
    values = np.frombuffer(buf, dtype="<f8", count=expected, offset=r.pos).astype(np.float64)
    offset = 0
    for p in params:
        n = p.values.size
        p.values[...] = values[offset : offset + n].reshape(p.shape)
        offset += n
    return model


def save(model: DdianModel, path) -> None:
    data = _encode(model)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".ddia-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> DdianModel:
    with open(path, "rb") as fh:
        return _decode(fh.read())
