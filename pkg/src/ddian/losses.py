"""Loss terms of the DDIAN objective.

Every component is an unweighted batch statistic; the trade-off weights
alpha, beta, gamma are applied exactly once, in :func:`total_objective`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError, DimensionError, ParameterError
from .nn import Mlp


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5
    phi: float = 1e-3
    batch_size: int = 32
    momentum: float = 0.9
    eta0: float = 0.01
    epochs: int = 60

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.phi > 0:
            raise ConfigError(f"phi must be > 0, got {self.phi}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.eta0 > 0:
            raise ConfigError(f"eta0 must be > 0, got {self.eta0}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    l_cls: float
    l_dm: float
    l_dc: float
    l_dis: float
    total: float
    alpha: float
    beta: float
    gamma: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_labels(labels, n_rows: int, n_classes: int, what="label") -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n_rows:
        raise DimensionError(f"{n_rows} rows but {labels.shape[0]} {what}s")
    bad = np.flatnonzero((labels < 0) | (labels >= n_classes))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"row {i}: {what} {labels[i]} outside [0, {n_classes})")
    return labels


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Batch mean of ``-log softmax(logits)[i, labels[i]]``, optionally weighted per row."""
    m, k = logits.shape
    if m < 1:
        raise DimensionError("cross_entropy needs at least one row")
    labels = _check_labels(labels, m, k)
    onehot = np.zeros((m, k))
    onehot[np.arange(m), labels] = 1.0
    nll = -ad.sum_rows(ad.log_softmax_rows(logits) * Tensor(onehot))
    if weights is not None:
        nll = nll * Tensor(np.asarray(weights, dtype=np.float64).reshape(m, 1))
    return ad.mean_all(nll)


def classification_loss(logits: Tensor, labels) -> Tensor:
    return cross_entropy(logits, labels)


def global_domain_loss(features: Tensor, G_d: Mlp, domain_labels, lam: float) -> Tensor:
    return cross_entropy(G_d(ad.grad_reverse(features, lam)), domain_labels)


def check_simplex(class_probs: np.ndarray, tol=1e-4):
    sums = class_probs.sum(axis=1)
    bad = np.flatnonzero((np.abs(sums - 1.0) > tol) | (class_probs < -tol).any(axis=1))
    if bad.size:
        i = int(bad[0])
        raise ContractError(f"row {i}: class probabilities sum to {sums[i]!r}, not 1")


def local_domain_loss(features: Tensor, class_probs, heads, domain_labels, lam: float) -> Tensor:
    """Sum over classes k of the p_k-weighted domain cross-entropy of head k.

    Head k sees the reversed feature scaled by p_k. ``class_probs`` is used
    as a constant; no gradient reaches the classifier through this term.
    """
    probs = class_probs.values if isinstance(class_probs, Tensor) else np.asarray(class_probs, dtype=np.float64)
    m, k = probs.shape
    if m != features.shape[0]:
        raise DimensionError(f"{features.shape[0]} feature rows but {m} probability rows")
    if len(heads) != k:
        raise DimensionError(f"{k} classes but {len(heads)} local heads")
    check_simplex(probs)
    logits = [head(ad.grad_reverse(features * Tensor(probs[:, j : j + 1]), lam)) for j, head in enumerate(heads)]
    return local_domain_loss_from_logits(logits, probs, domain_labels)


def local_domain_loss_from_logits(local_logits, class_probs, domain_labels) -> Tensor:
    probs = class_probs.values if isinstance(class_probs, Tensor) else np.asarray(class_probs, dtype=np.float64)
    total = None
    for j, logits in enumerate(local_logits):
        term = cross_entropy(logits, domain_labels, weights=probs[:, j])
        total = term if total is None else total + term
    return total


def center_loss(features: Tensor, centers: Tensor, labels) -> Tensor:
    if features.shape[1] != centers.shape[1]:
        raise DimensionError(f"features {features.shape} and centers {centers.shape} differ in width")
    labels = _check_labels(labels, features.shape[0], centers.shape[0])
    diff = features - ad.gather_rows(centers, labels)
    return 0.5 * ad.sum_all(ad.square(diff))


def discriminative_loss(features: Tensor, centers: Tensor, labels, phi: float) -> Tensor:
    """0.5 * sum_i |f_i - c_{y_i}|^2 / (sum_{j != y_i} |f_i - c_j|^2 + phi)."""
    m, d = features.shape
    k = centers.shape[0]
    if k < 2:
        raise ConfigError("discriminative loss needs at least 2 classes")
    if not phi > 0:
        raise ParameterError(f"phi must be > 0, got {phi}")
    if centers.shape[1] != d:
        raise DimensionError(f"features {features.shape} and centers {centers.shape} differ in width")
    labels = _check_labels(labels, m, k)

    own = ad.sum_rows(ad.square(features - ad.gather_rows(centers, labels)))
    rivals = None
    for j in range(k):
        dist = ad.sum_rows(ad.square(features - ad.gather_rows(centers, np.full(m, j))))
        term = dist * Tensor((labels != j).astype(np.float64).reshape(m, 1))
        rivals = term if rivals is None else rivals + term
    return 0.5 * ad.sum_all(own / ad.add_scalar(rivals, phi))


def total_objective(parts, hp: HyperParams):
    """Combine ``{"cls", "dm", "dc", "dis"}`` into L_cls + b*L_dc + g*L_dm + a*L_dis.

    A missing or ``None`` part counts as a constant zero and its weight is
    recorded as 0 in the breakdown.
    """
    cls = parts["cls"]
    weights = {"dc": hp.beta, "dm": hp.gamma, "dis": hp.alpha}
    total = cls
    used = {}
    raw = {}
    for key, w in weights.items():
        part = parts.get(key)
        if part is None:
            used[key], raw[key] = 0.0, 0.0
            continue
        used[key], raw[key] = w, part.item()
        total = total + ad.scale(part, w)
    breakdown = LossBreakdown(
        l_cls=cls.item(),
        l_dm=raw["dm"],
        l_dc=raw["dc"],
        l_dis=raw["dis"],
        total=total.item(),
        alpha=used["dis"],
        beta=used["dc"],
        gamma=used["dm"],
    )
    return total, breakdown
