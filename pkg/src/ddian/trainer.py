"""Training loop, evaluation, the ablation suite and the gradient-check harness."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import DomainDataset, HeldOutDataset, batches, leave_one_out, target_guard
from .errors import ConfigError, DataError, DimensionError, ProtocolError
from .losses import (
    HyperParams,
    LossBreakdown,
    center_loss,
    classification_loss,
    cross_entropy,
    discriminative_loss,
    global_domain_loss,
    local_domain_loss,
    local_domain_loss_from_logits,
    total_objective,
)
from .model import DdianModel, ModelDims, build_model, forward_all, predict, softmax_rows
from .nn import Schedules, SgdMomentum

LOCAL_GATES = ("soft", "hard")


@dataclass(frozen=True)
class TrainConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    use_global: bool = True
    use_local: bool = True
    use_discriminative: bool = True
    seed: int = 0
    eval_every: int = 5
    local_gate: str = "soft"
    val_fraction: float = 0.1
    feature_hidden: tuple[int, ...] = (32,)
    d_feat: int = 16
    global_hidden: tuple[int, ...] = (16,)
    local_hidden: tuple[int, ...] = (8,)

    def __post_init__(self):
        if self.local_gate not in LOCAL_GATES:
            raise ConfigError(f"local_gate must be one of {LOCAL_GATES}, got {self.local_gate!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        object.__setattr__(self, "feature_hidden", tuple(self.feature_hidden))
        object.__setattr__(self, "global_hidden", tuple(self.global_hidden))
        object.__setattr__(self, "local_hidden", tuple(self.local_hidden))

    @property
    def epochs(self) -> int:
        return self.hp.epochs

    def effective_hp(self) -> HyperParams:
        """Hyperparameters with the weight of every disabled component set to 0."""
        return replace(
            self.hp,
            gamma=self.hp.gamma if self.use_global else 0.0,
            beta=self.hp.beta if self.use_local else 0.0,
            alpha=self.hp.alpha if self.use_discriminative else 0.0,
        )

    def model_dims(self, in_dim, n_classes, n_domains) -> ModelDims:
        return ModelDims(
            in_dim, n_classes, n_domains, self.feature_hidden, self.d_feat, self.global_hidden, self.local_hidden
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("feature_hidden", "global_hidden", "local_hidden"):
            out[key] = list(out[key])
        return out


@dataclass
class RunResult:
    losses: list[LossBreakdown]
    val_history: list[tuple[int, float]]
    source_val_acc: float
    config: dict
    seed: int
    target_acc: float | None = None
    target_reads: int = 0
    source_domains: list[int] = field(default_factory=list)
    wall_clock_s: float = 0.0

    def to_dict(self, include_timing=False) -> dict:
        out = {
            "config": self.config,
            "losses": [b.to_dict() for b in self.losses],
            "seed": self.seed,
            "source_domains": self.source_domains,
            "source_val_acc": self.source_val_acc,
            "target_acc": self.target_acc,
            "target_reads": self.target_reads,
            "val_history": [{"epoch": e, "acc": a} for e, a in self.val_history],
        }
        if include_timing:
            out["wall_clock_s"] = self.wall_clock_s
        return out

    def to_json(self) -> str:
        # timing is excluded so identical runs serialize identically
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _split_validation(n: int, fraction: float, seed: int):
    order = np.random.default_rng([seed, 1]).permutation(n)
    n_val = int(round(fraction * n))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _mean_breakdown(items: list[LossBreakdown], weights: list[int]) -> LossBreakdown:
    w = np.asarray(weights, dtype=np.float64) / sum(weights)
    fields_ = ("l_cls", "l_dm", "l_dc", "l_dis")
    avg = {f: float(sum(wi * getattr(b, f) for wi, b in zip(w, items))) for f in fields_}
    first = items[0]
    total = avg["l_cls"] + first.beta * avg["l_dc"] + first.gamma * avg["l_dm"] + first.alpha * avg["l_dis"]
    return LossBreakdown(total=total, alpha=first.alpha, beta=first.beta, gamma=first.gamma, **avg)


def train(config: TrainConfig, sources: DomainDataset, on_epoch=None) -> tuple[DdianModel, RunResult]:
    """Run the joint adversarial training loop on the pooled source domains.

    ``on_epoch(epoch, breakdown)`` is called after every epoch if given.
    """
    if isinstance(sources, HeldOutDataset):
        raise ProtocolError("the held-out target domain cannot be used for training")
    missing = sources.missing_classes()
    if missing:
        dom, cls = missing[0]
        raise ProtocolError(f"class {cls} has no samples in source domain {dom}")
    if sources.n_domains < 2:
        raise ProtocolError("training needs at least 2 source domains")

    started = time.perf_counter()
    hp = config.effective_hp()
    with target_guard() as reads:
        train_idx, val_idx = _split_validation(len(sources), config.val_fraction, config.seed)
        train_ds = sources.subset(train_idx)
        val_ds = sources.subset(val_idx) if len(val_idx) else None

        dims = config.model_dims(sources.n_features, sources.n_classes, sources.n_domains)
        model = build_model(dims, config.hp, config.seed)
        opt = SgdMomentum(model.param_groups(), hp.eta0, hp.momentum)
        sched = Schedules(hp.eta0)

        steps_per_epoch = math.ceil(len(train_ds) / hp.batch_size)
        total_steps = hp.epochs * steps_per_epoch
        step_count = 0
        history, val_history = [], []
        for epoch in range(hp.epochs):
            parts_seen, sizes = [], []
            for X, y, d in batches(train_ds, hp.batch_size, config.seed, epoch):
                progress = step_count / total_steps
                lam = sched.grl_lambda_at(progress)
                with ad.Graph():
                    out = forward_all(
                        model,
                        X,
                        lam,
                        use_global=config.use_global,
                        use_local=config.use_local,
                        gate_labels=y if config.local_gate == "hard" else None,
                    )
                    parts = {"cls": classification_loss(out.class_logits, y)}
                    if config.use_global:
                        parts["dm"] = cross_entropy(out.global_domain_logits, d)
                    if config.use_local:
                        parts["dc"] = local_domain_loss_from_logits(out.local_domain_logits, out.local_gate, d)
                    if config.use_discriminative:
                        parts["dis"] = discriminative_loss(out.features, model.centers, y, hp.phi)
                    total, breakdown = total_objective(parts, hp)
                    ad.backward(total)
                opt.step(sched.lr_at(progress))
                opt.zero_grad()
                step_count += 1
                parts_seen.append(breakdown)
                sizes.append(len(y))
            summary = _mean_breakdown(parts_seen, sizes)
            history.append(summary)
            if on_epoch is not None:
                on_epoch(epoch, summary)
            if val_ds is not None and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == hp.epochs):
                val_history.append((epoch + 1, evaluate(model, val_ds)))

    result = RunResult(
        losses=history,
        val_history=val_history,
        source_val_acc=val_history[-1][1] if val_history else float("nan"),
        config=config.to_dict(),
        seed=config.seed,
        target_reads=reads.reads,
        source_domains=list(sources.domain_ids),
        wall_clock_s=time.perf_counter() - started,
    )
    return model, result


def evaluate(model: DdianModel, target) -> float:
    """Fraction of samples whose predicted class equals the label.

    ``target`` is a dataset or an ``(X, y)`` pair.
    """
    if isinstance(target, DomainDataset):
        X, y = target.X, target.y
    else:
        X, y = target
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y).reshape(-1)
    if len(y) == 0:
        raise DataError("cannot evaluate on an empty target set")
    if X.ndim != 2 or X.shape[1] != model.dims.in_dim:
        raise DimensionError(f"target features have shape {X.shape}, model expects width {model.dims.in_dim}")
    return float(np.mean(predict(model, X) == y))


# --- ablation -------------------------------------------------------------

VARIANTS = {
    "source-only": dict(use_global=False, use_local=False, use_discriminative=False),
    "global-only": dict(use_global=True, use_local=False, use_discriminative=False),
    "local-only": dict(use_global=False, use_local=True, use_discriminative=False),
    "discriminative-only": dict(use_global=False, use_local=False, use_discriminative=True),
    "full": dict(use_global=True, use_local=True, use_discriminative=True),
}


@dataclass(frozen=True)
class AblationRun:
    variant: str
    seed: int
    target_acc: float
    source_val_acc: float
    final_total_loss: float
    target_reads: int


@dataclass
class AblationTable:
    runs: list[AblationRun]

    def summary(self) -> dict[str, tuple[float, float]]:
        """variant -> (mean, sample std) of target accuracy; std is 0 for one seed."""
        out = {}
        for name in VARIANTS:
            accs = np.array([r.target_acc for r in self.runs if r.variant == name])
            if accs.size == 0:
                continue
            std = float(np.std(accs, ddof=1)) if accs.size > 1 else 0.0
            out[name] = (float(accs.mean()), std)
        return out

    def to_csv(self) -> str:
        lines = ["variant,seed,target_acc,source_val_acc,final_total_loss"]
        for r in self.runs:
            lines.append(f"{r.variant},{r.seed},{r.target_acc!r},{r.source_val_acc!r},{r.final_total_loss!r}")
        return "\n".join(lines) + "\n"

    def format(self) -> str:
        rows = [f"{'variant':<22}{'mean':>8}{'std':>8}"]
        for name, (mean, std) in self.summary().items():
            rows.append(f"{name:<22}{mean:>8.4f}{std:>8.4f}")
        return "\n".join(rows)


def _ablation_job(args):
    variant, config, sources, target = args
    model, result = train(config, sources)
    return AblationRun(
        variant=variant,
        seed=config.seed,
        target_acc=evaluate(model, target),
        source_val_acc=result.source_val_acc,
        final_total_loss=result.losses[-1].total,
        target_reads=result.target_reads,
    )


def ablation_suite(base_config: TrainConfig, ds: DomainDataset, target_id: int, n_seeds: int, workers: int = 1):
    """Train every variant on seeds ``base_config.seed .. + n_seeds - 1`` with shared splits."""
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    sources, target = leave_one_out(ds, target_id)
    jobs = []
    for name, flags in VARIANTS.items():
        for i in range(n_seeds):
            cfg = replace(base_config, seed=base_config.seed + i, **flags)
            jobs.append((name, cfg, sources, target))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_ablation_job, jobs))
    else:
        runs = [_ablation_job(job) for job in jobs]
    return AblationTable(runs)


# --- gradient check -------------------------------------------------------

GRADCHECK_LOSSES = ("classification", "global_domain", "local_domain", "center", "discriminative")
ADVERSARIAL = {"global_domain", "local_domain"}


@dataclass
class GradCheckReport:
    entries: dict[str, float]
    composite: float
    tolerance: float
    seed: int

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.entries.values()) and self.composite < self.tolerance

    def format(self) -> str:
        lines = [f"gradient check (seed {self.seed}, tolerance {self.tolerance:g})"]
        for name, err in self.entries.items():
            lines.append(f"  {name:<16} max rel err {err:.3e}  {'ok' if err < self.tolerance else 'FAIL'}")
        ok = "ok" if self.composite < self.tolerance else "FAIL"
        lines.append(f"  {'composite':<16} max rel err {self.composite:.3e}  {ok}")
        return "\n".join(lines)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale_ = max(np.linalg.norm(a), np.linalg.norm(b))
    diff = float(np.linalg.norm(a - b))
    return diff if scale_ < 1e-10 else diff / scale_


def _draw_problem(rng, dims: ModelDims, m: int, lam: float, margin=1e-3, tries=200):
    """Random model and batch whose relu inputs all stay ``margin`` away from 0."""
    for _ in range(tries):
        model = build_model(dims, seed=int(rng.integers(2**31)))
        model.centers.values[...] = rng.standard_normal(model.centers.shape)
        for p in model.parameters()[:-1]:
            p.values[...] = rng.normal(0.0, 0.7, size=p.shape)
        x = rng.standard_normal((m, dims.in_dim))
        y = rng.integers(0, dims.n_classes, size=m)
        d = rng.integers(0, dims.n_domains, size=m)
        pre = model.F.preactivations(x)
        h = x
        for layer in model.F.layers[:-1]:
            h = np.maximum(h @ layer.weight.values + layer.bias.values, 0.0)
        feats = h @ model.F.layers[-1].weight.values + model.F.layers[-1].bias.values
        probs = softmax_rows(feats @ model.C.layers[0].weight.values + model.C.layers[0].bias.values)
        pre += model.G_d.preactivations(feats)
        for k, head in enumerate(model.local_heads):
            pre += head.preactivations(feats * probs[:, k : k + 1])
        if all(np.abs(p).min() > margin for p in pre):
            return model, x, y, d, probs
    raise RuntimeError("could not draw a problem away from relu kinks")


def gradient_check(seed: int = 0, h: float = 1e-5, tolerance: float = 1e-4, lam: float = 0.7) -> GradCheckReport:
    """Compare backprop gradients of every loss against central differences.

    Parameters upstream of a gradient-reversal layer are compared against
    ``-lam`` times the numeric derivative of the adversarial term.
    """
    rng = np.random.default_rng(seed)
    dims = ModelDims(in_dim=3, n_classes=3, n_domains=3, feature_hidden=(4,), d_feat=5, global_hidden=(4,), local_hidden=(3,))
    hp = HyperParams(phi=0.05)
    model, x, y, d, probs = _draw_problem(rng, dims, m=4, lam=lam)
    params = model.parameters()
    upstream = {id(p) for p in model.F.parameters()}

    def component(name):
        features = model.F(ad.Tensor(x))
        if name == "classification":
            return classification_loss(model.C(features), y)
        if name == "global_domain":
            return global_domain_loss(features, model.G_d, d, lam)
        if name == "local_domain":
            return local_domain_loss(features, probs, model.local_heads, d, lam)
        if name == "center":
            return center_loss(features, model.centers, y)
        return discriminative_loss(features, model.centers, y, hp.phi)

    def numeric(name):
        grads = []
        for p in params:
            g = np.zeros(p.shape)
            for idx in np.ndindex(p.shape):
                old = p.values[idx]
                p.values[idx] = old + h
                up = component(name).item()
                p.values[idx] = old - h
                down = component(name).item()
                p.values[idx] = old
                g[idx] = (up - down) / (2 * h)
            grads.append(g)
        return grads

    def analytic(build):
        model.zero_grad()
        with ad.Graph():
            ad.backward(build())
        grads = [p.grad.copy() for p in params]
        model.zero_grad()
        return grads

    def expected(name, num):
        sign = -lam if name in ADVERSARIAL else 1.0
        return [g * sign if id(p) in upstream else g for p, g in zip(params, num)]

    numerics = {name: numeric(name) for name in GRADCHECK_LOSSES}
    entries = {}
    for name in GRADCHECK_LOSSES:
        got = analytic(lambda: component(name))
        want = expected(name, numerics[name])
        entries[name] = max(_rel_err(a, b) for a, b in zip(got, want))

    weights = {"classification": 1.0, "local_domain": hp.beta, "global_domain": hp.gamma, "discriminative": hp.alpha}

    def composite():
        parts = {
            "cls": component("classification"),
            "dc": component("local_domain"),
            "dm": component("global_domain"),
            "dis": component("discriminative"),
        }
        return total_objective(parts, hp)[0]

    got = analytic(composite)
    want = [np.zeros(p.shape) for p in params]
    for name, w in weights.items():
        for acc, g in zip(want, expected(name, numerics[name])):
            acc += w * g
    composite_err = max(_rel_err(a, b) for a, b in zip(got, want))
    return GradCheckReport(entries, composite_err, tolerance, seed)
