"""ddian command line: gen-data, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 runtime or I/O failure, 2 configuration or
validation failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import model as model_io
from .data import SyntheticSpec, generate, leave_one_out, load_csv, save_csv
from .errors import ConfigError, DdianError, ValidationError
from .losses import HyperParams
from .trainer import TrainConfig, ablation_suite, evaluate, gradient_check, train

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

MODEL_KEYS = ("feature_hidden", "d_feat", "global_hidden", "local_hidden")
TRAIN_KEYS = ("use_global", "use_local", "use_discriminative", "seed", "eval_every", "local_gate", "val_fraction")


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return obj


def _check_keys(section: str, obj, allowed) -> dict:
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(f"section '{section}' must be an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    return obj


def _build(cls, section: str, obj: dict):
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ConfigError(f"section '{section}': {exc}") from None


def synthetic_spec_from(obj: dict, section="spec") -> SyntheticSpec:
    obj = _check_keys(section, obj, [f.name for f in fields(SyntheticSpec)])
    return _build(SyntheticSpec, section, obj)


@dataclass(frozen=True)
class RunConfig:
    spec: SyntheticSpec | None
    csv: str | None
    target: int
    train: TrainConfig
    output: str

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = _check_keys("config", raw, ["data", "model", "hyper", "train", "output"])
        data = _check_keys("data", raw.get("data"), ["synthetic", "csv", "target"])
        if ("synthetic" in data) == ("csv" in data):
            raise ConfigError("section 'data' needs exactly one of 'synthetic' or 'csv'")
        if "target" not in data or not isinstance(data["target"], int):
            raise ConfigError("section 'data' needs an integer 'target' domain id")
        spec = synthetic_spec_from(data["synthetic"], "data.synthetic") if "synthetic" in data else None
        hp = _build(HyperParams, "hyper", _check_keys("hyper", raw.get("hyper"), [f.name for f in fields(HyperParams)]))
        model = _check_keys("model", raw.get("model"), MODEL_KEYS)
        train_sec = _check_keys("train", raw.get("train"), TRAIN_KEYS)
        cfg = _build(TrainConfig, "train", {"hp": hp, **model, **train_sec})
        output = raw.get("output", "run")
        if not isinstance(output, str) or not output:
            raise ConfigError("'output' must be a directory path")
        return cls(spec, data.get("csv"), data["target"], cfg, output)

    def to_dict(self) -> dict:
        """Fully resolved config; feeding it back reproduces the run."""
        data = {"target": self.target}
        if self.spec is not None:
            data["synthetic"] = self.spec.to_dict()
        else:
            data["csv"] = self.csv
        t = self.train.to_dict()
        return {
            "data": data,
            "model": {k: t[k] for k in MODEL_KEYS},
            "hyper": t["hp"],
            "train": {k: t[k] for k in TRAIN_KEYS},
            "output": self.output,
        }

    def load_dataset(self):
        return generate(self.spec) if self.spec is not None else load_csv(self.csv)


class _Outputs:
    """Tracks files written by a command so a failure can remove them."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.created_dir = not self.dir.exists()
        self.written: list[Path] = []

    def path(self, name) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.written.append(p)
        return p

    def write_text(self, name, text):
        self.path(name).write_text(text)

    def cleanup(self):
        for p in self.written:
            if p.exists():
                p.unlink()
        if self.created_dir and self.dir.exists() and not any(self.dir.iterdir()):
            self.dir.rmdir()


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def cmd_gen_data(args) -> int:
    spec = synthetic_spec_from(_read_json(args.spec))
    ds = generate(spec)
    out = Path(args.out)
    try:
        save_csv(ds, out)
    except BaseException:
        if out.exists():
            out.unlink()
        raise
    counts = ds.counts()
    print(f"wrote {len(ds)} samples to {out}")
    print("domain " + " ".join(f"class{k:<3}" for k in range(ds.n_classes)))
    for i, row in enumerate(counts):
        print(f"{ds.domain_ids[i]:<6} " + " ".join(f"{c:<8}" for c in row))
    return EXIT_OK


def _loss_csv(result) -> str:
    lines = ["epoch,l_cls,l_dm,l_dc,l_dis,total"]
    for e, b in enumerate(result.losses, 1):
        lines.append(f"{e},{b.l_cls!r},{b.l_dm!r},{b.l_dc!r},{b.l_dis!r},{b.total!r}")
    return "\n".join(lines) + "\n"


def cmd_train(args) -> int:
    cfg = RunConfig.from_dict(_read_json(args.config))
    ds = cfg.load_dataset()
    sources, target = leave_one_out(ds, cfg.target)
    outputs = _Outputs(cfg.output)
    try:
        outputs.write_text("config.json", _dumps(cfg.to_dict()))
        model, result = train(cfg.train, sources)
        result.target_acc = evaluate(model, target)
        model_io.save(model, outputs.path("model.ddia"))
        outputs.write_text("result.json", result.to_json())
        outputs.write_text("losses.csv", _loss_csv(result))
        outputs.write_text("timing.json", _dumps({"wall_clock_s": result.wall_clock_s}))
    except BaseException:
        outputs.cleanup()
        raise
    print(f"source validation accuracy {result.source_val_acc:.4f}")
    print(f"target domain {cfg.target} accuracy {result.target_acc:.4f}")
    print(f"outputs in {outputs.dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = model_io.load(args.model)
    ds = load_csv(args.data)
    if args.target not in ds.domain_ids:
        raise ValidationError(f"domain {args.target} not found in {args.data}; available: {ds.domain_ids}")
    mask = ds.d == ds.domain_ids.index(args.target)
    print(f"{evaluate(model, (ds.X[mask], ds.y[mask])):.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    cfg = RunConfig.from_dict(_read_json(args.config))
    ds = cfg.load_dataset()
    outputs = _Outputs(cfg.output)
    try:
        table = ablation_suite(cfg.train, ds, cfg.target, args.seeds, workers=args.workers)
        outputs.write_text("ablation.csv", table.to_csv())
        outputs.write_text("config.json", _dumps(cfg.to_dict()))
    except BaseException:
        outputs.cleanup()
        raise
    print(table.format())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradient_check(args.seed)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddian", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-domain dataset")
    p.add_argument("--spec", required=True, help="JSON file with the synthetic dataset spec")
    p.add_argument("--out", required=True, help="CSV file to write")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on all but the target domain")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a saved model on one domain of a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True, type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the component ablation over several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--workers", type=int, default=1, help="parallel training processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DdianError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything unforeseen is still a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
