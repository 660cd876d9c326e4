"""Experiment harness: config files, CLI, CSV emission.

Config files are flat `key = value` lines with dotted section prefixes
(`noise.epsilon = 0.4`); `#` starts a comment. Every key can be
overridden on the command line with `--override key=value`, so a single
checked-in config plus a short command line fully determines a run.

Exit codes: 0 ok, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import math
import os
import sys
from dataclasses import dataclass, field

from .coordinator import FederationConfig, run_training
from .datagen import (
    Dataset,
    load_idx,
    make_blobs,
    partition_iid,
    split_per_class,
    subset,
)
from .errors import ConfigError, FednoiseError
from .localnode import HyperParams, METHODS
from .metrics import MetricsRecord, write_csv
from .noise import NoiseSpec, apply_noise
from .numkit import ModelParams

DATASET_KINDS = ("blobs", "idx")

SUMMARY_WINDOW = 10  # rounds averaged for the headline accuracy


@dataclass
class DatasetSpec:
    """Where training data comes from: synthetic blobs or IDX files."""

    kind: str = "blobs"
    # blobs
    classes: int = 4
    dim: int = 10
    train_per_class: int = 500
    test_per_class: int = 125
    spread: float = 0.7
    seed: int = 0
    # idx
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    subset: int = 0  # keep only the first n training examples (0 = all)

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind: must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "blobs":
            if self.classes < 2:
                raise ConfigError("dataset.classes: need at least 2")
            if self.dim < 1 or self.train_per_class < 1 or self.test_per_class < 1:
                raise ConfigError("dataset: dim and per-class sizes must be positive")
            if self.spread <= 0:
                raise ConfigError("dataset.spread: must be positive")
            if self.seed < 0:
                raise ConfigError("dataset.seed: must be >= 0")
        else:
            for key in ("images", "labels", "test_images", "test_labels"):
                if not getattr(self, key):
                    raise ConfigError(f"dataset.{key}: required when dataset.kind = idx")
            if self.subset < 0:
                raise ConfigError("dataset.subset: must be >= 0")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    fed: FederationConfig = field(default_factory=FederationConfig)
    hp: HyperParams = field(default_factory=HyperParams)
    method: str = "proposed"
    seed: int = 0
    output: str = ""
    workers: int | None = None


_TOP_LEVEL_TYPES = {"method": "str", "seed": "int", "output": "str", "workers": "int | None"}


def _parse_value(raw: str, type_str: str, key: str):
    ts = type_str.replace(" ", "")
    optional = "None" in ts
    base = ts.replace("|None", "").replace("None|", "")
    if optional and raw.lower() in ("none", "null"):
        return None
    try:
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        if base == "bool":
            lower = raw.lower()
            if lower in ("true", "yes", "1"):
                return True
            if lower in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if base == "str":
            return raw
    except ValueError:
        raise ConfigError(f"{key}: expected {base}, got {raw!r}") from None
    raise ConfigError(f"{key}: unsupported value type {type_str!r}")


def apply_item(cfg: ExperimentConfig, key: str, raw: str) -> None:
    """Set one dotted config key, with type checking against the schema."""
    sections = {"dataset": cfg.dataset, "noise": cfg.noise, "fed": cfg.fed, "hp": cfg.hp}
    if "." in key:
        sec_name, _, field_name = key.partition(".")
        sec = sections.get(sec_name)
        if sec is None:
            raise ConfigError(f"{key}: unknown section {sec_name!r}")
        fmap = {f.name: f for f in dataclasses.fields(sec)}
        if field_name not in fmap:
            raise ConfigError(f"{key}: unknown key in section {sec_name!r}")
        setattr(sec, field_name, _parse_value(raw, str(fmap[field_name].type), key))
    else:
        if key not in _TOP_LEVEL_TYPES:
            raise ConfigError(f"{key}: unknown top-level key")
        setattr(cfg, key, _parse_value(raw, _TOP_LEVEL_TYPES[key], key))


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not eq or not key or not value:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw_line.strip()!r}")
        if key in items:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        items[key] = value
    return items


def load_config(path: str | None = None, overrides: list[str] = ()) -> ExperimentConfig:
    """Defaults, then config file, then `key=value` overrides, in that order."""
    cfg = ExperimentConfig()
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from e
        for key, value in parse_config_text(text, origin=path).items():
            apply_item(cfg, key, value)
    for ov in overrides:
        key, eq, value = ov.partition("=")
        if not eq or not key.strip():
            raise ConfigError(f"--override: expected key=value, got {ov!r}")
        apply_item(cfg, key.strip(), value.strip())
    return cfg


def resolve_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Validated deep copy with derived defaults (tau, warmup) filled in."""
    out = copy.deepcopy(cfg)
    out.dataset.validate()
    out.noise.validate()
    out.fed.validate()
    out.hp = out.hp.resolved(out.noise.epsilon)
    out.hp.validate()
    if out.method not in METHODS:
        raise ConfigError(f"method: must be one of {METHODS}, got {out.method!r}")
    if out.seed < 0:
        raise ConfigError("seed: must be >= 0")
    if out.noise.seed < 0:
        raise ConfigError("noise.seed: must be >= 0")
    if out.workers is not None and out.workers < 1:
        raise ConfigError("workers: must be >= 1")
    return out


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_items(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    """All config keys with their current values, in stable order."""
    out = [(k, _format_value(getattr(cfg, k))) for k in _TOP_LEVEL_TYPES]
    for sec_name in ("dataset", "noise", "fed", "hp"):
        sec = getattr(cfg, sec_name)
        for f in dataclasses.fields(sec):
            out.append((f"{sec_name}.{f.name}", _format_value(getattr(sec, f.name))))
    return out


def build_datasets(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """(train, test) pair per the dataset spec; given labels still clean."""
    if spec.kind == "blobs":
        full = make_blobs(
            C=spec.classes,
            per_class=spec.train_per_class + spec.test_per_class,
            d_in=spec.dim,
            spread=spec.spread,
            seed=spec.seed,
        )
        return split_per_class(full, spec.train_per_class)
    train = load_idx(spec.images, spec.labels)
    test = load_idx(spec.test_images, spec.test_labels)
    C = max(train.C, test.C)
    train.C = C
    test.C = C
    if spec.subset > 0:
        train = subset(train, spec.subset)
    return train, test


def run_experiment(cfg: ExperimentConfig) -> tuple[ModelParams, list[MetricsRecord]]:
    """Wire data generation, corruption, and training; write the CSV if asked."""
    rcfg = resolve_config(cfg)
    train, test = build_datasets(rcfg.dataset)
    shards = partition_iid(train, rcfg.fed.num_clients, rcfg.seed)
    apply_noise(train, shards, rcfg.noise)
    params, records = run_training(
        train,
        test,
        shards,
        rcfg.fed,
        rcfg.hp,
        rcfg.seed,
        method=rcfg.method,
        workers=rcfg.workers,
    )
    if rcfg.output:
        write_csv(rcfg.output, records)
    return params, records


def summary_accuracy(records: list[MetricsRecord], window: int = SUMMARY_WINDOW) -> float:
    """Mean test accuracy over the last `window` rounds (all, if fewer)."""
    if not records:
        return math.nan
    tail = records[-window:]
    return sum(r.test_accuracy for r in tail) / len(tail)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; remap to the config-error code."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fednoise", description="Federated noisy-label training bench.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_common(p):
        p.add_argument("--config", help="config file of key = value lines")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="set one config key; repeatable, applied after the file",
        )

    p_run = sub.add_parser("run", help="run one experiment")
    add_common(p_run)
    p_run.add_argument("--method", choices=METHODS, help="shortcut for --override method=...")
    p_run.add_argument("--seed", type=int, help="shortcut for --override seed=...")
    p_run.add_argument("--output", help="shortcut for --override output=...")
    p_run.add_argument("--workers", type=int, help="shortcut for --override workers=...")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="grid over noise ratios (and methods)")
    add_common(p_sweep)
    p_sweep.add_argument("--epsilon", required=True, help="comma-separated noise ratios")
    p_sweep.add_argument("--methods", help="comma-separated methods (default: config's)")
    p_sweep.add_argument("--output-dir", default=".", help="directory for per-cell CSVs")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_val = sub.add_parser("validate-config", help="parse, validate, and echo the config")
    add_common(p_val)
    p_val.set_defaults(func=_cmd_validate)
    return parser


def _cmd_run(args) -> int:
    extra = []
    if args.method is not None:
        extra.append(f"method={args.method}")
    if args.seed is not None:
        extra.append(f"seed={args.seed}")
    if args.output is not None:
        extra.append(f"output={args.output}")
    if args.workers is not None:
        extra.append(f"workers={args.workers}")
    cfg = load_config(args.config, extra + list(args.override))
    _, records = run_experiment(cfg)
    line = (
        f"method={cfg.method} rounds={len(records)} "
        f"acc_last10={summary_accuracy(records):.4f}"
    )
    if records:
        line += f" acc_final={records[-1].test_accuracy:.4f}"
    if cfg.output:
        line += f" csv={cfg.output}"
    print(line)
    return 0


def _cmd_sweep(args) -> int:
    try:
        eps_list = [float(x) for x in args.epsilon.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--epsilon: expected comma-separated floats, got {args.epsilon!r}")
    if not eps_list:
        raise ConfigError("--epsilon: no values given")
    base = load_config(args.config, list(args.override))
    methods = (
        [m.strip() for m in args.methods.split(",") if m.strip()]
        if args.methods
        else [base.method]
    )
    os.makedirs(args.output_dir, exist_ok=True)
    for method in methods:
        for eps in eps_list:
            cfg = copy.deepcopy(base)
            cfg.method = method
            cfg.noise.epsilon = eps
            cfg.output = os.path.join(args.output_dir, f"{method}_eps{eps:g}.csv")
            _, records = run_experiment(cfg)
            print(
                f"method={method} epsilon={eps:g} "
                f"acc_last10={summary_accuracy(records):.4f} csv={cfg.output}"
            )
    return 0


def _cmd_validate(args) -> int:
    cfg = load_config(args.config, list(args.override))
    resolved = resolve_config(cfg)
    for key, value in config_items(resolved):
        print(f"{key} = {value}")
    print("ok")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"fednoise: config error: {e}", file=sys.stderr)
        return 1
    except (FednoiseError, OSError) as e:
        print(f"fednoise: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
