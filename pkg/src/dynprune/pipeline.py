"""Configuration and the three-phase driver: group learning, one-shot
pruning, fine-tuning of the compiled grouped-convolution model."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import compiler
from ._alloc import tune_allocator
from .data import DatasetHandle, load_mnist
from .errors import ConfigError, DynPruneError
from .grouping import GroupLearnConfig, GroupParameters, group_learning_phase
from .model import Model, accuracy, build_toy_net
from .oracle import channel_prune_baseline
from .pruning import PrunedStructure, discretize_alpha, prune, structure_report
from .training import finetune

log = logging.getLogger(__name__)

ALIASES = {"lambda": "lam", "groups": "n_groups", "data-dir": "data_dir", "out": "out_dir"}


@dataclass
class PipelineConfig(GroupLearnConfig):
    beta: float = 0.3
    finetune_epochs: int = 10
    finetune_lr: float = 0.01
    data_dir: str = "data/mnist"
    out_dir: str = "runs/default"
    pruner: str = "group"  # "group" or "channel" (input-channel baseline)
    n_train: int | None = None  # leading subset of each split, for quick runs
    n_val: int | None = None
    n_test: int | None = None

    def validate(self) -> "PipelineConfig":
        super().validate()
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must lie in [0, 1), got {self.beta}")
        if self.finetune_epochs < 0 or self.finetune_lr <= 0:
            raise ConfigError("finetune_epochs must be >= 0 and finetune_lr > 0")
        if self.pruner not in ("group", "channel"):
            raise ConfigError(f"unknown pruner {self.pruner!r}")
        for name in ("n_train", "n_val", "n_test"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be positive")
        return self

    def group_config(self) -> GroupLearnConfig:
        names = {f.name for f in dataclasses.fields(GroupLearnConfig)}
        return GroupLearnConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt_value(v)}\n" for k, v in dataclasses.asdict(self).items())


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def _coerce(name: str, raw: str, current):
    ftype = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}[name]
    text = raw.strip()
    try:
        if text.lower() == "none" and "None" in str(ftype):
            return None
        if "tuple" in str(ftype):
            return tuple(float(x) for x in text.split(","))
        if "float" in str(ftype):
            return float(text)
        if "int" in str(ftype):
            return int(text)
        if "bool" in str(ftype):
            return text.lower() in ("1", "true", "yes")
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return text


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    fields_ = {f.name for f in dataclasses.fields(PipelineConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = ALIASES.get(key, key).replace("-", "_")
        if key not in fields_:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


def make_config(file_values: dict | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then file values (strings), then already-typed overrides."""
    cfg = PipelineConfig()
    for k, v in (file_values or {}).items():
        setattr(cfg, k, _coerce(k, v, getattr(cfg, k)))
    for k, v in (overrides or {}).items():
        if v is not None:
            setattr(cfg, ALIASES.get(k, k), v)
    return cfg.validate()


def load_config(path: str | None, overrides: dict | None = None) -> PipelineConfig:
    values = {}
    if path:
        try:
            with open(path) as fh:
                values = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return make_config(values, overrides)


def load_data(config: PipelineConfig) -> DatasetHandle:
    data = load_mnist(config.data_dir)
    if config.n_train or config.n_val or config.n_test:
        data = data.subset(config.n_train, config.n_val, config.n_test)
    return data


class MetricsWriter:
    """Append-only CSV with a fixed header."""

    def __init__(self, path: str, columns: list[str]):
        self.path = path
        self.columns = columns
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(columns)

    def write(self, phase: str, row: dict) -> None:
        vals = [phase] + [_cell(row.get(c)) for c in self.columns[1:]]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(vals)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_text_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_group_parameters(params: GroupParameters, path: str) -> None:
    payload = {"tau": params.tau, "n_groups": params.n_groups, "logits": {k: v.tolist() for k, v in params.logits.items()}}
    write_text_atomic(path, json.dumps(payload, sort_keys=True, indent=1))


def load_group_parameters(path: str) -> GroupParameters:
    with open(path) as fh:
        raw = json.load(fh)
    logits = {k: np.array(v, dtype=np.float64) for k, v in raw["logits"].items()}
    return GroupParameters(logits, raw["tau"], raw["n_groups"])


class PhaseError(DynPruneError):
    """Failure inside a pipeline phase; ``cause`` is the original error."""

    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"[{phase}] {type(cause).__name__}: {cause}")
        self.phase = phase
        self.cause = cause


class _phase:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("phase %s", self.name)
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PhaseError) and isinstance(exc, (DynPruneError, ValueError, OSError)):
            raise PhaseError(self.name, exc) from exc
        log.info("phase %s done in %.1fs", self.name, time.perf_counter() - self.t0)
        return False


@dataclass
class PipelineReport:
    summary: dict
    structure: PrunedStructure
    dense: Model
    pruned: compiler.CompiledModel
    group_params: GroupParameters
    history: list[dict] = field(default_factory=list)


def prune_model(model: Model, params: GroupParameters, config: PipelineConfig) -> PrunedStructure:
    if config.pruner == "channel":
        return channel_prune_baseline(model, model.spec.grouped_layers(), beta=config.beta)
    structure, _ = prune(model, discretize_alpha(params), beta=config.beta)
    return structure


def provenance(config: PipelineConfig) -> dict:
    return {"beta": repr(config.beta), "groups": str(config.n_groups), "lambda": repr(config.lam), "seed": str(config.seed)}


def summary_text(summary: dict) -> str:
    lines = [
        f"dense accuracy (test):      {summary['dense_test_acc']:.2f}",
        f"pruned accuracy (no tune):  {summary['pruned_test_acc']:.2f}",
        f"final accuracy (test):      {summary['final_test_acc']:.2f}",
        f"params: {summary['dense_params']} -> {summary['pruned_params']} ({summary['params_reduction_pct']:.2f}% fewer)",
        f"FLOPs:  {summary['dense_flops']} -> {summary['pruned_flops']} ({summary['flops_reduction_pct']:.2f}% fewer)",
        f"groups={summary['groups']} beta={summary['beta']} lambda={summary['lambda']} seed={summary['seed']}",
    ]
    return "\n".join(lines) + "\n"


def summary_kv(summary: dict) -> str:
    return "".join(f"{k}={_cell(v)}\n" for k, v in summary.items())


def parse_summary_kv(text: str) -> dict:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def run_pipeline(config: PipelineConfig, data: DatasetHandle | None = None) -> PipelineReport:
    """Algorithm end to end. Writes into ``config.out_dir``:

    dense.dspc, groups.json, pruned.dspc, structure.txt, structure.json,
    metrics.csv, summary.txt, summary.kv, config.txt
    """
    tune_allocator()
    config.validate()
    os.makedirs(config.out_dir, exist_ok=True)
    out = lambda name: os.path.join(config.out_dir, name)  # noqa: E731
    write_text_atomic(out("config.txt"), config.to_text())

    with _phase("data"):
        data = load_data(config) if data is None else data

    spec = build_toy_net()
    columns = ["phase", "epoch", "loss", "reg", "lr", "val_acc"] + [f"entropy.{n}" for n in spec.grouped_layers()]
    metrics = MetricsWriter(out("metrics.csv"), columns)

    with _phase("group-learning"):
        rng = np.random.default_rng(config.seed)
        model = Model.init(spec, rng)
        model, params, history = group_learning_phase(
            model, (data.train_x, data.train_y), config.group_config(), rng=rng,
            on_epoch=lambda row: metrics.write("group-learning", row),
        )
        dense_acc = accuracy(model, data.test_x, data.test_y)
        compiler.save(model, out("dense.dspc"), {**provenance(config), "stage": "dense"})
        save_group_parameters(params, out("groups.json"))

    with _phase("pruning"):
        structure = prune_model(model, params, config)
        write_text_atomic(out("structure.txt"), structure_report(structure))
        write_text_atomic(out("structure.json"), structure.to_json())
        pruned = compiler.compile_model(model, structure, provenance(config))
        pruned_acc = accuracy(pruned, data.test_x, data.test_y)

    with _phase("fine-tuning"):
        pruned, ft_hist = finetune(
            pruned, data, config.finetune_epochs, lr=config.finetune_lr, momentum=config.momentum,
            lr_decay=config.lr_decay, batch_size=config.batch_size, rng=np.random.default_rng(config.seed + 1),
            on_epoch=lambda row: metrics.write("fine-tuning", row),
        )
        final_acc = accuracy(pruned, data.test_x, data.test_y)
        compiler.save(pruned, out("pruned.dspc"), {"stage": "pruned"})

    counts = compiler.count_pruned_params_flops(pruned)
    summary = {
        "dense_test_acc": dense_acc,
        "pruned_test_acc": pruned_acc,
        "final_test_acc": final_acc,
        "final_val_acc": max(r["val_acc"] for r in ft_hist) if ft_hist else accuracy(pruned, data.val_x, data.val_y),
        "dense_params": counts.dense_params,
        "pruned_params": counts.params,
        "params_reduction_pct": counts.params_reduction,
        "dense_flops": counts.dense_flops,
        "pruned_flops": counts.flops,
        "flops_reduction_pct": counts.flops_reduction,
        "pruned_macs": counts.macs,
        "groups": config.n_groups,
        "beta": config.beta,
        "lambda": config.lam,
        "seed": config.seed,
    }
    write_text_atomic(out("summary.txt"), summary_text(summary))
    write_text_atomic(out("summary.kv"), summary_kv(summary))
    return PipelineReport(summary, structure, model, pruned, params, history)
