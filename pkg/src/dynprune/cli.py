"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence, 1 anything else.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import compiler
from ._alloc import tune_allocator
from .errors import CheckpointError, ConfigError, DataError, DivergenceError, DynPruneError
from .grouping import GroupParameters, group_learning_phase
from .model import Model, accuracy, build_toy_net
from .oracle import brute_force_study
from .pipeline import (
    PhaseError,
    PipelineConfig,
    load_config,
    load_data,
    load_group_parameters,
    prune_model,
    run_pipeline,
    save_group_parameters,
    summary_text,
    write_text_atomic,
)
from .pruning import discretize_alpha, structure_report
from .training import finetune, train

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--groups", type=int, dest="n_groups")
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--beta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="weight learning rate (fine-tuning rate for finetune)")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynprune", description="Dynamic filter-group pruning for small CNNs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="dense training without the group regulariser")
    _common(p)

    p = sub.add_parser("group-learn", help="joint weight / group learning")
    _common(p)
    p.add_argument("--init", help="start from this dense checkpoint")

    p = sub.add_parser("prune", help="one-shot group-channel pruning of a learned model")
    _common(p)
    p.add_argument("--model", required=True, help="dense checkpoint")
    p.add_argument("--group-file", help="groups.json from group-learn (default: next to the model)")
    p.add_argument("--pruner", choices=("group", "channel"))

    p = sub.add_parser("finetune", help="fine-tune a pruned checkpoint")
    _common(p)
    p.add_argument("--model", required=True)

    p = sub.add_parser("run", help="full pipeline")
    _common(p)
    p.add_argument("--pruner", choices=("group", "channel"))

    p = sub.add_parser("brute-force", help="evaluate every two-group partition at fixed pruning rates")
    _common(p)
    p.add_argument("--model", required=True, help="dense checkpoint")
    p.add_argument("--group-file", help="learned groups to compare against")
    p.add_argument("--layer", default=None, help="layer to enumerate (default: the grouped conv)")
    p.add_argument("--rates", default="0.25,0.5,0.75")

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    _common(p)
    p.add_argument("--model", required=True)

    p = sub.add_parser("inspect", help="structure report and counts of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


_OVERRIDES = ("n_groups", "lam", "beta", "tau", "epochs", "seed", "data_dir", "out_dir", "pruner")


def _config(args, lr_field: str = "weight_lr") -> PipelineConfig:
    overrides = {k: getattr(args, k, None) for k in _OVERRIDES}
    overrides[lr_field] = getattr(args, "lr", None)
    return load_config(getattr(args, "config", None), overrides)


def _out(cfg: PipelineConfig, name: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def _load_dense(path: str) -> Model:
    m = compiler.load(path)
    if not isinstance(m, Model):
        raise CheckpointError(f"{path} holds a pruned model; a dense checkpoint is required")
    return m


def cmd_train(args) -> int:
    cfg = _config(args)
    data = load_data(cfg)
    rng = np.random.default_rng(cfg.seed)
    model = Model.init(build_toy_net(), rng)
    model, _ = train(model, data, cfg.epochs, cfg.weight_lr, cfg.momentum, cfg.lr_decay, cfg.weight_decay, cfg.batch_size, rng)
    path = _out(cfg, "dense.dspc")
    compiler.save(model, path, {"stage": "dense", "seed": str(cfg.seed)})
    print(f"test accuracy {accuracy(model, data.test_x, data.test_y):.2f}  -> {path}")
    return EXIT_OK


def cmd_group_learn(args) -> int:
    cfg = _config(args)
    data = load_data(cfg)
    rng = np.random.default_rng(cfg.seed)
    model = _load_dense(args.init) if args.init else Model.init(build_toy_net(), rng)
    model, params, _ = group_learning_phase(model, (data.train_x, data.train_y), cfg.group_config(), rng=rng)
    path = _out(cfg, "dense.dspc")
    compiler.save(model, path, {"stage": "dense", "seed": str(cfg.seed), "lambda": repr(cfg.lam)})
    save_group_parameters(params, _out(cfg, "groups.json"))
    print(f"test accuracy {accuracy(model, data.test_x, data.test_y):.2f}  -> {path}")
    return EXIT_OK


def _group_file(args) -> str:
    return args.group_file or os.path.join(os.path.dirname(os.path.abspath(args.model)), "groups.json")


def cmd_prune(args) -> int:
    cfg = _config(args)
    model = _load_dense(args.model)
    if cfg.pruner == "group":
        params = load_group_parameters(_group_file(args))
    else:
        params = GroupParameters({}, cfg.tau, 1)
    structure = prune_model(model, params, cfg)
    compiled = compiler.compile_model(model, structure, {"stage": "pruned", "beta": repr(cfg.beta)})
    path = _out(cfg, "pruned.dspc")
    compiler.save(compiled, path)
    write_text_atomic(_out(cfg, "structure.txt"), structure_report(structure))
    write_text_atomic(_out(cfg, "structure.json"), structure.to_json())
    r = compiler.count_pruned_params_flops(compiled)
    print(f"params -{r.params_reduction:.2f}%  FLOPs -{r.flops_reduction:.2f}%  -> {path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args, lr_field="finetune_lr")
    data = load_data(cfg)
    model = compiler.load(args.model)
    epochs = args.epochs if args.epochs is not None else cfg.finetune_epochs
    model, _ = finetune(model, data, epochs, lr=cfg.finetune_lr, momentum=cfg.momentum, lr_decay=cfg.lr_decay,
                        batch_size=cfg.batch_size, rng=np.random.default_rng(cfg.seed + 1))
    path = _out(cfg, "finetuned.dspc")
    compiler.save(model, path)
    print(f"test accuracy {accuracy(model, data.test_x, data.test_y):.2f}  -> {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    report = run_pipeline(_config(args))
    print(summary_text(report.summary), end="")
    return EXIT_OK


def cmd_brute_force(args) -> int:
    cfg = _config(args)
    data = load_data(cfg)
    model = _load_dense(args.model)
    layer = args.layer or model.spec.grouped_layers()[0]
    learned = None
    if args.group_file or os.path.exists(_group_file(args)):
        learned = discretize_alpha(load_group_parameters(_group_file(args))).get(layer)
    try:
        rates = tuple(float(r) for r in args.rates.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --rates {args.rates!r}") from exc
    report = brute_force_study(model, layer, cfg.n_groups, data.val_x, data.val_y, rates, learned)
    write_text_atomic(_out(cfg, "brute_force.csv"), report.to_csv())
    write_text_atomic(_out(cfg, "brute_force_summary.csv"), report.summary_csv())
    print(report.summary_csv(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    data = load_data(cfg)
    model = compiler.load(args.model)
    print(f"test accuracy {accuracy(model, data.test_x, data.test_y):.2f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = compiler.load(args.model)
    if isinstance(model, Model):
        model = compiler.compile_model(model, metadata=getattr(model, "metadata", None))
    print(structure_report(model.structure()), end="")
    for k in sorted(model.metadata):
        print(f"{k} = {model.metadata[k]}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "group-learn": cmd_group_learn,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "run": cmd_run,
    "brute-force": cmd_brute_force,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, PhaseError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGED
    return EXIT_OTHER


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    tune_allocator()
    try:
        return COMMANDS[args.command](args)
    except (DynPruneError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
