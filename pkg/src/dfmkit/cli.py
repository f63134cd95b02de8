"""Command-line interface.

Every flag can also come from a JSON config file (``--config``); explicit
flags override file values, which override profile defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .attacks import AttackConfig, evaluate_robustness, write_eval_report
from .chain import (
    ChainConfig,
    ChainReport,
    config_from_profile,
    cross_eval,
    cross_train,
    emit_image_grid,
    emit_matrix,
    emit_report,
    run_chain,
    stage_seed,
)
from .data import load_extracted, load_origin_dataset, load_substitute_pool, save_extracted
from .extraction import PgdConfig, extract_dataset
from .models import ModelSpec, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_adversarial, train_standard
from .vlogits import VirtualLogitConfig

log = logging.getLogger("dfmkit")


def _add_shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file; flags override it")
    parser.add_argument("--arch")
    parser.add_argument("--dataset")
    parser.add_argument("--substitute")
    parser.add_argument("--count", type=int)
    parser.add_argument("--steps", type=int, help="PGD steps (extraction or attack)")
    parser.add_argument("--step-size", type=float, dest="step_size")
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--robust-origin", action="store_true", default=None,
                        dest="robust_origin")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", type=Path)
    parser.add_argument("--profile", choices=("desk", "paper"))
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--data-dir", dest="data_dir")
    parser.add_argument("--n-train", type=int, dest="n_train")
    parser.add_argument("--n-val", type=int, dest="n_val")
    parser.add_argument("--eval-max-samples", type=int, dest="eval_max_samples")
    parser.add_argument("-v", "--verbose", action="store_true", default=None)


def _merged_options(args: argparse.Namespace) -> dict:
    options: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            options.update(json.load(fh))
    for key, value in vars(args).items():
        if key in ("config", "command", "func") or value is None:
            continue
        options[key] = value
    return options


def _chain_config(options: dict) -> ChainConfig:
    profile = options.get("profile", "desk")
    overrides = {}
    for key in ("dataset", "arch", "substitute", "robust_origin", "iterations", "count",
                "seed", "n_train", "n_val", "eval_max_samples", "data_dir"):
        if key in options:
            overrides[key] = options[key]
    cfg = config_from_profile(profile, **overrides)
    pgd_kwargs = {}
    if "steps" in options:
        pgd_kwargs["steps"] = options["steps"]
    if "step_size" in options:
        pgd_kwargs["step_size"] = options["step_size"]
    if "epsilon" in options:
        pgd_kwargs["epsilon"] = options["epsilon"]
    if pgd_kwargs:
        cfg = dataclasses.replace(cfg, pgd=dataclasses.replace(cfg.pgd, **pgd_kwargs))
    if "epochs" in options:
        cfg = dataclasses.replace(
            cfg,
            origin_train=dataclasses.replace(cfg.origin_train, epochs=options["epochs"]),
            chain_train=dataclasses.replace(cfg.chain_train, epochs=options["epochs"]),
        )
    return cfg


def _require(options: dict, *keys) -> None:
    missing = [k for k in keys if k not in options]
    if missing:
        raise SystemExit(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def cmd_train(args) -> None:
    options = _merged_options(args)
    _require(options, "out")
    cfg = _chain_config(options)
    origin = load_origin_dataset(cfg.dataset, data_dir=cfg.data_dir,
                                 n_train=cfg.n_train, n_val=cfg.n_val,
                                 seed=stage_seed(cfg.seed, "origin-data"))
    spec = ModelSpec(cfg.arch, origin.input_shape, origin.num_classes)
    train_cfg = dataclasses.replace(cfg.origin_train, seed=stage_seed(cfg.seed, "train-0"))
    out = Path(options["out"])
    if cfg.robust_origin:
        ckpt = train_adversarial(origin, spec, train_cfg, cfg.adv_attack,
                                 metrics_path=out / "metrics.csv")
    else:
        ckpt = train_standard(origin, spec, train_cfg, metrics_path=out / "metrics.csv")
    save_checkpoint(ckpt, out)
    from .attacks import evaluate_clean

    print(f"saved checkpoint to {out} (clean accuracy {evaluate_clean(ckpt, origin):.2f}%)")


def cmd_extract(args) -> None:
    options = _merged_options(args)
    _require(options, "model", "out")
    cfg = _chain_config(options)
    ckpt = load_checkpoint(options["model"])
    pool = load_substitute_pool(cfg.substitute, ckpt.spec.input_shape,
                                stage_seed(cfg.seed, "pool-1"), data_dir=cfg.data_dir)
    vcfg = VirtualLogitConfig(num_classes=ckpt.spec.num_classes)
    dataset = extract_dataset(ckpt, pool, vcfg, cfg.count, cfg.pgd,
                              seed=stage_seed(cfg.seed, "extract-1"))
    save_extracted(dataset, options["out"])
    print(f"saved {cfg.count} extracted samples to {options['out']}")


def cmd_chain(args) -> None:
    options = _merged_options(args)
    _require(options, "out")
    cfg = _chain_config(options)
    report = run_chain(cfg, options["out"])
    out = Path(options["out"])
    for fmt in ("csv", "json", "md"):
        emit_report(report, fmt, out)
    datasets = [load_extracted(out / f"d{i}").images for i in range(1, cfg.iterations + 1)]
    if datasets and len(datasets[0].shape) == 4:
        emit_image_grid(datasets, per_row=5, out_path=out / "grid.png")
    for entry in report.entries:
        print(f"M{entry.index}: clean accuracy {entry.clean_accuracy:.2f}%")
    print(f"report digest {report.digest()}")


def cmd_attack_eval(args) -> None:
    options = _merged_options(args)
    _require(options, "model", "out")
    cfg = _chain_config(options)
    ckpt = load_checkpoint(options["model"])
    origin = load_origin_dataset(cfg.dataset, data_dir=cfg.data_dir,
                                 n_train=cfg.n_train, n_val=cfg.n_val,
                                 seed=stage_seed(cfg.seed, "origin-data"))
    report = evaluate_robustness(
        ckpt, origin, list(cfg.eps_grid), steps=cfg.attack_steps,
        attack_seed=stage_seed(cfg.seed, "attack-eval"),
        max_samples=cfg.eval_max_samples,
    )
    write_eval_report(report, options["out"])
    for eps in sorted(report.accuracy_by_eps):
        print(f"eps={eps:g}: {report.accuracy_by_eps[eps]:.2f}%")


def cmd_cross_train(args) -> None:
    options = _merged_options(args)
    _require(options, "sources", "target_archs", "out")
    cfg = _chain_config(options)
    origin = load_origin_dataset(cfg.dataset, data_dir=cfg.data_dir,
                                 n_train=cfg.n_train, n_val=cfg.n_val,
                                 seed=stage_seed(cfg.seed, "origin-data"))
    sources = [(Path(p).name, load_checkpoint(p)) for p in options["sources"]]
    matrix = cross_train(
        sources, options["target_archs"], origin, cfg.substitute, cfg.count,
        cfg.pgd, cfg.chain_train, cfg.seed, data_dir=cfg.data_dir,
    )
    out = Path(options["out"])
    emit_matrix(matrix, "csv", out / "cross_train.csv")
    emit_matrix(matrix, "json", out / "cross_train.json")
    print(json.dumps(matrix, indent=2, sort_keys=True))


def cmd_cross_eval(args) -> None:
    options = _merged_options(args)
    _require(options, "sets", "models", "out")
    sets = [(Path(p).name, load_extracted(p)) for p in options["sets"]]
    checkpoints = [(Path(p).name, load_checkpoint(p)) for p in options["models"]]
    matrix = cross_eval(sets, checkpoints)
    out = Path(options["out"])
    emit_matrix(matrix, "csv", out / "cross_eval.csv")
    emit_matrix(matrix, "json", out / "cross_eval.json")
    print(json.dumps(matrix, indent=2, sort_keys=True))


def cmd_report(args) -> None:
    options = _merged_options(args)
    _require(options, "out")
    out = Path(options["out"])
    with open(out / "report.json", encoding="utf-8") as fh:
        raw = json.load(fh)
    from .chain import ChainEntry

    report = ChainReport(
        config=raw["config"],
        entries=[ChainEntry(**e) for e in raw["entries"]],
    )
    fmt = options.get("format", "md")
    path = emit_report(report, fmt, out)
    print(f"wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfmkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    commands = {
        "train": (cmd_train, "train an origin model (standard or adversarial)"),
        "extract": (cmd_extract, "extract a dataset from a trained model"),
        "chain": (cmd_chain, "run the full extraction/retraining chain"),
        "attack-eval": (cmd_attack_eval, "clean + robust accuracy on an epsilon grid"),
        "cross-train": (cmd_cross_train, "extract per source, retrain per architecture"),
        "cross-eval": (cmd_cross_eval, "score models against extracted-set argmax labels"),
        "report": (cmd_report, "re-emit a stored chain report in another format"),
    }
    for name, (func, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        _add_shared(p)
        if name == "extract":
            p.add_argument("--model", help="checkpoint directory")
        if name == "attack-eval":
            p.add_argument("--model", help="checkpoint directory")
        if name == "cross-train":
            p.add_argument("--sources", nargs="+", help="source checkpoint directories")
            p.add_argument("--target-archs", nargs="+", dest="target_archs")
        if name == "cross-eval":
            p.add_argument("--sets", nargs="+", help="extracted dataset directories")
            p.add_argument("--models", nargs="+", help="checkpoint directories")
        if name == "report":
            p.add_argument("--format", choices=("csv", "json", "md"))
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
