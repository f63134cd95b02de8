"""Chain orchestration: alternate model training and dataset extraction,
evaluate every stage on the original validation set, and produce the
cross-training / cross-evaluation matrices.

Access discipline: extraction step i touches only model i-1, and training
step i touches only dataset i. Every stage is persisted before the next one
starts, so earlier artifacts can be deleted without changing the outcome.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, EvalReport, evaluate_clean, evaluate_robustness, write_eval_report
from .data import (
    ExtractedDataset,
    LabeledDataset,
    load_extracted,
    load_origin_dataset,
    load_substitute_pool,
    save_extracted,
)
from .extraction import PgdConfig, extract_dataset
from .models import Checkpoint, ModelSpec, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_adversarial, train_logit_matching, train_standard
from .vlogits import VirtualLogitConfig

log = logging.getLogger("dfmkit.chain")


class ChainConfigError(Exception):
    pass


def stage_seed(master_seed: int, tag: str) -> int:
    """Deterministic per-stage seed so single stages can be rerun in isolation."""
    digest = hashlib.sha256(f"{master_seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class ChainConfig:
    dataset: str = "mnist"
    arch: str = "lenet"
    substitute: str = "uniform-noise"
    robust_origin: bool = False
    iterations: int = 2
    count: int = 50000
    pgd: PgdConfig = field(default_factory=PgdConfig)
    origin_train: TrainConfig = field(default_factory=lambda: TrainConfig(loss_kind="cross_entropy"))
    chain_train: TrainConfig = field(default_factory=lambda: TrainConfig(loss_kind="logit_l2"))
    adv_attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=2.0, steps=7))
    eps_grid: tuple = (0.0, 1.0, 2.0, 3.0, 4.0)
    attack_steps: int = 20
    seed: int = 0
    profile: str = "desk"
    # synthetic-surrogate sizes and eval subsetting, for CPU-scale runs
    n_train: int = 20000
    n_val: int = 5000
    eval_max_samples: int = 2000
    data_dir: str | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ChainConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.count < 1:
            raise ChainConfigError(f"extraction count must be >= 1, got {self.count}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eps_grid"] = list(self.eps_grid)
        return d


PROFILES = {
    "desk": {
        "dataset": "mnist",
        "arch": "lenet",
        "count": 50000,
        "iterations": 2,
        "origin_train": TrainConfig(epochs=30, lr=0.01, loss_kind="cross_entropy"),
        "chain_train": TrainConfig(epochs=30, lr=0.01, loss_kind="logit_l2"),
        "adv_attack": AttackConfig(epsilon=2.0, steps=7),
    },
    "paper": {
        "dataset": "cifar10",
        "arch": "vgg8",
        "count": 500000,
        "iterations": 5,
        "origin_train": TrainConfig(epochs=60, lr=0.1, loss_kind="cross_entropy"),
        "chain_train": TrainConfig(epochs=60, lr=0.01, loss_kind="logit_l2"),
        "adv_attack": AttackConfig(epsilon=0.5, steps=7),
        "eps_grid": (0.0, 0.25, 0.5, 1.0),
        "n_train": 50000,
        "n_val": 10000,
    },
}


def config_from_profile(profile: str, **overrides) -> ChainConfig:
    if profile not in PROFILES:
        raise ChainConfigError(f"unknown profile: {profile!r} (expected one of {list(PROFILES)})")
    kwargs = dict(PROFILES[profile])
    kwargs.update(overrides)
    kwargs["profile"] = profile
    return ChainConfig(**kwargs)


@dataclass
class ChainEntry:
    index: int
    checkpoint_digest: str
    clean_accuracy: float
    eval_report: dict
    dataset_digest: str | None  # digest of the dataset this model trained on

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ChainReport:
    config: dict
    entries: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"config": self.config, "entries": [e.to_dict() for e in self.entries]}

    def digest(self) -> str:
        """Digest over the run's numeric outcomes (timestamps excluded)."""
        payload = json.dumps(
            [
                (e.index, e.checkpoint_digest, round(e.clean_accuracy, 6),
                 sorted(e.eval_report.get("accuracy_by_eps", {}).items()),
                 e.dataset_digest)
                for e in self.entries
            ],
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()


def _dataset_digest(d: ExtractedDataset) -> str:
    h = hashlib.sha256()
    h.update(d.images.tobytes())
    h.update(d.logits.tobytes())
    return h.hexdigest()


def _evaluate_stage(
    ckpt: Checkpoint, origin: LabeledDataset, cfg: ChainConfig
) -> tuple[float, EvalReport]:
    clean = evaluate_clean(ckpt, origin)
    report = evaluate_robustness(
        ckpt, origin, list(cfg.eps_grid), steps=cfg.attack_steps,
        attack_seed=stage_seed(cfg.seed, "attack-eval"),
        max_samples=cfg.eval_max_samples,
    )
    # by construction the eps=0 entry is the exact clean accuracy of the
    # evaluated subset; the reported clean accuracy uses the full val split
    return clean, report


def run_chain(cfg: ChainConfig, out_dir: str | Path) -> ChainReport:
    """Train the origin model, then alternate extraction and logit-matching
    training for ``cfg.iterations`` rounds, evaluating every model on the
    original validation set."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    origin = load_origin_dataset(
        cfg.dataset, data_dir=cfg.data_dir,
        n_train=cfg.n_train, n_val=cfg.n_val,
        seed=stage_seed(cfg.seed, "origin-data"),
    )
    spec = ModelSpec(cfg.arch, origin.input_shape, origin.num_classes)
    vcfg = VirtualLogitConfig(num_classes=origin.num_classes)
    report = ChainReport(config=cfg.to_dict())

    def _persist(ckpt: Checkpoint, index: int, dataset_digest: str | None):
        stage_dir = out_dir / f"m{index}"
        save_checkpoint(ckpt, stage_dir)
        clean, eval_report = _evaluate_stage(ckpt, origin, cfg)
        write_eval_report(eval_report, stage_dir)
        report.entries.append(
            ChainEntry(index, ckpt.digest(), clean, eval_report.to_dict(), dataset_digest)
        )
        emit_report(report, "json", out_dir)
        emit_report(report, "csv", out_dir)
        log.info("chain stage %d: clean accuracy %.2f%%", index, clean)

    origin_seed = stage_seed(cfg.seed, "train-0")
    origin_cfg = dataclasses.replace(cfg.origin_train, seed=origin_seed)
    if cfg.robust_origin:
        model = train_adversarial(
            origin, spec, origin_cfg, cfg.adv_attack,
            metrics_path=out_dir / "m0" / "metrics.csv",
        )
    else:
        model = train_standard(
            origin, spec, origin_cfg, metrics_path=out_dir / "m0" / "metrics.csv"
        )
    _persist(model, 0, None)

    for i in range(1, cfg.iterations + 1):
        pool = load_substitute_pool(
            cfg.substitute, origin.input_shape, stage_seed(cfg.seed, f"pool-{i}"),
            data_dir=cfg.data_dir,
        )
        extracted = extract_dataset(
            model, pool, vcfg, cfg.count, cfg.pgd, seed=stage_seed(cfg.seed, f"extract-{i}")
        )
        d_digest = _dataset_digest(extracted)
        save_extracted(extracted, out_dir / f"d{i}")
        del model  # the previous model plays no further part

        train_cfg = dataclasses.replace(cfg.chain_train, seed=stage_seed(cfg.seed, f"train-{i}"))
        model = train_logit_matching(
            extracted, spec, train_cfg,
            metrics_path=out_dir / f"m{i}" / "metrics.csv",
            provenance={"chain_index": i},
        )
        _persist(model, i, d_digest)

    return report


# ---------------------------------------------------------------------------
# Cross matrices
# ---------------------------------------------------------------------------


def cross_train(
    sources: list[tuple[str, Checkpoint]],
    target_archs: list[str],
    origin: LabeledDataset,
    substitute: str,
    count: int,
    pgd: PgdConfig,
    train_cfg: TrainConfig,
    seed: int,
    data_dir: str | None = None,
) -> dict[str, dict[str, float]]:
    """One extraction per source model, one logit-matching training per
    (source, target architecture) cell; cells are original-val accuracy."""
    shapes = {src.spec.input_shape for _, src in sources}
    ks = {src.spec.num_classes for _, src in sources}
    if len(shapes) != 1 or len(ks) != 1:
        raise ChainConfigError("cross_train sources must share input shape and class count")

    vcfg = VirtualLogitConfig(num_classes=ks.pop())
    matrix: dict[str, dict[str, float]] = {}
    for s_idx, (src_name, src) in enumerate(sources):
        pool = load_substitute_pool(
            substitute, src.spec.input_shape, stage_seed(seed, f"pool-{s_idx}"),
            data_dir=data_dir,
        )
        extracted = extract_dataset(
            src, pool, vcfg, count, pgd, seed=stage_seed(seed, f"extract-{s_idx}")
        )
        matrix[src_name] = {}
        for t_idx, arch in enumerate(target_archs):
            spec = ModelSpec(arch, src.spec.input_shape, src.spec.num_classes)
            cfg_cell = dataclasses.replace(
                train_cfg, seed=stage_seed(seed, f"train-{s_idx}-{t_idx}")
            )
            trained = train_logit_matching(
                extracted, spec, cfg_cell, provenance={"chain_index": 1}
            )
            matrix[src_name][arch] = evaluate_clean(trained, origin)
    return matrix


def cross_eval(
    extracted_sets: list[tuple[str, ExtractedDataset]],
    checkpoints: list[tuple[str, Checkpoint]],
) -> dict[str, dict[str, float]]:
    """Cell = percentage of extracted images on which the model's argmax
    matches the argmax of the stored source logits."""
    from .models import forward_logits

    matrix: dict[str, dict[str, float]] = {}
    for set_name, dataset in extracted_sets:
        targets = dataset.logits.argmax(axis=1)
        matrix[set_name] = {}
        for model_name, ckpt in checkpoints:
            if ckpt.spec.num_classes != dataset.logits.shape[1]:
                raise ChainConfigError(
                    f"class count mismatch: dataset {set_name} has {dataset.logits.shape[1]}, "
                    f"model {model_name} has {ckpt.spec.num_classes}"
                )
            preds = forward_logits(ckpt, dataset.images).argmax(axis=1)
            matrix[set_name][model_name] = 100.0 * float((preds == targets).mean())
    return matrix


# ---------------------------------------------------------------------------
# Report emitters
# ---------------------------------------------------------------------------


def emit_report(report: ChainReport, fmt: str, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    eps_values = sorted(
        {float(e) for entry in report.entries for e in entry.eval_report["accuracy_by_eps"]}
    )
    if fmt == "json":
        path = out_dir / "report.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    elif fmt == "csv":
        path = out_dir / "report.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            import csv as _csv

            writer = _csv.writer(fh)
            writer.writerow(["iteration", "clean_accuracy"] + [f"eps_{e:g}" for e in eps_values])
            for entry in report.entries:
                by_eps = {float(k): v for k, v in entry.eval_report["accuracy_by_eps"].items()}
                writer.writerow(
                    [entry.index, f"{entry.clean_accuracy:.4f}"]
                    + [f"{by_eps[e]:.4f}" if e in by_eps else "" for e in eps_values]
                )
    elif fmt == "md":
        path = out_dir / "report.md"
        header = "| model | clean | " + " | ".join(f"eps={e:g}" for e in eps_values) + " |"
        sep = "|" + "---|" * (2 + len(eps_values))
        lines = [header, sep]
        for entry in report.entries:
            by_eps = {float(k): v for k, v in entry.eval_report["accuracy_by_eps"].items()}
            cells = " | ".join(
                f"{by_eps[e]:.1f}" if e in by_eps else "" for e in eps_values
            )
            lines.append(f"| M{entry.index} | {entry.clean_accuracy:.1f} | {cells} |")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        raise ChainConfigError(f"unknown report format: {fmt!r}")
    return path


def emit_matrix(matrix: dict[str, dict[str, float]], fmt: str, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = sorted({c for row in matrix.values() for c in row})
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(matrix, fh, indent=2, sort_keys=True)
            fh.write("\n")
    elif fmt == "csv":
        import csv as _csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["source"] + cols)
            for row_name in sorted(matrix):
                writer.writerow(
                    [row_name] + [f"{matrix[row_name].get(c, float('nan')):.4f}" for c in cols]
                )
    else:
        raise ChainConfigError(f"unknown matrix format: {fmt!r}")
    return path


def emit_image_grid(
    datasets: list[np.ndarray], per_row: int, out_path: str | Path, gap: int = 2
) -> Path:
    """Tile the first ``per_row`` images of each dataset as one row of a
    single image file; rows are stacked in dataset order."""
    from PIL import Image

    if not datasets:
        raise ChainConfigError("no datasets to render")
    c, h, w = datasets[0].shape[1:]
    rows = len(datasets)
    canvas = np.ones(
        (c, rows * h + (rows - 1) * gap, per_row * w + (per_row - 1) * gap), dtype=np.float32
    )
    for r, images in enumerate(datasets):
        if images.shape[1:] != (c, h, w):
            raise ChainConfigError("all datasets in a grid must share one image shape")
        for j in range(min(per_row, images.shape[0])):
            y, x = r * (h + gap), j * (w + gap)
            canvas[:, y : y + h, x : x + w] = images[j]
    arr = (canvas * 255).round().astype(np.uint8)
    img = Image.fromarray(arr[0], "L") if c == 1 else Image.fromarray(arr.transpose(1, 2, 0), "RGB")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    img.save(out_path)
    return out_path
