"""Model training: standard cross-entropy, adversarial training, and
logit-matching on extracted datasets.

Logit-matching training sees only the extracted dataset and an architecture
spec, never the source model or origin data; that separation is what makes
the extraction chain meaningful.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .attacks import AttackConfig, pgd_attack
from .data import ExtractedDataset, LabeledDataset
from .models import Checkpoint, ModelSpec, build_model

HOLDOUT_FRACTION = 0.02  # extracted samples reserved for loss monitoring


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    loss_kind: str = "cross_entropy"  # or "logit_l2"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss_kind not in ("cross_entropy", "logit_l2"):
            raise TrainingError(f"unknown loss kind: {self.loss_kind!r}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "loss_kind": self.loss_kind,
            "seed": self.seed,
        }


def _batch_loss(model: nn.Module, xb: torch.Tensor, tb: torch.Tensor, kind: str) -> torch.Tensor:
    logits = model(xb)
    if kind == "cross_entropy":
        return nn.functional.cross_entropy(logits, tb)
    # clamp keeps the sqrt gradient finite at an exact logit match
    sq = ((logits - tb) ** 2).sum(dim=1)
    return sq.clamp_min(1e-24).sqrt().mean()


def _mean_loss(model: nn.Module, images, targets, kind: str, batch_size: int = 512) -> float:
    model.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            xb = images[lo : lo + batch_size]
            tb = targets[lo : lo + batch_size]
            total += _batch_loss(model, xb, tb, kind).item() * xb.shape[0]
            n += xb.shape[0]
    return total / max(n, 1)


def _run_training(
    spec: ModelSpec,
    cfg: TrainConfig,
    images: np.ndarray,
    targets: np.ndarray,
    attack: AttackConfig | None = None,
    attack_schedule: list[float] | None = None,
    holdout: tuple[np.ndarray, np.ndarray] | None = None,
    eval_data: LabeledDataset | None = None,
    metrics_path: str | Path | None = None,
    provenance: dict | None = None,
) -> Checkpoint:
    torch.manual_seed(cfg.seed)
    ckpt = build_model(spec, init_seed=cfg.seed)
    model = ckpt.model

    x_all = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if cfg.loss_kind == "cross_entropy":
        t_all = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    else:
        t_all = torch.as_tensor(np.asarray(targets, dtype=np.float32))

    probe = min(2048, x_all.shape[0])
    initial_loss = _mean_loss(model, x_all[:probe], t_all[:probe], cfg.loss_kind)

    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    milestones = sorted({max(1, cfg.epochs // 2), max(1, (3 * cfg.epochs) // 4)})
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones, gamma=0.1)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)

    rows = []
    epoch_loss = initial_loss
    for epoch in range(cfg.epochs):
        eps_now = attack.epsilon if attack is not None else 0.0
        if attack_schedule is not None:
            eps_now = attack_schedule[epoch]
        perm = shuffle_rng.permutation(x_all.shape[0])
        running, seen = 0.0, 0
        for lo in range(0, len(perm), cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            xb, tb = x_all[idx], t_all[idx]
            if attack is not None and eps_now > 0:
                adv = pgd_attack(
                    ckpt, xb.numpy(), tb.numpy(), eps_now, attack.steps
                )
                xb = torch.as_tensor(adv)
            model.train()
            optimizer.zero_grad()
            loss = _batch_loss(model, xb, tb, cfg.loss_kind)
            if not torch.isfinite(loss):
                raise TrainingError(f"training diverged: non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            running += loss.item() * xb.shape[0]
            seen += xb.shape[0]
        scheduler.step()
        model.eval()

        epoch_loss = running / max(seen, 1)
        holdout_loss = (
            _mean_loss(model, torch.as_tensor(holdout[0]), torch.as_tensor(holdout[1]),
                       cfg.loss_kind)
            if holdout is not None
            else math.nan
        )
        if eval_data is not None:
            from .attacks import evaluate_clean

            val_acc = evaluate_clean(ckpt, eval_data)
        else:
            val_acc = math.nan
        rows.append((epoch, epoch_loss, holdout_loss, val_acc))

    model.eval()
    ckpt.provenance.update(provenance or {})
    ckpt.provenance.update(
        {
            "train_seed": cfg.seed,
            "train_config": cfg.to_dict(),
            "initial_train_loss": initial_loss,
            "final_train_loss": epoch_loss,
        }
    )
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "holdout_loss", "val_acc"])
            for epoch, tl, hl, va in rows:
                writer.writerow(
                    [epoch, f"{tl:.6f}",
                     "" if math.isnan(hl) else f"{hl:.6f}",
                     "" if math.isnan(va) else f"{va:.4f}"]
                )
    return ckpt


def train_standard(
    dataset: LabeledDataset,
    spec: ModelSpec,
    cfg: TrainConfig,
    eval_data: LabeledDataset | None = None,
    metrics_path: str | Path | None = None,
) -> Checkpoint:
    """Cross-entropy training of a fresh model on labeled data."""
    if cfg.loss_kind != "cross_entropy":
        raise TrainingError("train_standard requires loss_kind=cross_entropy")
    return _run_training(
        spec, cfg, dataset.train.images, dataset.train.labels,
        eval_data=eval_data, metrics_path=metrics_path,
        provenance={"chain_index": 0, "robust": False, "origin": dataset.name},
    )


def train_adversarial(
    dataset: LabeledDataset,
    spec: ModelSpec,
    cfg: TrainConfig,
    atk: AttackConfig,
    eval_data: LabeledDataset | None = None,
    metrics_path: str | Path | None = None,
) -> Checkpoint:
    """Adversarial training: every minibatch is replaced by its l2-PGD
    adversarial counterpart before the gradient step.

    The first ~10% of epochs run clean and epsilon then ramps linearly to its
    full value over the next ~40%; attacking an untrained model from epoch 0
    keeps it at chance level indefinitely.
    """
    if cfg.loss_kind != "cross_entropy":
        raise TrainingError("train_adversarial requires loss_kind=cross_entropy")
    warm = math.ceil(0.1 * cfg.epochs) if cfg.epochs > 1 else 0
    # full epsilon well before the first lr milestone (epochs/2), so the
    # model trains at full attack strength while the lr is still high
    ramp = max(1, math.ceil(0.25 * cfg.epochs))
    schedule = [
        0.0 if e < warm else atk.epsilon * min(1.0, (e - warm + 1) / ramp)
        for e in range(cfg.epochs)
    ]
    return _run_training(
        spec, cfg, dataset.train.images, dataset.train.labels, attack=atk,
        attack_schedule=schedule, eval_data=eval_data, metrics_path=metrics_path,
        provenance={
            "chain_index": 0,
            "robust": True,
            "origin": dataset.name,
            "attack": {"epsilon": atk.epsilon, "steps": atk.steps,
                       "warmup_epochs": warm, "ramp_epochs": ramp},
        },
    )


def train_logit_matching(
    extracted: ExtractedDataset,
    spec: ModelSpec,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    provenance: dict | None = None,
) -> Checkpoint:
    """Train a fresh model to match the stored source logits in l2 distance.

    A small tail slice of the extracted data is held out to monitor the
    matching loss and never receives gradient steps.
    """
    if cfg.loss_kind != "logit_l2":
        raise TrainingError("train_logit_matching requires loss_kind=logit_l2")
    n = extracted.images.shape[0]
    n_holdout = max(1, int(n * HOLDOUT_FRACTION)) if n > 1 else 0
    n_train = n - n_holdout
    if n_train < 1:
        raise TrainingError("extracted dataset too small to train on")
    holdout = None
    if n_holdout:
        holdout = (extracted.images[n_train:], extracted.logits[n_train:])

    prov = {"robust": False, "source_checkpoint": extracted.manifest.get(
        "source_checkpoint_sha256")}
    prov.update(provenance or {})
    ckpt = _run_training(
        spec, cfg, extracted.images[:n_train], extracted.logits[:n_train],
        holdout=holdout, metrics_path=metrics_path, provenance=prov,
    )
    return ckpt


def default_train_config(dataset_name: str, loss_kind: str, seed: int = 0) -> TrainConfig:
    """Conventional SGD settings per dataset family (recorded in provenance)."""
    if dataset_name == "cifar10":
        base = TrainConfig(epochs=60, lr=0.1 if loss_kind == "cross_entropy" else 0.01)
    else:
        base = TrainConfig(epochs=30, lr=0.01)
    return replace(base, loss_kind=loss_kind, seed=seed)
