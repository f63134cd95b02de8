"""l2-PGD adversarial attack and clean/robust accuracy evaluation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import LabeledDataset
from .models import Checkpoint, ModelError


class AttackError(Exception):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 20

    def __post_init__(self):
        if self.epsilon < 0:
            raise AttackError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise AttackError(f"steps must be >= 1, got {self.steps}")

    @property
    def step_size(self) -> float:
        return 2.5 * self.epsilon / self.steps


@dataclass
class EvalReport:
    provenance: dict
    dataset: str
    sample_count: int
    steps: int
    attack_seed: int
    accuracy_by_eps: dict = field(default_factory=dict)  # {epsilon: accuracy %}

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "dataset": self.dataset,
            "sample_count": self.sample_count,
            "steps": self.steps,
            "attack_seed": self.attack_seed,
            "accuracy_by_eps": {str(k): v for k, v in self.accuracy_by_eps.items()},
        }


def _normalized(grad: torch.Tensor) -> torch.Tensor:
    flat = grad.flatten(1)
    norms = flat.norm(dim=1).clamp_min(1e-12)
    return grad / norms.view(-1, *([1] * (grad.dim() - 1)))


def _project_l2(x_adv: torch.Tensor, x: torch.Tensor, eps: float) -> torch.Tensor:
    delta = x_adv - x
    norms = delta.flatten(1).norm(dim=1)
    factor = torch.clamp(eps / norms.clamp_min(1e-12), max=1.0)
    return x + delta * factor.view(-1, *([1] * (x.dim() - 1)))


def pgd_attack(
    ckpt: Checkpoint,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float,
    steps: int = 20,
    batch_size: int = 512,
) -> np.ndarray:
    """Untargeted l2-PGD: normalized gradient ascent on the true-class
    cross-entropy, step size 2.5*epsilon/steps, projected onto the l2 ball
    around the clean input and clamped to [0, 1] every step."""
    if epsilon < 0 or steps < 1:
        raise AttackError(f"invalid attack config: epsilon={epsilon}, steps={steps}")
    x = np.asarray(x, dtype=np.float32)
    if x.shape[0] != len(y):
        raise ModelError("label count does not match batch size")
    if epsilon == 0.0:
        return x.copy()

    step = 2.5 * epsilon / steps
    model = ckpt.model
    model.eval()
    out = np.empty_like(x)
    for lo in range(0, x.shape[0], batch_size):
        xb = torch.as_tensor(x[lo : lo + batch_size])
        yb = torch.as_tensor(np.asarray(y[lo : lo + batch_size]), dtype=torch.long)
        if tuple(xb.shape[1:]) != ckpt.spec.input_shape:
            raise ModelError(
                f"input shape {tuple(xb.shape[1:])} does not match model input "
                f"{ckpt.spec.input_shape}"
            )
        x_adv = xb.clone()
        for i in range(steps):
            x_adv.requires_grad_(True)
            loss = nn.functional.cross_entropy(model(x_adv), yb, reduction="sum")
            if not torch.isfinite(loss):
                raise AttackError(f"non-finite attack loss at step {i}")
            (grad,) = torch.autograd.grad(loss, x_adv)
            if not torch.isfinite(grad).all():
                raise AttackError(f"non-finite attack gradient at step {i}")
            with torch.no_grad():
                x_adv = x_adv + step * _normalized(grad)
                x_adv = _project_l2(x_adv, xb, epsilon)
                x_adv = x_adv.clamp(0.0, 1.0)
        out[lo : lo + batch_size] = x_adv.detach().numpy()
    return out


def accuracy(ckpt: Checkpoint, images: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 argmax accuracy in percent."""
    from .models import forward_logits

    if images.shape[0] == 0:
        raise AttackError("cannot evaluate on an empty dataset")
    preds = forward_logits(ckpt, images).argmax(axis=1)
    return 100.0 * float((preds == np.asarray(labels)).mean())


def evaluate_clean(ckpt: Checkpoint, dataset: LabeledDataset) -> float:
    return accuracy(ckpt, dataset.val.images, dataset.val.labels)


def evaluate_robustness(
    ckpt: Checkpoint,
    dataset: LabeledDataset,
    eps_list: list[float],
    steps: int = 20,
    attack_seed: int = 0,
    max_samples: int | None = None,
) -> EvalReport:
    """One attack + accuracy measurement per epsilon; epsilon 0 is exact
    clean accuracy. ``max_samples`` caps the evaluated val subset (taken
    from the front, so the subset is deterministic)."""
    if not eps_list:
        raise AttackError("eps list must be non-empty")
    if 0.0 not in [float(e) for e in eps_list]:
        raise AttackError("eps list must contain 0")
    images, labels = dataset.val.images, dataset.val.labels
    if max_samples is not None:
        images, labels = images[:max_samples], labels[:max_samples]

    report = EvalReport(
        provenance=dict(ckpt.provenance),
        dataset=dataset.name,
        sample_count=images.shape[0],
        steps=steps,
        attack_seed=attack_seed,
    )
    for eps in eps_list:
        eps = float(eps)
        if eps == 0.0:
            acc = accuracy(ckpt, images, labels)
        else:
            adv = pgd_attack(ckpt, images, labels, eps, steps)
            acc = accuracy(ckpt, adv, labels)
        report.accuracy_by_eps[eps] = acc
    return report


def write_eval_report(report: EvalReport, out_dir: str | Path, stem: str = "robustness") -> None:
    """Emit ``<stem>.csv`` (epsilon,accuracy) and a JSON mirror with provenance."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epsilon", "accuracy"])
        for eps in sorted(report.accuracy_by_eps):
            writer.writerow([f"{eps:g}", f"{report.accuracy_by_eps[eps]:.4f}"])
    with open(out_dir / f"{stem}.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
