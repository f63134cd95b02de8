"""Data-from-Model extraction: optimize substitute images toward virtual
logits with l2 projected gradient descent and record the achieved logits."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .attacks import _normalized, _project_l2
from .data import ExtractedDataset, SubstitutePool, make_manifest
from .models import Checkpoint, ModelError
from .vlogits import VirtualLogitConfig, sample_virtual_logits

log = logging.getLogger("dfmkit.extract")


class ExtractionError(Exception):
    pass


@dataclass(frozen=True)
class PgdConfig:
    steps: int = 100
    step_size: float = 0.5
    epsilon: float | None = None  # None: only the [0,1] box constrains x'
    early_stop_loss: float | None = 1.0

    def __post_init__(self):
        if self.steps < 0:
            raise ExtractionError(f"steps must be >= 0, got {self.steps}")
        if self.step_size <= 0:
            raise ExtractionError(f"step_size must be > 0, got {self.step_size}")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ExtractionError(f"epsilon must be > 0 when set, got {self.epsilon}")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "step_size": self.step_size, "epsilon": self.epsilon}


def extract_batch(
    ckpt: Checkpoint,
    x_s: np.ndarray,
    z_v: np.ndarray,
    cfg: PgdConfig,
    log_every: int = 10,
) -> np.ndarray:
    """Descend on the per-sample l2 logit distance ||Z(x') - z_v||_2.

    Per step: normalized gradient step of ``step_size``, optional projection
    onto the epsilon ball around the substitute image, clamp to [0, 1].
    Samples whose loss reaches ``early_stop_loss`` are frozen in place.
    """
    x_s = np.asarray(x_s, dtype=np.float32)
    z_v = np.asarray(z_v, dtype=np.float32)
    if x_s.shape[0] != z_v.shape[0]:
        raise ExtractionError(
            f"substitute/target count mismatch: {x_s.shape[0]} vs {z_v.shape[0]}"
        )
    if cfg.steps == 0:
        return x_s.copy()

    model = ckpt.model
    model.eval()
    if tuple(x_s.shape[1:]) != ckpt.spec.input_shape:
        raise ModelError(
            f"input shape {tuple(x_s.shape[1:])} does not match model input "
            f"{ckpt.spec.input_shape}"
        )

    x0 = torch.as_tensor(x_s)
    target = torch.as_tensor(z_v)
    x = x0.clone()
    active = torch.ones(x.shape[0], dtype=torch.bool)

    for i in range(cfg.steps):
        if not active.any():
            break
        xa = x[active].requires_grad_(True)
        logits = model(xa)
        sq = ((logits - target[active]) ** 2).sum(dim=1)
        loss = sq.sum()
        if not torch.isfinite(loss):
            raise ExtractionError(f"non-finite extraction loss at step {i}")
        (grad,) = torch.autograd.grad(loss, xa)
        if not torch.isfinite(grad).all():
            raise ExtractionError(f"non-finite extraction gradient at step {i}")
        with torch.no_grad():
            xn = xa - cfg.step_size * _normalized(grad)
            if cfg.epsilon is not None:
                xn = _project_l2(xn, x0[active], cfg.epsilon)
            xn = xn.clamp(0.0, 1.0)
            x[active] = xn

            sample_loss = sq.detach().sqrt()
            if log_every and i % log_every == 0:
                frac = 1.0 - active.float().mean().item()
                log.debug(
                    "extract step=%d mean_loss=%.4f converged=%.3f",
                    i, sample_loss.mean().item(), frac,
                )
            if cfg.early_stop_loss is not None:
                still = sample_loss > cfg.early_stop_loss
                idx = active.nonzero(as_tuple=True)[0]
                active[idx[~still]] = False
    return x.numpy()


def extraction_losses(ckpt: Checkpoint, images: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-sample l2 logit distance to the targets (for descent checks)."""
    from .models import forward_logits

    logits = forward_logits(ckpt, images)
    return np.linalg.norm(logits - np.asarray(targets, dtype=np.float32), axis=1)


def extract_dataset(
    ckpt: Checkpoint,
    pool: SubstitutePool,
    vcfg: VirtualLogitConfig,
    count: int,
    cfg: PgdConfig,
    seed: int,
    batch_size: int = 256,
) -> ExtractedDataset:
    """Draw ``count`` substitutes and virtual targets, run PGD extraction in
    batches, and store (image, achieved source logits) pairs with provenance."""
    if count < 1:
        raise ExtractionError(f"extraction count must be >= 1, got {count}")
    if vcfg.num_classes != ckpt.spec.num_classes:
        raise ExtractionError(
            f"virtual logit class count {vcfg.num_classes} != model {ckpt.spec.num_classes}"
        )
    from .models import forward_logits

    rng = np.random.default_rng(seed)
    images = np.empty((count, *ckpt.spec.input_shape), dtype=np.float32)
    logits = np.empty((count, ckpt.spec.num_classes), dtype=np.float32)

    done = 0
    while done < count:
        n = min(batch_size, count - done)
        x_s = pool.draw(n)
        z_v, _ = sample_virtual_logits(vcfg, n, rng)
        x_prime = extract_batch(ckpt, x_s, z_v, cfg)
        images[done : done + n] = x_prime
        logits[done : done + n] = forward_logits(ckpt, x_prime)
        done += n
        log.info("extracted %d/%d", done, count)

    manifest = make_manifest(
        source_checkpoint_sha256=ckpt.digest(),
        count=count,
        pgd=cfg.to_dict(),
        vlogit=vcfg.to_dict(),
        seed=seed,
    )
    return ExtractedDataset(images=images, logits=logits, manifest=manifest)
