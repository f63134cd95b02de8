"""Virtual target logits: random vectors mimicking a trained classifier's
logit scale, with one dominant entry and the rest spread over a small band."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class VLogitConfigError(Exception):
    pass


@dataclass(frozen=True)
class VirtualLogitConfig:
    num_classes: int
    top_mean: float = 20.0
    top_std: float = 2.0
    others_lo: float = -3.0
    others_hi: float = 3.0
    others_std: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise VLogitConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        # Dominance: the top draw must beat every other draw with overwhelming
        # probability, otherwise designated classes become ambiguous.
        if self.top_mean - 4 * self.top_std <= self.others_hi + 4 * self.others_std:
            raise VLogitConfigError(
                "top logit distribution overlaps the non-top band: "
                f"{self.top_mean}-4*{self.top_std} must exceed "
                f"{self.others_hi}+4*{self.others_std}"
            )

    def to_dict(self) -> dict:
        return {
            "top_mean": self.top_mean,
            "top_std": self.top_std,
            "lo": self.others_lo,
            "hi": self.others_hi,
            "others_std": self.others_std,
        }


def non_top_means(cfg: VirtualLogitConfig) -> np.ndarray:
    """The K-1 equally spaced means spanning [others_lo, others_hi]."""
    return np.linspace(cfg.others_lo, cfg.others_hi, cfg.num_classes - 1)


def sample_virtual_logits(
    cfg: VirtualLogitConfig, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` virtual logit rows.

    Each row gets one draw from N(top_mean, top_std) and K-1 draws from
    N(mu_j, others_std) on the equally spaced grid; the K values land on
    class indices via a fresh uniform permutation per row. Returns the
    (n, K) logit array and the per-row designated class (the argmax).
    """
    if n < 1:
        raise VLogitConfigError(f"sample count must be >= 1, got {n}")
    k = cfg.num_classes
    values = np.empty((n, k), dtype=np.float64)
    values[:, 0] = rng.normal(cfg.top_mean, cfg.top_std, size=n)
    values[:, 1:] = rng.normal(
        non_top_means(cfg)[None, :], cfg.others_std, size=(n, k - 1)
    )
    perms = rng.permuted(np.tile(np.arange(k), (n, 1)), axis=1)
    logits = np.empty((n, k), dtype=np.float32)
    np.put_along_axis(logits, perms, values.astype(np.float32), axis=1)
    designated = logits.argmax(axis=1).astype(np.int64)
    return logits, designated


def target_class_of(logits: np.ndarray) -> int:
    """Argmax label of one logit vector; ties break toward the lowest index."""
    logits = np.asarray(logits)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise VLogitConfigError(f"expected one vector of length >= 2, got shape {logits.shape}")
    return int(logits.argmax())
