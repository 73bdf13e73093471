"""Gradual sparsity schedule and global magnitude masks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import DualPathNetwork, PrunableLayer

WEIGHT = "weight"
FILTER = "filter"
GRANULARITIES = (WEIGHT, FILTER)


@dataclass(frozen=True)
class SparsitySchedule:
    initial: float = 0.0
    target: float = 0.9
    start_epoch: float = 0.0
    ramp_epochs: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.initial <= self.target < 1.0:
            raise ConfigError(f"need 0 <= initial <= target < 1, got {self.initial}, {self.target}")
        if self.ramp_epochs < 1:
            raise ConfigError(f"ramp_epochs must be >= 1, got {self.ramp_epochs}")

    @property
    def end_epoch(self) -> float:
        return self.start_epoch + self.ramp_epochs


@dataclass(frozen=True)
class MaskUpdatePolicy:
    frequency: int = 16
    granularity: str = WEIGHT

    def __post_init__(self):
        if self.frequency < 1:
            raise ConfigError(f"mask update frequency must be >= 1, got {self.frequency}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")


def sparsity_at(sched: SparsitySchedule, epoch: float) -> float:
    """Cubic ramp from ``initial`` at ``start_epoch`` to ``target`` after ``ramp_epochs``."""
    if epoch <= sched.start_epoch:
        return float(sched.initial)
    if epoch >= sched.end_epoch:
        return float(sched.target)
    frac = 1.0 - (epoch - sched.start_epoch) / sched.ramp_epochs
    s = sched.target + (sched.initial - sched.target) * frac ** 3
    return min(max(s, sched.initial), sched.target)  # rounding can step a few ulps outside


def target_count(sparsity: float, units: int) -> int:
    return int(math.floor(sparsity * units))


def should_refresh(global_iter: int, frequency: int) -> bool:
    return global_iter > 0 and global_iter % frequency == 0


def _weight_masks(weights: list[np.ndarray], sparsity: float) -> list[np.ndarray]:
    flat = np.concatenate([np.abs(w).ravel() for w in weights])
    k = target_count(sparsity, flat.size)
    keep = np.ones(flat.size, dtype=bool)
    if k:
        keep[np.argsort(flat, kind="stable")[:k]] = False
    out, start = [], 0
    for w in weights:
        out.append(keep[start:start + w.size].reshape(w.shape))
        start += w.size
    return out


def filter_scores(weight: np.ndarray) -> np.ndarray:
    """RMS of each output filter slab: L2 norm divided by sqrt(slab size)."""
    slabs = weight.reshape(weight.shape[0], -1)
    return np.sqrt((slabs * slabs).sum(axis=1) / slabs.shape[1])


def _filter_masks(layers: list[PrunableLayer], sparsity: float) -> list[np.ndarray]:
    convs = [l for l in layers if l.is_conv]
    scores = np.concatenate([filter_scores(l.weight) for l in convs]) if convs else np.zeros(0)
    owner = np.concatenate([np.full(l.weight.shape[0], j) for j, l in enumerate(convs)]) if convs else np.zeros(0, int)
    k = target_count(sparsity, scores.size)
    alive = np.array([l.weight.shape[0] for l in convs])
    keep = np.ones(scores.size, dtype=bool)
    pruned = 0
    for idx in np.argsort(scores, kind="stable"):
        if pruned == k:
            break
        j = owner[idx]
        if alive[j] == 1:
            continue  # last filter of a layer stays
        keep[idx] = False
        alive[j] -= 1
        pruned += 1
    out, start, conv_iter = [], 0, iter(convs)
    for l in layers:
        if not l.is_conv:
            out.append(np.ones(l.weight.shape, dtype=bool))
            continue
        next(conv_iter)
        n = l.weight.shape[0]
        filt = keep[start:start + n]
        out.append(np.broadcast_to(filt.reshape((n,) + (1,) * (l.weight.ndim - 1)), l.weight.shape).copy())
        start += n
    return out


def compute_masks(layers: list[PrunableLayer], sparsity: float, granularity: str = WEIGHT) -> list[np.ndarray]:
    """Masks from scratch under a global magnitude threshold.

    ``WEIGHT`` zeroes the ``floor(sparsity * P)`` smallest-magnitude weights
    across all layers. ``FILTER`` zeroes the ``floor(sparsity * filters)``
    conv filters with the lowest RMS, always leaving one filter per layer;
    linear layers are not pruned at this granularity. Ties resolve by
    (layer order, flat index).
    """
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError(f"sparsity must lie in [0, 1), got {sparsity}")
    if granularity == WEIGHT:
        return _weight_masks([l.weight for l in layers], sparsity)
    if granularity == FILTER:
        return _filter_masks(layers, sparsity)
    raise ConfigError(f"unknown granularity {granularity!r}")


def apply_masks(net: DualPathNetwork, masks: list[np.ndarray]) -> None:
    """Install masks; the P path then sees ``mask * weight`` on its next forward."""
    net.set_masks(masks)


def refresh(net: DualPathNetwork, sparsity: float, granularity: str = WEIGHT) -> None:
    apply_masks(net, compute_masks(net.prunable, sparsity, granularity))


def masked_weights(net: DualPathNetwork) -> list[np.ndarray]:
    return [l.weight * l.mask for l in net.prunable]
