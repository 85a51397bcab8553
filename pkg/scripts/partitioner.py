"""
Weighted load balancing along the space-filling curve.
A cell costs w(K) = n_dofs(K)^c; ranks receive contiguous Morton segments.
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_EXPONENT = 1.9


@dataclass(frozen=True)
class WeightPolicy:
    exponent: float = DEFAULT_EXPONENT
    scale: int = 1

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError(f"weighting exponent must be positive, got {self.exponent}")
        if self.scale < 1:
            raise ValueError(f"weight scale must be a positive integer, got {self.scale}")


def cell_weight(n_dofs: int, policy: WeightPolicy = WeightPolicy()) -> int:
    if n_dofs < 1:
        raise ValueError(f"a cell has at least one DoF, got {n_dofs}")
    # round half up, never below one
    return max(1, math.floor(policy.scale * n_dofs ** policy.exponent + 0.5))


def cell_weights(n_dofs: Sequence[int], policy: WeightPolicy = WeightPolicy()) -> np.ndarray:
    counts = np.asarray(n_dofs, dtype=np.float64)
    if counts.size and counts.min() < 1:
        raise ValueError("a cell has at least one DoF")
    weights = np.floor(policy.scale * counts ** policy.exponent + 0.5).astype(np.int64)
    return np.maximum(weights, 1)


def partition_by_weight(weights: Sequence[int], ranks: int) -> np.ndarray:
    """
    rank(i) = floor(prefix_exclusive(i) * P / W).
    Non-decreasing along the curve; ranks may end up empty.
    """
    if ranks < 1:
        raise ValueError("need at least one rank")
    w = np.asarray(weights, dtype=np.int64)
    if w.size == 0:
        return np.zeros(0, dtype=np.int64)
    if w.min() < 1:
        raise ValueError("cell weights must be at least one")
    prefix = np.cumsum(w) - w
    total = int(w.sum())
    assignment = (prefix * ranks) // total
    logger.debug("partitioned %d cells of total weight %d onto %d ranks", w.size, total, ranks)
    return assignment


def rank_weights(weights: Sequence[int], assignment: Sequence[int], ranks: int) -> np.ndarray:
    return np.bincount(np.asarray(assignment, dtype=np.int64), weights=np.asarray(weights, dtype=np.float64),
                       minlength=ranks).astype(np.int64)


def weight_imbalance(weights: Sequence[int], assignment: Sequence[int], ranks: int) -> float:
    """Heaviest rank over the average rank weight (1.0 is perfect)."""
    per_rank = rank_weights(weights, assignment, ranks)
    total = per_rank.sum()
    if total == 0:
        return 1.0
    return float(per_rank.max() * ranks / total)
