"""Episodic curriculum: per-iteration blend of coarse and fine losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .network import IterationTrace
from .taxonomy import Taxonomy, coarse_loss
from .tensor import Tensor, add, scale, softmax_cross_entropy

DIRECTIONS = ("coarse_to_fine", "literal_eq6")


@dataclass(frozen=True)
class CurriculumSchedule:
    """Coarse-loss weight over iterations 1..T, decaying linearly until iteration ``k``.

    ``coarse_to_fine`` weights the coarse loss by (k - t) / k, floored at 0, so
    early iterations are pushed towards the coarse label. ``literal_eq6``
    uses min(1, t / k), the ramp exactly as printed, which grows instead.
    """

    k: int
    iterations: int
    direction: str = "coarse_to_fine"

    def __post_init__(self):
        if not 1 <= self.k <= self.iterations:
            raise ConfigError(f"curriculum k must satisfy 1 <= k <= T={self.iterations}, got {self.k}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"curriculum direction must be one of {DIRECTIONS}, got {self.direction!r}")

    def weights(self):
        return [zeta(self, t) for t in range(1, self.iterations + 1)]


def zeta(schedule: CurriculumSchedule, t: int) -> float:
    if not 1 <= t <= schedule.iterations:
        raise IndexError(f"iteration {t} outside 1..{schedule.iterations}")
    if schedule.direction == "literal_eq6":
        return min(1.0, t / schedule.k)
    return max(0.0, (schedule.k - t) / schedule.k)


def combine_episodes(coarse_losses, fine_losses, weights, gamma: float = 1.0) -> Tensor:
    """sum_t gamma^t [w_t * coarse_t + (1 - w_t) * fine_t] over scalar loss tensors."""
    total = None
    for t, (lc, lf, w) in enumerate(zip(coarse_losses, fine_losses, weights), start=1):
        term = scale(add(scale(lc, w), scale(lf, 1.0 - w)), gamma**t)
        total = term if total is None else add(total, term)
    return total


def episodic_loss(trace: IterationTrace, fine_targets, coarse_targets, tax: Taxonomy,
                  schedule: CurriculumSchedule, gamma: float = 1.0) -> Tensor:
    """Curriculum-weighted sum of per-iteration coarse and fine losses."""
    if trace.iterations != schedule.iterations:
        raise ContractError(f"trace has {trace.iterations} iterations, schedule expects {schedule.iterations}")
    if trace.logits[0].shape[1] != tax.fine_count:
        raise ContractError(
            f"logits have {trace.logits[0].shape[1]} classes but the taxonomy has {tax.fine_count} fine classes")
    coarse_targets = np.asarray(coarse_targets, dtype=np.int64).reshape(-1)
    if not np.array_equal(tax.coarse_of(fine_targets), coarse_targets):
        raise ContractError("coarse targets disagree with the taxonomy parents of the fine targets")
    fine = trace.losses if len(trace.losses) == trace.iterations else [
        softmax_cross_entropy(z, fine_targets) for z in trace.logits]
    coarse = [coarse_loss(z, coarse_targets, tax) for z in trace.logits]
    return combine_episodes(coarse, fine, schedule.weights(), gamma)
