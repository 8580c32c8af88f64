"""Reward shaping for the reinforcement stage.

The self-critical reward is one number per sampled caption. The
teacher-critical adjustment splits the sampled words into those on a longest
common subsequence with the teacher's greedy caption ("appropriate") and the
rest ("inaccurate"), and shifts their rewards so that the shifts sum to zero
over the caption.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import DegenerateCaption, ShapeMismatch
from .textcore import LcsPartition


def scst_reward(cider_sample: float, cider_greedy: float) -> float:
    return cider_sample - cider_greedy


@dataclass(frozen=True)
class TctsAdjustment:
    eta: float
    r_appr: float
    r_inac: float
    n: int
    m: int


def tcts_adjustment(n: int, m: int, cider_teacher: float) -> TctsAdjustment:
    """Zero-sum per-word bonuses from ``n`` matched and ``m`` unmatched words.

    >>> a = tcts_adjustment(3, 1, 1.0)
    >>> (a.eta, a.r_appr, a.r_inac)
    (0.5, 0.5, -1.5)
    """
    if n < 0 or m < 0:
        raise ValueError("counts must be non-negative")
    if n + m == 0:
        raise DegenerateCaption("no words to reward")
    eta = (n - m) / (n + m) * cider_teacher
    return TctsAdjustment(eta, cider_teacher - eta, -cider_teacher - eta, n, m)


def tcts_reward_vector(partition: LcsPartition, scst: float, adj: TctsAdjustment,
                       lambda2: float) -> np.ndarray:
    """Per-position rewards ``scst + lambda2 * (r_appr | r_inac)``.

    The partition must describe the same population the adjustment was
    computed from; use ``partition.with_eos()`` to reward the EOS position
    as a matched word.
    """
    if lambda2 < 0:
        raise ValueError("lambda2 must be >= 0")
    if len(partition) == 0:
        raise DegenerateCaption("empty partition")
    if (partition.n, partition.m) != (adj.n, adj.m):
        raise ValueError(
            f"partition counts {(partition.n, partition.m)} differ from adjustment {(adj.n, adj.m)}"
        )
    bonus = np.where(np.array(partition.in_lcs), adj.r_appr, adj.r_inac)
    return scst + lambda2 * bonus


def teacher_critical_rewards(partition: LcsPartition, scst: float, cider_teacher: float,
                             lambda2: float) -> np.ndarray:
    """Reward vector over the student's words plus its EOS."""
    full = partition.with_eos()
    return tcts_reward_vector(full, scst, tcts_adjustment(full.n, full.m, cider_teacher), lambda2)


def pg_loss(log_probs: Sequence[Tensor], rewards: np.ndarray) -> Tensor:
    """Surrogate ``-sum_t r_t log p_t``, averaged over the batch.

    ``log_probs`` holds one [B] tensor per step; ``rewards`` is [B, S] and is
    treated as a constant.
    """
    rewards = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    if len(log_probs) != rewards.shape[1] or any(lp.shape != (rewards.shape[0],) for lp in log_probs):
        raise ShapeMismatch(f"{len(log_probs)} log-prob steps vs rewards {rewards.shape}")
    tape = log_probs[0].tape
    B = rewards.shape[0]
    total = None
    for t, lp in enumerate(log_probs):
        term = tape.sum(tape.mul(tape.const(rewards[:, t] / B), lp))
        total = term if total is None else tape.add(total, term)
    return tape.scale(total, -1.0)
