"""Teacher-forced training objectives.

Every loss averages over the target positions of each caption first and
then over the captions of the batch, so a caption's weight does not depend
on its length. Targets are [B, S] id arrays padded with PAD; positions
holding PAD are ignored.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ShapeMismatch
from .model import ModelParams, SceneBatch, bind, teacher_forced
from .textcore import PAD


def _position_weights(targets: np.ndarray) -> np.ndarray:
    mask = (targets != PAD).astype(float)
    lengths = mask.sum(axis=1, keepdims=True)
    if (lengths == 0).any():
        raise ShapeMismatch("every caption needs at least one target")
    return mask / (lengths * targets.shape[0])


def _as_sequence(dists) -> Tensor:
    """Accept one [B, S, K] tensor or a list of per-step [B, K] tensors."""
    if isinstance(dists, Tensor):
        if dists.data.ndim != 3:
            raise ShapeMismatch(f"expected [B, S, K] distributions, got {dists.shape}")
        return dists
    if not dists:
        raise ShapeMismatch("no distributions")
    tape = dists[0].tape
    for d in dists:
        if d.data.ndim != 2:
            raise ShapeMismatch(f"per-step distributions must be [B, K], got {d.shape}")
    B, K = dists[0].shape
    return tape.concat(*(tape.reshape(d, (B, 1, K)) for d in dists), axis=1)


def _check(dists, targets):
    dists = _as_sequence(dists)
    targets = np.atleast_2d(np.asarray(targets))
    if dists.shape[:2] != targets.shape:
        raise ShapeMismatch(f"distributions {dists.shape} vs targets {targets.shape}")
    return dists, targets


def xe_loss(dists, targets) -> Tensor:
    """Mean negative log-likelihood of the ground-truth words.

    ``dists`` is [B, S, K] (or a list of [B, K] steps); the one-hot selector
    of each target picks its probability.
    """
    dists, targets = _check(dists, targets)
    tape = dists.tape
    B, S, K = dists.shape
    selector = np.zeros((B, S, K))
    rows, cols = np.indices((B, S))
    selector[rows, cols, targets] = _position_weights(targets)
    return tape.scale(tape.sum(tape.mul(tape.const(selector), tape.log(dists))), -1.0)


def kl_loss(dists, soft_targets: np.ndarray, targets) -> Tensor:
    """Mean per-position KL(q || p) between teacher rows ``q`` and student ``p``.

    ``soft_targets`` is [B, S, K]; ``targets`` only supplies the padding mask.
    """
    dists, targets = _check(dists, targets)
    q = np.asarray(soft_targets, dtype=np.float64)
    if q.shape != dists.shape:
        raise ShapeMismatch(f"soft targets {q.shape} vs distributions {dists.shape}")
    tape = dists.tape
    weights = _position_weights(targets)[:, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        q_log_q = np.where(q > 0, q * np.log(q), 0.0)
    const = float((q_log_q * weights).sum())
    cross = tape.sum(tape.mul(tape.const(q * weights), tape.log(dists)))
    # sum q log q - sum q log p
    return tape.add(tape.scale(cross, -1.0), tape.const(const))


def combined_xe_tcts(xe: Tensor, kl: Tensor, lambda1: float) -> Tensor:
    if lambda1 < 0:
        raise ValueError("lambda1 must be >= 0")
    tape = xe.tape
    return tape.add(xe, tape.scale(kl, lambda1))


def soft_targets_from_teacher(teacher: ModelParams, batch: SceneBatch, targets: np.ndarray,
                              temperature: float = 1.0) -> np.ndarray:
    """Teacher distributions along the ground-truth prefixes, as constants [B, S, K].

    Computed on a non-recording tape, so nothing flows back into the teacher.
    """
    if not teacher.uses_attributes:
        raise ValueError("soft targets come from an attribute-mode teacher")
    tape = Tape(record=False)
    W = bind(tape, teacher, as_params=False)
    q = teacher_forced(tape, W, batch, np.atleast_2d(targets), teacher.hidden).data
    if temperature != 1.0:
        q = q ** (1.0 / temperature)
        q = q / q.sum(axis=2, keepdims=True)
    return q
