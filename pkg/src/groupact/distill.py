"""Contrastive pair probabilities, soft targets and the distillation loss.

Pair probabilities are temperature-scaled softmaxes over cosine
similarities between two feature sets. The distillation loss pushes both
directions (teacher rows vs. student columns and vice versa) toward soft
targets that spread probability mass uniformly over same-label pairs:
matching is many-to-many, not 1-in-N, because one teacher embedding can
legitimately correspond to several student rows.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (Parameter, Tensor, add, cosine_similarity_matrix,
                       div_by_scalar, mul, one_hot, row_cross_entropy, row_kl,
                       row_softmax)
from .errors import DomainError, EmptyBatchError

TAU_MIN = 1e-3
TAU_MAX = 10.0


class Temperature:
    """Learnable positive softmax temperature.

    :meth:`clamp` confines the value to [TAU_MIN, TAU_MAX] and is applied
    after every optimizer step; a fixed (non-trainable) temperature may
    sit anywhere on the positive axis.
    """

    def __init__(self, init: float = 0.07, trainable: bool = True):
        if init <= 0:
            raise DomainError(f"temperature must be positive, got {init}")
        self.param = Parameter(np.array([[init]]), trainable=trainable)

    @property
    def value(self) -> float:
        return self.param.item()

    def clamp(self) -> None:
        np.clip(self.param.data, TAU_MIN, TAU_MAX, out=self.param.data)


def _as_temperature(tau) -> Temperature:
    if isinstance(tau, Temperature):
        return tau
    return Temperature(float(tau), trainable=False)


def pair_probabilities(x: Tensor, y: Tensor, tau) -> Tensor:
    """Row i is the softmax over j of cos(x_i, y_j) / tau.

    Differentiable in x, y and (when given a trainable Temperature) tau.
    """
    tau = _as_temperature(tau)
    sims = cosine_similarity_matrix(x, y)
    return row_softmax(div_by_scalar(sims, tau.param))


def soft_targets(labels) -> np.ndarray:
    """Row-stochastic target matrix spreading mass over same-label pairs.

    G[i][j] = 1/c_i when label j equals label i (c_i = multiplicity of
    label i in the batch), else 0. With all-distinct labels this is the
    identity matrix.
    """
    ids = np.asarray(labels).reshape(-1)
    if ids.size == 0:
        raise EmptyBatchError("soft_targets needs at least one label")
    same = ids[:, None] == ids[None, :]
    return same / same.sum(axis=1, keepdims=True)


def kd_loss(student: Tensor, teacher: Tensor, labels, tau) -> Tensor:
    """Symmetric KL distillation loss against soft label-match targets.

    0.5 * [KL(G || P_et) + KL(G || P_te)] where P_et pairs teacher rows
    with student columns and P_te the reverse. The teacher side must be
    passed as a constant tensor; gradients reach the student and tau only.
    """
    if student.rows == 0:
        raise EmptyBatchError("kd_loss received an empty batch")
    targets = Tensor(soft_targets(labels))
    if targets.rows != student.rows:
        raise EmptyBatchError(
            f"{targets.rows} labels for {student.rows} student rows")
    tau = _as_temperature(tau)
    p_et = pair_probabilities(teacher, student, tau)
    p_te = pair_probabilities(student, teacher, tau)
    return mul(add(row_kl(targets, p_et), row_kl(targets, p_te)), 0.5)


def symmetric_ce_loss(x: Tensor, y: Tensor, tau) -> Tensor:
    """Symmetric cross-entropy with one-hot diagonal targets (index pairing)."""
    if x.rows == 0:
        raise EmptyBatchError("symmetric_ce_loss received an empty batch")
    tau = _as_temperature(tau)
    eye = one_hot(np.arange(x.rows), x.rows)
    p_xy = pair_probabilities(x, y, tau)
    p_yx = pair_probabilities(y, x, tau)
    return mul(add(row_cross_entropy(eye, p_xy), row_cross_entropy(eye, p_yx)), 0.5)
