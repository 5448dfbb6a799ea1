"""AdamW with decoupled weight decay and a linear warmup schedule."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter
from .errors import DomainError


def adamw_step(params: list[Parameter], lr: float, betas: tuple[float, float],
               weight_decay: float, step: int, state: dict[int, dict],
               eps: float = 1e-8) -> None:
    """Apply one AdamW update in place.

    Only parameters with ``trainable=True`` are touched; frozen parameters
    stay bit-identical. ``state`` maps the index of each parameter in
    ``params`` to its first/second moment buffers and is created lazily.
    ``step`` is 1-based and drives the bias correction.
    """
    if lr <= 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    if step < 1:
        raise DomainError(f"step count is 1-based, got {step}")
    b1, b2 = betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for i, p in enumerate(params):
        if not p.trainable:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        st = state.setdefault(i, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
        m_hat = st["m"] / c1
        v_hat = st["v"] / c2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


class AdamW:
    """Stateful wrapper around :func:`adamw_step`."""

    def __init__(self, params: list[Parameter], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999),
                 weight_decay: float = 0.0, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.state: dict[int, dict] = {}
        self.step_count = 0

    def step(self, lr: float | None = None) -> None:
        self.step_count += 1
        adamw_step(self.params, self.lr if lr is None else lr, self.betas,
                   self.weight_decay, self.step_count, self.state, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def warmup_lr(base_lr: float, epoch: int, warmup_epochs: int) -> float:
    """Linear ramp 0 -> base_lr over the warmup epochs, constant afterwards.

    ``epoch`` is 0-based; the ramp reaches base_lr at the end of epoch
    ``warmup_epochs - 1``.
    """
    if warmup_epochs <= 0 or epoch + 1 >= warmup_epochs:
        return base_lr
    return base_lr * (epoch + 1) / warmup_epochs
