"""AdamW with decoupled weight decay, cosine warmup schedule, norm clipping."""

import logging
import math
from typing import List, Sequence, Tuple

import numpy as np

from utils.errors import ShapeError

logger = logging.getLogger(__name__)


class AdamW:
    """Adaptive-moment optimizer updating numpy parameters in place."""

    def __init__(
        self,
        params: Sequence[np.ndarray],
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.exp_avg = [np.zeros_like(p) for p in self.params]
        self.exp_avg_sq = [np.zeros_like(p) for p in self.params]
        self.steps = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradient(s) for {len(self.params)} parameter(s)")
        self.steps += 1
        bias1 = 1.0 - self.beta1 ** self.steps
        bias2 = 1.0 - self.beta2 ** self.steps
        for p, g, m, v in zip(self.params, grads, self.exp_avg, self.exp_avg_sq):
            if g.shape != p.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} does not match parameter {p.shape}",
                    expected=p.shape,
                    actual=g.shape,
                )
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    """Warmup length, never less than one step."""
    return max(1, math.ceil(warmup_ratio * total_steps))


def cosine_with_warmup(step: int, total_steps: int, warmup_ratio: float = 0.1) -> float:
    """Learning-rate multiplier for a 0-based optimizer step.

    Linear warmup to 1 over the warmup steps, then cosine decay to 0 at
    total_steps.
    """
    warmup = warmup_steps(total_steps, warmup_ratio)
    if step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return max(0.0, 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress))))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> Tuple[List[np.ndarray], float]:
    """Rescale gradients so their global 2-norm is at most max_norm.

    Returns the clipped gradients and the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    coef = max_norm / (total + 1e-6)
    if coef < 1.0:
        return [g * coef for g in grads], total
    return [np.array(g) for g in grads], total
