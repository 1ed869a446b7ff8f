"""Adversarial, cycle-consistency and segmentation losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ParameterError, ShapeError

PROB_CLAMP = 1e-7
DEFAULT_LAMBDA_CYCLE = 10.0


def _clamped(p) -> Tensor:
    return ag.clip(ag.as_tensor(p), PROB_CLAMP, 1 - PROB_CLAMP)


def discriminator_loss(d_real, d_fake) -> Tensor:
    """Mean of ``-log D(real) - log(1 - D(fake))``.

    Both arguments are probabilities of the "real" class. This is the negated
    minimax value, so it equals ``log 4`` at the equilibrium ``D = 1/2``.
    """
    real = ag.log(_clamped(d_real))
    fake = ag.log(1.0 - _clamped(d_fake))
    return -(ag.mean(real) + ag.mean(fake))


def generator_adv_loss(d_fake) -> Tensor:
    """Non-saturating generator loss ``mean(-log D(G(x)))``."""
    return -ag.mean(ag.log(_clamped(d_fake)))


def cycle_loss(x_s, x_s_rec, x_t, x_t_rec) -> Tensor:
    """Mean-L1 reconstruction error summed over both translation directions."""
    x_s, x_s_rec, x_t, x_t_rec = (ag.as_tensor(v) for v in (x_s, x_s_rec, x_t, x_t_rec))
    if x_s.shape != x_s_rec.shape or x_t.shape != x_t_rec.shape:
        raise ShapeError(
            f"cycle_loss shape mismatch: {x_s.shape} vs {x_s_rec.shape}, {x_t.shape} vs {x_t_rec.shape}"
        )
    return ag.l1_distance(x_s_rec, x_s) + ag.l1_distance(x_t_rec, x_t)


def segmentation_loss(logits, labels: np.ndarray, ignore_index: Optional[int] = None) -> Tensor:
    """Per-pixel softmax cross-entropy averaged over non-ignored pixels."""
    return ag.cross_entropy(logits, labels, ignore_index)


@dataclass
class GanLossTerms:
    d_loss_real: float
    d_loss_fake: float
    g_adv_st: float
    g_adv_ts: float
    cycle_loss: float
    g_total: float

    @property
    def g_adv_loss(self) -> float:
        return self.g_adv_st + self.g_adv_ts


def total_generator_objective(adv_st, adv_ts, cycle, lambda_cycle: float = DEFAULT_LAMBDA_CYCLE):
    """``adv(S->T) + adv(T->S) + lambda_cycle * cycle``; works on tensors or floats."""
    if lambda_cycle < 0:
        raise ParameterError(f"lambda_cycle must be >= 0, got {lambda_cycle}")
    return adv_st + adv_ts + cycle * lambda_cycle
