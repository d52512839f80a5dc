"""Mutual information between a template set and feature maps, and its gradient.

Every channel of every sample in a ``(b, c, h, w)`` batch is one draw of the
feature map ``x``, weighted ``1 / (b*c)``.  For each draw the template
posterior is ``P(T|x) = softmax_T(<x, T>)`` and the estimate is the average
``KL(P(T|x) || P(T))`` against the uniform prior, in nats.  The loss is the
negated estimate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError
from .templates import TemplateSet

__all__ = [
    "LossConfig",
    "MIResult",
    "fitness",
    "conditional_likelihood",
    "marginal",
    "mutual_information",
    "ecloss_and_gradient",
    "total_loss",
    "update_beta",
]

SCHEDULES = ("fixed", "auto")


@dataclass(frozen=True)
class LossConfig:
    """Weights of the classification term (``alpha``) and MI term (``beta``).

    With ``beta_schedule="auto"`` the trainer calls :func:`update_beta` every
    ``beta_window`` steps.
    """

    alpha: float = 1.0
    beta: float = 1e-5
    beta_schedule: str = "fixed"
    beta_window: int = 50
    beta_up: float = 1.5
    beta_down: float = 0.5
    beta_min: float = 1e-7
    beta_max: float = 1e-2

    def __post_init__(self):
        if not self.alpha >= 0:
            raise DomainError(f"alpha must be >= 0, got {self.alpha!r}")
        if not self.beta >= 0:
            raise DomainError(f"beta must be >= 0, got {self.beta!r}")
        if self.beta_schedule not in SCHEDULES:
            raise DomainError(f"beta_schedule must be one of {SCHEDULES}, got {self.beta_schedule!r}")
        if self.beta_window < 2:
            raise DomainError("beta_window must be >= 2")


@dataclass(frozen=True)
class MIResult:
    mi: float
    per_channel_mi: np.ndarray
    conditional: np.ndarray
    marginal: np.ndarray


def _as_batch(batch, tset):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4:
        raise DomainError(f"feature batch must be 4-D (b, c, h, w), got shape {x.shape}")
    if x.shape[2:] != tset.params.shape:
        raise DomainError(f"feature maps {x.shape[2:]} do not match templates {tset.params.shape}")
    if x.shape[0] == 0 or x.shape[1] == 0:
        raise DomainError("empty feature batch")
    return x


def fitness(x, tset: TemplateSet) -> np.ndarray:
    """``<x, T>`` for every template ``T``; ``x`` may carry leading batch axes."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != tset.params.shape:
        raise DomainError(f"feature map {x.shape[-2:]} does not match templates {tset.params.shape}")
    flat = x.reshape(*x.shape[:-2], -1)
    return flat @ tset.matrix.T


def _log_softmax(f):
    shifted = f - f.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def conditional_likelihood(fit) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    f = np.asarray(fit, dtype=np.float64)
    e = np.exp(f - f.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def marginal(conditionals) -> np.ndarray:
    """Batch mean of conditional rows, the stand-in for integrating over P(x)."""
    p = np.atleast_2d(np.asarray(conditionals, dtype=np.float64))
    if p.shape[0] == 0:
        raise DomainError("marginal of an empty batch")
    return p.mean(axis=0)


def _rows(x, tset):
    b, c = x.shape[:2]
    f = x.reshape(b * c, -1) @ tset.matrix.T
    logp = _log_softmax(f)
    p = np.exp(logp)
    # KL(p || uniform) per row; clamp rounding noise below the exact floor of 0
    kl = np.maximum((p * (logp + math.log(len(tset)))).sum(axis=1), 0.0)
    return f, logp, p, kl


def mutual_information(batch, tset: TemplateSet) -> MIResult:
    x = _as_batch(batch, tset)
    b, c = x.shape[:2]
    _, _, p, kl = _rows(x, tset)
    mi = math.fsum(kl.tolist()) / kl.size
    return MIResult(
        mi=mi,
        per_channel_mi=kl.reshape(b, c).mean(axis=0),
        conditional=p,
        marginal=marginal(p),
    )


def ecloss_and_gradient(batch, tset: TemplateSet):
    """Return ``(-MI, d(-MI)/d batch)``.

    Per draw, ``dKL/dx = sum_T P(T|x) (f_T - E_P[f]) T`` where ``f_T = <x, T>``.
    """
    x = _as_batch(batch, tset)
    f, _, p, kl = _rows(x, tset)
    centred = f - (p * f).sum(axis=1, keepdims=True)
    grad = -((p * centred) @ tset.matrix) / kl.size
    loss = -math.fsum(kl.tolist()) / kl.size
    return loss, grad.reshape(x.shape)


def total_loss(cls_loss: float, mi: float, config: LossConfig) -> float:
    return config.alpha * cls_loss - config.beta * mi


def update_beta(config: LossConfig, history) -> LossConfig:
    """Adapt ``beta`` from the trend of the last ``beta_window`` total losses.

    Decreasing loss multiplies ``beta`` by ``beta_up``, increasing loss by
    ``beta_down``; the result is clamped to ``[beta_min, beta_max]``.
    """
    if config.beta_schedule == "fixed":
        return config
    recent = list(history)[-config.beta_window:]
    if len(recent) < 2 or recent[-1] == recent[0]:
        return config
    factor = config.beta_up if recent[-1] < recent[0] else config.beta_down
    beta = min(max(config.beta * factor, config.beta_min), config.beta_max)
    return replace(config, beta=beta)
