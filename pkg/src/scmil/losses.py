"""Bag-level supervised contrastive loss, cross-entropy, the curriculum blend
and the LDAM-DRW baseline objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

# added to self-similarities so an anchor never appears in its own denominator;
# exp() of it underflows to exactly 0
_SELF_MASK = -1e9


@dataclass(frozen=True)
class CurriculumSpec:
    total_steps: int
    kind: str = "linear"
    beta_start: float = 1.0
    beta_end: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.kind not in ("linear", "constant"):
            raise ValueError(f"unknown curriculum kind {self.kind!r}")
        for b in (self.beta_start, self.beta_end):
            if not 0.0 <= b <= 1.0:
                raise ValueError("beta values must lie in [0, 1]")


def beta_schedule(t: int, spec: CurriculumSpec) -> float:
    """Blend weight at optimizer step ``t``; steps past the end clamp to ``beta_end``.

    ``constant`` holds ``beta_start`` for every step.
    """
    if t < 0:
        raise ValueError("step index must be non-negative")
    if spec.kind == "constant":
        return spec.beta_start
    if t >= spec.total_steps:
        return spec.beta_end
    return spec.beta_start + (spec.beta_end - spec.beta_start) * (t / spec.total_steps)


def _labels(labels, n: int, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"labels must be {n} integer class indices")
    if np.any(y < 0) or (n_classes is not None and np.any(y >= n_classes)):
        raise ValueError(f"label outside [0, {n_classes})")
    return y.astype(np.int64)


def positive_mask(labels: np.ndarray) -> np.ndarray:
    """``P[i, j] = 1`` when bags i != j share a label."""
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return same.astype(np.float64)


def supcon_bag_loss(z: Tensor, labels, tau: float, reduction: str = "sum") -> Tensor:
    """Supervised contrastive loss over a batch of bag projections.

    For anchor i, positives are the other bags with its label and the
    denominator runs over every other bag in the batch. Anchors without a
    positive are skipped. ``reduction="mean"`` divides the summed anchor terms
    by the number of anchors that were not skipped, ``"sum"`` leaves them summed.
    Rows of ``z`` are expected to be unit norm already.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need a (B, d) batch with B >= 2")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    B = z.shape[0]
    y = _labels(labels, B)
    pos = positive_mask(y)
    n_pos = pos.sum(axis=1)
    active = n_pos > 0
    weights = np.zeros_like(pos)
    weights[active] = pos[active] / n_pos[active, None]
    if reduction == "mean" and active.any():
        weights /= active.sum()

    sim = dc.scale(dc.matmul(z, dc.transpose(z)), 1.0 / tau)
    masked = dc.add(sim, z.tape.constant(np.diag(np.full(B, _SELF_MASK))))
    log_prob = dc.log_softmax(masked, axis=1)
    return dc.scale(dc.reduce_sum(dc.mul(log_prob, z.tape.constant(weights))), -1.0)


def cross_entropy(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Mean negative log-likelihood of the true class.

    With ``class_weights`` each sample is weighted by the weight of its true
    class and the total is divided by the sum of applied weights.
    """
    if logits.ndim != 2:
        raise dc.ShapeError("cross_entropy", logits.shape)
    B, K = logits.shape
    y = _labels(labels, B, K)
    w = np.ones(B) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[y]
    pick = np.zeros((B, K))
    pick[np.arange(B), y] = w / w.sum()
    log_p = dc.log_softmax(logits, axis=1)
    return dc.scale(dc.reduce_sum(dc.mul(log_p, logits.tape.constant(pick))), -1.0)


def scmil_loss(z: Tensor, logits: Tensor, labels, beta: float, tau: float,
               reduction: str = "sum", class_weights=None) -> tuple[Tensor, Tensor, Tensor]:
    """``beta * L_scl + (1 - beta) * L_ce``; returns ``(total, l_scl, l_ce)``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    l_scl = supcon_bag_loss(z, labels, tau, reduction)
    l_ce = cross_entropy(logits, labels, class_weights)
    total = dc.add(dc.scale(l_scl, beta), dc.scale(l_ce, 1.0 - beta))
    return total, l_scl, l_ce


def ldam_margins(counts, C: float) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ValueError("class counts must be >= 1")
    if C < 0:
        raise ValueError("C must be non-negative")
    return C / counts ** 0.25


def ldam_scale_for_max_margin(counts, max_margin: float = 0.5) -> float:
    """The C that puts the rarest class's margin at ``max_margin``."""
    return max_margin * float(np.min(counts)) ** 0.25


def ldam_loss(logits: Tensor, labels, counts, C: float, class_weights=None) -> Tensor:
    """Cross-entropy after lowering each true-class logit by ``C / n_j**0.25``."""
    B, K = logits.shape
    y = _labels(labels, B, K)
    margins = ldam_margins(counts, C)
    shift = np.zeros((B, K))
    shift[np.arange(B), y] = -margins[y]
    return cross_entropy(dc.add(logits, logits.tape.constant(shift)), y, class_weights)


def drw_weights(counts, beta_eff: float, epoch: int, defer_epoch: int) -> np.ndarray:
    """Deferred re-weighting: ones before ``defer_epoch``, effective-number weights after."""
    counts = np.asarray(counts, dtype=np.float64)
    if not 0.0 <= beta_eff < 1.0:
        raise ValueError("beta_eff must lie in [0, 1)")
    if epoch < defer_epoch:
        return np.ones(counts.size)
    effective = 1.0 - np.power(beta_eff, counts)
    w = (1.0 - beta_eff) / effective
    return w / w.sum() * counts.size
