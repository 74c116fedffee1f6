"""Slide-level inference by exhaustive bagging and majority vote, plus metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import Slide, split_slide_into_bags
from .model import ModelParams, bag_logits


@dataclass
class SlidePrediction:
    slide_id: str
    predicted: int
    probs: np.ndarray            # mean per-bag softmax, (K,)
    bag_predictions: np.ndarray  # (n_bags,)


@dataclass
class MetricsReport:
    f1: float
    auc: float
    per_class_f1: list[float]
    confusion: np.ndarray
    split: str = ""
    rho: float | None = None
    method: str = ""
    skipped_auc_classes: list[int] = field(default_factory=list)


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def vote(bag_predictions: Sequence[int], bag_probs: np.ndarray) -> int:
    """Mode of the bag votes; ties go to the larger summed probability, then the lower index."""
    K = bag_probs.shape[1]
    counts = np.bincount(np.asarray(bag_predictions, dtype=np.int64), minlength=K)
    tied = np.flatnonzero(counts == counts.max())
    if tied.size == 1:
        return int(tied[0])
    mass = bag_probs.sum(axis=0)[tied]
    return int(tied[np.flatnonzero(mass == mass.max())[0]])


def predict_slide(slide: Slide, params: ModelParams, bag_size: int, seed: int = 0) -> SlidePrediction:
    bags = split_slide_into_bags(slide, bag_size, seed)
    probs = []
    full = [b for b in bags if b.shape[0] == bags[0].shape[0]]
    probs.append(_softmax(bag_logits(np.stack(full), params)))
    for b in bags[len(full):]:
        probs.append(_softmax(bag_logits(b[None], params)))
    probs = np.concatenate(probs)
    preds = np.argmax(probs, axis=1)
    return SlidePrediction(slide.slide_id, vote(preds, probs), probs.mean(axis=0), preds)


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def per_class_f1(preds, labels, n_classes: int) -> np.ndarray:
    """F1 per class in percent; a class with no true and no predicted members scores 0."""
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    cm = confusion_matrix(preds, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 200.0 * tp / np.where(denom > 0, denom, 1.0), 0.0)


def macro_f1(preds, labels, n_classes: int) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    return float(per_class_f1(preds, labels, n_classes).mean())


def auroc_binary(scores, positive) -> float:
    """Mann-Whitney AUROC with midranks for ties, in percent."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both positive and negative samples")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


def auroc_ovr_macro(scores, labels, n_classes: int, return_skipped: bool = False):
    """Mean one-vs-rest AUROC (percent) over classes present in ``labels``.

    Classes absent from ``labels`` (or covering every sample) are skipped with
    a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != (labels.size, n_classes):
        raise ValueError(f"scores must be ({labels.size}, {n_classes})")
    values, skipped = [], []
    for j in range(n_classes):
        pos = labels == j
        if pos.all() or not pos.any():
            skipped.append(j)
            continue
        values.append(auroc_binary(scores[:, j], pos))
    if not values:
        raise ValueError("AUROC undefined: no class has both positives and negatives")
    if skipped:
        warnings.warn(f"AUROC skipped classes {skipped} (absent or exhaustive in labels)")
    out = float(np.mean(values))
    return (out, skipped) if return_skipped else out


def evaluate(slides: Sequence[Slide], params: ModelParams, bag_size: int, seed: int = 0,
             split: str = "", rho: float | None = None, method: str = "") -> MetricsReport:
    """Predict every slide and aggregate macro F1 / macro OvR AUROC.

    Slide ``i`` is bagged with seed ``(seed, i)`` so results do not depend on
    evaluation order or parallelism.
    """
    K = params.dims.n_classes
    preds, scores, labels = [], [], []
    for i, slide in enumerate(slides):
        sp = predict_slide(slide, params, bag_size, seed=hash_seed(seed, i))
        preds.append(sp.predicted)
        scores.append(sp.probs)
        labels.append(slide.label)
    preds, labels, scores = np.array(preds), np.array(labels), np.array(scores)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        auc, skipped = auroc_ovr_macro(scores, labels, K, return_skipped=True)
    pcf = per_class_f1(preds, labels, K)
    return MetricsReport(float(pcf.mean()), auc, [float(v) for v in pcf],
                         confusion_matrix(preds, labels, K), split, rho, method, skipped)


def hash_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
