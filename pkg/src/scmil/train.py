"""Adam and the training loops for the five methods, single- and two-stage."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from . import losses as L
from .config import ExperimentConfig
from .data import Slide, class_counts, sample_batch_class_balanced, sample_batch_random
from .evaluation import evaluate
from .model import ATTENTION, CLASSIFIER, ENCODER, PROJECTION, ModelParams, forward_batch, init_params

HISTORY_COLUMNS = ("step", "loss", "l_scl", "l_ce", "beta", "val_f1", "val_auc")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, components: dict[str, float] | str):
        super().__init__(f"non-finite loss at step {step}: {components}")
        self.step = step
        self.components = components


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              names: Sequence[str] | None = None) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    Only ``names`` (default: every parameter) are touched; a missing gradient
    counts as zero.
    """
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for k in (params if names is None else names):
        p = params[k]
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        state.m[k], state.v[k] = m, v
        params[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class TrainHistory:
    step: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    l_scl: list[float] = field(default_factory=list)
    l_ce: list[float] = field(default_factory=list)
    beta: list[float] = field(default_factory=list)
    val: dict[int, tuple[float, float]] = field(default_factory=dict)
    drw: list[np.ndarray] = field(default_factory=list)

    def append(self, step, loss, l_scl, l_ce, beta):
        self.step.append(step)
        self.loss.append(loss)
        self.l_scl.append(l_scl)
        self.l_ce.append(l_ce)
        self.beta.append(beta)

    def __len__(self):
        return len(self.step)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)

        def fmt(x):
            return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))

        for i, s in enumerate(self.step):
            f1, auc = self.val.get(s, (None, None))
            w.writerow([s, fmt(self.loss[i]), fmt(self.l_scl[i]), fmt(self.l_ce[i]),
                        fmt(self.beta[i]), fmt(f1), fmt(auc)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def _sampler(cfg: ExperimentConfig) -> Callable:
    if cfg.sampler == "balanced":
        K = cfg.n_classes
        return lambda slides, bs, n, rng: sample_batch_class_balanced(slides, bs, n, rng, K)
    return sample_batch_random


def _clip(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if max_norm is None:
        return grads
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def _named_grads(bound: dict[str, dc.Tensor], grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: grads[t.id] for k, t in bound.items() if t.id in grads}


def _check_finite(step: int, **parts: float):
    if not all(math.isfinite(v) for v in parts.values() if v is not None):
        raise TrainingDiverged(step, parts)


class _Validator:
    def __init__(self, cfg: ExperimentConfig, val: Sequence[Slide] | None):
        self.cfg, self.val = cfg, val

    def __call__(self, history: TrainHistory, step: int, params: ModelParams):
        every = self.cfg.val_every
        if not self.val or every <= 0 or (step + 1) % every:
            return
        rep = evaluate(self.val, params, self.cfg.bag_size, self.cfg.eval_seed, split="val")
        history.val[step] = (rep.f1, rep.auc)


def epoch_layout(cfg: ExperimentConfig, n_train: int) -> tuple[int, int]:
    """``(steps_per_epoch, defer_epoch)`` for deferred re-weighting."""
    per_epoch = max(1, math.ceil(n_train / cfg.batch_size))
    n_epochs = max(1, math.ceil(cfg.steps / per_epoch))
    return per_epoch, int(math.floor(cfg.drw_defer_fraction * n_epochs))


def train(cfg: ExperimentConfig, train_slides: Sequence[Slide],
          val_slides: Sequence[Slide] | None = None,
          on_step: Callable[[int, ModelParams], None] | None = None) -> tuple[ModelParams, TrainHistory]:
    """Single-stage training of ``cfg.method`` for ``cfg.steps`` optimizer steps."""
    if cfg.stage == "two":
        return train_two_stage(cfg, train_slides, val_slides, on_step)
    params = init_params(cfg.dims(), cfg.init_seed)
    history = TrainHistory()
    rng = np.random.default_rng(cfg.sample_seed)
    sample = _sampler(cfg)
    validate = _Validator(cfg, val_slides)
    state = AdamState()
    curriculum = cfg.curriculum_spec()
    counts = class_counts(train_slides, cfg.n_classes)
    per_epoch, defer_epoch = epoch_layout(cfg, len(train_slides))
    ldam_c = L.ldam_scale_for_max_margin(np.maximum(counts, 1), cfg.ldam_max_margin)

    for t in range(cfg.steps):
        bags, labels = sample(train_slides, cfg.bag_size, cfg.batch_size, rng)
        tape = dc.Tape()
        bound = params.bind(tape)
        try:
            out = forward_batch(tape, bags, bound, with_projection=cfg.is_contrastive)
            l_scl = None
            beta = 0.0
            if cfg.is_contrastive:
                beta = L.beta_schedule(t, curriculum)
                loss, scl, ce = L.scmil_loss(out.z, out.logits, labels, beta, cfg.tau, cfg.scl_reduction)
                l_scl = scl.item()
            elif cfg.method == "LDAM-DRW":
                w = L.drw_weights(counts, cfg.drw_beta, t // per_epoch, defer_epoch)
                history.drw.append(w)
                loss = ce = L.ldam_loss(out.logits, labels, counts, ldam_c, w)
            else:
                loss = ce = L.cross_entropy(out.logits, labels)
        except dc.NonFiniteError as exc:
            raise TrainingDiverged(t, str(exc)) from exc
        _check_finite(t, loss=loss.item(), l_scl=l_scl, l_ce=ce.item())
        grads = _clip(_named_grads(bound, dc.backward(tape, loss)), cfg.max_grad_norm)
        adam_step(params.arrays, grads, state, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        history.append(t, loss.item(), l_scl, ce.item(), beta)
        validate(history, t, params)
        if on_step is not None:
            on_step(t, params)
    return params, history


def train_two_stage(cfg: ExperimentConfig, train_slides: Sequence[Slide],
                    val_slides: Sequence[Slide] | None = None,
                    on_step: Callable[[int, ModelParams], None] | None = None) -> tuple[ModelParams, TrainHistory]:
    """Contrastive feature learning, then cross-entropy on the classifier alone.

    Stage 1 (``two_stage_split`` of the steps) updates encoder, attention and
    projection with the contrastive loss only. Stage 2 freezes everything but
    the classifier and restarts Adam.
    """
    if not cfg.is_contrastive:
        raise ValueError("two-stage training needs an SC-MIL method")
    params = init_params(cfg.dims(), cfg.init_seed)
    history = TrainHistory()
    rng = np.random.default_rng(cfg.sample_seed)
    sample = _sampler(cfg)
    validate = _Validator(cfg, val_slides)
    stage1 = int(cfg.steps * cfg.two_stage_split)
    feature_names = ENCODER + ATTENTION + PROJECTION

    state = AdamState()
    for t in range(cfg.steps):
        if t == stage1:
            state = AdamState()
        bags, labels = sample(train_slides, cfg.bag_size, cfg.batch_size, rng)
        tape = dc.Tape()
        first = t < stage1
        if first:
            bound = params.bind(tape)
        else:
            # frozen weights enter as constants so no gradient reaches them
            bound = {k: (tape.variable(v) if k in CLASSIFIER else tape.constant(v))
                     for k, v in params.arrays.items()}
        try:
            out = forward_batch(tape, bags, bound, with_projection=first)
            ce = L.cross_entropy(out.logits, labels)
            if first:
                scl = L.supcon_bag_loss(out.z, labels, cfg.tau, cfg.scl_reduction)
                loss, l_scl, beta, names = scl, scl.item(), 1.0, feature_names
            else:
                loss, l_scl, beta, names = ce, None, 0.0, CLASSIFIER
        except dc.NonFiniteError as exc:
            raise TrainingDiverged(t, str(exc)) from exc
        _check_finite(t, loss=loss.item(), l_scl=l_scl, l_ce=ce.item())
        grads = _clip(_named_grads(bound, dc.backward(tape, loss)), cfg.max_grad_norm)
        adam_step(params.arrays, grads, state, cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
                  cfg.adam_eps, names=names)
        history.append(t, loss.item(), l_scl, ce.item(), beta)
        validate(history, t, params)
        if on_step is not None:
            on_step(t, params)
    return params, history
