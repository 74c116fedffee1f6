"""One experiment cell: data, training, and ID/OOD evaluation."""

from __future__ import annotations

from dataclasses import dataclass

from .config import ExperimentConfig
from .data import Slide, build_splits
from .evaluation import MetricsReport, evaluate
from .model import ModelParams
from .train import TrainHistory, train


def make_splits(cfg: ExperimentConfig) -> dict[str, list[Slide]]:
    return build_splits(cfg.dataset_spec(), cfg.imbalance(), cfg.shift, cfg.splits)


@dataclass
class CellResult:
    config: ExperimentConfig
    params: ModelParams
    history: TrainHistory
    reports: dict[str, MetricsReport]


def run_experiment(cfg: ExperimentConfig, splits: dict[str, list[Slide]] | None = None,
                   eval_splits: tuple[str, ...] = ("test", "ood")) -> CellResult:
    splits = splits if splits is not None else make_splits(cfg)
    params, history = train(cfg, splits["train"], splits.get("val"))
    reports = {
        name: evaluate(splits[name], params, cfg.bag_size, cfg.eval_seed,
                       split=name, rho=cfg.rho, method=cfg.method)
        for name in eval_splits
    }
    return CellResult(cfg, params, history, reports)
