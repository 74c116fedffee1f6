"""Method x ratio x seed sweeps with long-format and pivoted CSV output."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import (
    METHODS, SCHEMA_VERSION, STAGES, ConfigError, ExperimentConfig, config_from_dict,
)
from .experiment import run_experiment

log = logging.getLogger("scmil.sweep")

LONG_FIELDS = ("method", "rho", "split", "seed", "tau", "stage", "f1", "auc",
               "per_class_f1", "config_hash", "status")


@dataclass(frozen=True)
class SweepSpec:
    methods: tuple[str, ...]
    ratios: tuple[float, ...]
    seeds: tuple[int, ...]
    temperatures: tuple[float, ...] = ()
    stage_modes: tuple[str, ...] = ("single",)
    base: ExperimentConfig = field(default_factory=ExperimentConfig)
    ablation_method: str = "SC-MIL-RS"
    splits: tuple[str, ...] = ("test", "ood")

    def __post_init__(self):
        if not self.methods or not self.ratios or not self.seeds or not self.stage_modes:
            raise ConfigError("methods, ratios, seeds and stage_modes must be non-empty")
        for m in self.methods + (self.ablation_method,):
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if any(s not in STAGES for s in self.stage_modes):
            raise ConfigError(f"stage_modes must be drawn from {STAGES}")
        if any(t <= 0 for t in self.temperatures) or any(r < 1 for r in self.ratios):
            raise ConfigError("temperatures must be positive and ratios >= 1")
        if "two" in self.stage_modes and not self.ablation_method.startswith("SC-MIL"):
            raise ConfigError("stage ablation needs an SC-MIL ablation_method")
        if not self.splits or any(s not in ("val", "test", "ood") for s in self.splits):
            raise ConfigError("splits must be drawn from val, test, ood")

    def with_base(self, base: ExperimentConfig) -> "SweepSpec":
        return dataclasses.replace(self, base=base)

    def cell_config(self, method: str, rho: float, seed: int, tau: float | None = None,
                    stage: str = "single") -> ExperimentConfig:
        b = self.base
        return b.replace(method=method, rho=float(rho), stage=stage,
                         tau=b.tau if tau is None else float(tau),
                         data_seed=b.data_seed + seed, init_seed=b.init_seed + seed,
                         sample_seed=b.sample_seed + seed)

    def cells(self) -> list[tuple[int, ExperimentConfig]]:
        """(seed, config) for every distinct cell, main grid first, duplicates dropped."""
        out, seen = [], set()

        def add(seed, cfg):
            h = cfg.config_hash()
            if h not in seen:
                seen.add(h)
                out.append((seed, cfg))

        for m in self.methods:
            for rho in self.ratios:
                for s in self.seeds:
                    add(s, self.cell_config(m, rho, s))
        for tau in self.temperatures:
            for rho in self.ratios:
                for s in self.seeds:
                    add(s, self.cell_config(self.ablation_method, rho, s, tau=tau))
        for stage in (self.stage_modes if len(self.stage_modes) > 1 else ()):
            for rho in self.ratios:
                for s in self.seeds:
                    add(s, self.cell_config(self.ablation_method, rho, s, stage=stage))
        return out


_SWEEP_KEYS = {"schema_version", "methods", "ratios", "seeds", "temperatures", "stage_modes",
               "base", "ablation_method", "splits"}


def sweep_from_dict(raw: dict) -> SweepSpec:
    if not isinstance(raw, dict):
        raise ConfigError("sweep spec must be a JSON object")
    unknown = sorted(set(raw) - _SWEEP_KEYS)
    if unknown:
        raise ConfigError(f"sweep: unknown keys {unknown}")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"sweep: schema_version must be {SCHEMA_VERSION}")
    base = raw.get("base", {})
    base = config_from_dict({"schema_version": SCHEMA_VERSION, **base})
    kwargs = {k: tuple(raw[k]) for k in ("methods", "ratios", "seeds", "temperatures",
                                         "stage_modes", "splits") if k in raw}
    missing = {"methods", "ratios", "seeds"} - set(kwargs)
    if missing:
        raise ConfigError(f"sweep: missing keys {sorted(missing)}")
    if "ablation_method" in raw:
        kwargs["ablation_method"] = raw["ablation_method"]
    try:
        return SweepSpec(base=base, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"sweep: {exc}") from exc


def load_sweep(path: str | Path) -> SweepSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return sweep_from_dict(raw)


def _fmt(x: float) -> str:
    return repr(float(x))


def run_cell(seed: int, cfg: ExperimentConfig, splits: tuple[str, ...]) -> list[dict]:
    """Long-format rows for one cell; failures become rows with a status message."""
    base = dict(method=cfg.method, rho=_fmt(cfg.rho), seed=seed, tau=_fmt(cfg.tau),
                stage=cfg.stage, config_hash=cfg.config_hash())
    try:
        result = run_experiment(cfg, eval_splits=splits)
    except Exception as exc:  # recorded, the sweep carries on
        msg = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
        return [dict(base, split=s, f1="", auc="", per_class_f1="", status=msg) for s in splits]
    rows = []
    for s in splits:
        r = result.reports[s]
        rows.append(dict(base, split=s, f1=_fmt(r.f1), auc=_fmt(r.auc),
                         per_class_f1=";".join(_fmt(v) for v in r.per_class_f1), status="ok"))
    return rows


def _run_cell_args(args):
    return run_cell(*args)


def write_csv(path: Path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_long_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _mean(rows, key):
    vals = [float(r[key]) for r in rows if r["status"] == "ok"]
    return f"{np.mean(vals):.2f}" if vals else ""


def _ratio_label(rho: str) -> str:
    return f"{float(rho):g}"


def pivot_main(rows: list[dict], split: str, tau: float) -> tuple[list[str], list[dict]]:
    """Methods x ratio x {F1, AUC}, single-stage cells at the base temperature."""
    sel = [r for r in rows if r["split"] == split and r["stage"] == "single"
           and float(r["tau"]) == tau]
    methods = list(dict.fromkeys(r["method"] for r in sel))
    ratios = sorted({r["rho"] for r in sel}, key=float)
    fields = ["method"] + [f"{m}_rho{_ratio_label(rho)}" for rho in ratios for m in ("f1", "auc")]
    groups = defaultdict(list)
    for r in sel:
        groups[(r["method"], r["rho"])].append(r)
    table = []
    for m in methods:
        row = {"method": m}
        for rho in ratios:
            g = groups.get((m, rho), [])
            row[f"f1_rho{_ratio_label(rho)}"] = _mean(g, "f1")
            row[f"auc_rho{_ratio_label(rho)}"] = _mean(g, "auc")
        table.append(row)
    return fields, table


def pivot_ablation(rows: list[dict], split: str, method: str, key: str,
                   where) -> tuple[list[str], list[dict]]:
    """Ratio x ``key`` rows with mean F1 and AUC."""
    sel = [r for r in rows if r["split"] == split and r["method"] == method and where(r)]
    groups = defaultdict(list)
    for r in sel:
        groups[(r["rho"], r[key])].append(r)
    order = sorted(groups, key=lambda k: (float(k[0]), k[1] if key == "stage" else float(k[1])))
    out_key = "stage" if key == "stage" else "tau"
    table = []
    for rho, v in order:
        label = {"single": "1", "two": "2"}.get(v, v) if key == "stage" else f"{float(v):g}"
        table.append({"rho": _ratio_label(rho), out_key: label,
                      "f1": _mean(groups[(rho, v)], "f1"), "auc": _mean(groups[(rho, v)], "auc")})
    return ["rho", out_key, "f1", "auc"], table


def write_tables(rows: list[dict], spec: SweepSpec, out: Path) -> list[Path]:
    files = []
    for split in spec.splits:
        fields, table = pivot_main(rows, split, spec.base.tau)
        path = out / f"table_{split}.csv"
        write_csv(path, fields, table)
        files.append(path)
        if len(spec.temperatures) > 1:
            fields, table = pivot_ablation(rows, split, spec.ablation_method, "tau",
                                           lambda r: r["stage"] == "single")
            path = out / f"temperature_{split}.csv"
            write_csv(path, fields, table)
            files.append(path)
        if len(spec.stage_modes) > 1:
            tau = spec.base.tau
            fields, table = pivot_ablation(rows, split, spec.ablation_method, "stage",
                                           lambda r: float(r["tau"]) == tau)
            path = out / f"stage_{split}.csv"
            write_csv(path, fields, table)
            files.append(path)
    return files


@dataclass
class SweepResult:
    rows: list[dict]
    files: list[Path]
    total: int
    failed: int


def run_sweep(spec: SweepSpec, out: str | Path, jobs: int = 1, verbose: bool = False) -> SweepResult:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cells = spec.cells()
    tasks = [(seed, cfg, spec.splits) for seed, cfg in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, tasks))
    else:
        results = []
        for i, t in enumerate(tasks):
            if verbose:
                log.info("cell %d/%d: %s rho=%g seed=%d tau=%g %s", i + 1, len(tasks),
                         t[1].method, t[1].rho, t[0], t[1].tau, t[1].stage)
            results.append(run_cell(*t))
    rows = [r for cell in results for r in cell]
    long_path = out / "long.csv"
    write_csv(long_path, LONG_FIELDS, rows)
    files = [long_path] + write_tables(read_long_csv(long_path), spec, out)
    failed = sum(1 for cell in results if cell[0]["status"] != "ok")
    return SweepResult(rows, files, len(cells), failed)


__all__ = ["SweepSpec", "SweepResult", "sweep_from_dict", "load_sweep", "run_cell", "run_sweep",
           "pivot_main", "pivot_ablation", "read_long_csv"]
