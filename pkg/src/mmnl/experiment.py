"""Simulation study runner: scenario grid x methods x replications.

Every cell ``(scenario, N, T, replication, method)`` is independent. Its data
seed depends on ``(scenario, N, T, replication)`` only, so all methods see the
same data; estimator seeds add the method's position in :data:`ALL_METHODS`.
Finished cells are stored as JSON files under ``<output>/cells`` and skipped
when a run is resumed. Tables are rebuilt from the cell files, and timings go
to their own tables so the metric tables are reproducible byte for byte.
"""

from __future__ import annotations

import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .data import ScenarioConfig, build_true_population, generate_dataset, generate_validation_set
from .evaluation import (
    PredictiveConfig,
    PredictiveReport,
    posterior_predictive_distribution,
    rmse,
    true_choice_distribution,
    tvd,
    unique_elements,
)
from .mcmc import McmcConfig, run_mcmc
from .msle import MsleConfig, conditional_betas, fit_msle
from .vb import UnsupportedVariantError, VbConfig, parse_variant, run_vb, vb_point_estimates

log = logging.getLogger(__name__)

ALL_METHODS = ("MSLE", "MCMC", "VB-QN-Delta", "VB-QN-QMC", "VB-QN-MJI", "VB-NCVMP-Delta", "VB-NCVMP-MJI")
WORKERS_ENV = "MMNL_WORKERS"


_TREATMENT_NAMES = {"delta": "Delta", "qmc": "QMC", "mji": "MJI"}


class ConfigError(ValueError):
    pass


def canonical_method(name: str) -> str:
    text = str(name).strip().replace("Δ", "Delta")
    upper = text.upper()
    if upper in ("MSLE", "MCMC"):
        return upper
    body = upper[3:] if upper.startswith("VB-") else upper
    try:
        method, treatment = parse_variant(body)
    except UnsupportedVariantError as exc:
        raise ConfigError(f"methods: {exc}") from None
    return f"VB-{method.upper()}-{_TREATMENT_NAMES[treatment]}"


DESK_DEFAULTS = {
    "grid": [[500, 5]],
    "replications": 5,
    "mcmc": {"chains": 2, "iterations": 20_000, "burn_in": 10_000, "thin": 5},
    "msle": {"num_draws": 200, "conditional_draws": 10_000},
    "vb": {"tol": 0.005, "max_iter": 500, "num_draws": 64},
    "prediction": {"true_draws": 1_000_000, "outer_draws": 200, "inner_draws": 2000},
}

FULL_DEFAULTS = {
    "grid": [[500, 5], [500, 10], [2000, 5], [2000, 10]],
    "replications": 20,
    "mcmc": {"chains": 2, "iterations": 100_000, "burn_in": 50_000, "thin": 5},
    "msle": {"num_draws": 1000, "conditional_draws": 10_000},
    "vb": {"tol": 0.005, "max_iter": 500, "num_draws": 64},
    "prediction": {"true_draws": 1_000_000, "outer_draws": 500, "inner_draws": 10_000},
}


@dataclass
class ExperimentConfig:
    scenarios: list = field(default_factory=lambda: [1])
    grid: list = field(default_factory=lambda: [[500, 5]])
    replications: int = 5
    methods: list = field(default_factory=lambda: list(ALL_METHODS))
    mcmc: dict = field(default_factory=dict)
    msle: dict = field(default_factory=dict)
    vb: dict = field(default_factory=dict)
    prediction: dict = field(default_factory=dict)
    validation_individuals: int = 25
    seed: int = 0
    output_dir: str = "results"
    desk_scale: bool = True
    workers: int = 1

    def to_json(self) -> dict:
        return asdict(self)


_KNOWN = set(ExperimentConfig.__dataclass_fields__)


def validate_config(source=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse a YAML/JSON file (or a dict), fill defaults and check invariants."""
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = dict(source)
    else:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {source}: {exc}") from None
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {source} is not valid YAML/JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping at the top level")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(raw) - _KNOWN
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    desk = bool(raw.get("desk_scale", True))
    base = DESK_DEFAULTS if desk else FULL_DEFAULTS
    cfg = ExperimentConfig(desk_scale=desk)
    cfg.grid = [list(g) for g in raw.get("grid", base["grid"])]
    cfg.replications = raw.get("replications", base["replications"])
    for block in ("mcmc", "msle", "vb", "prediction"):
        given = raw.get(block) or {}
        if not isinstance(given, dict):
            raise ConfigError(f"{block}: expected a mapping of settings")
        merged = dict(base[block])
        merged.update(given)
        setattr(cfg, block, merged)
    for key in ("scenarios", "validation_individuals", "seed", "output_dir"):
        if key in raw:
            setattr(cfg, key, raw[key])
    cfg.methods = [canonical_method(m) for m in (raw.get("methods") or ALL_METHODS)]
    cfg.workers = int(raw.get("workers") or os.environ.get(WORKERS_ENV, 1) or 1)

    if not isinstance(cfg.replications, int) or cfg.replications < 1:
        raise ConfigError(f"replications: must be an integer >= 1 (got {cfg.replications!r})")
    if not cfg.scenarios or any(s not in (1, 2, 3, 4) for s in cfg.scenarios):
        raise ConfigError(f"scenarios: must be a nonempty list drawn from 1-4 (got {cfg.scenarios!r})")
    if not cfg.grid or any(len(g) != 2 or int(g[0]) < 1 or int(g[1]) < 1 for g in cfg.grid):
        raise ConfigError("grid: must be a nonempty list of [N, T] pairs with N, T >= 1")
    if len(set(cfg.methods)) != len(cfg.methods):
        raise ConfigError("methods: duplicates are not allowed")
    if cfg.validation_individuals < 1:
        raise ConfigError("validation_individuals: must be >= 1")
    if cfg.workers < 1:
        raise ConfigError("workers: must be >= 1")
    try:
        McmcConfig(**{k: v for k, v in cfg.mcmc.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"mcmc: {exc}") from None
    return cfg


# -- seeds and cells --------------------------------------------------------


def cell_seed(base: int, *keys: int) -> int:
    """Integer seed derived from ``base`` and the cell coordinates."""
    ss = np.random.SeedSequence(int(base), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class Cell:
    scenario: int
    N: int
    T: int
    replication: int
    method: str

    @property
    def key(self) -> str:
        return f"s{self.scenario}_N{self.N}_T{self.T}_r{self.replication}_{self.method}"

    @property
    def group(self) -> str:
        return f"s{self.scenario}_N{self.N}_T{self.T}"


def enumerate_cells(cfg: ExperimentConfig) -> list:
    return [Cell(s, int(n), int(t), r, m) for s in cfg.scenarios for n, t in cfg.grid
            for r in range(cfg.replications) for m in cfg.methods]


def make_cell_data(cfg: ExperimentConfig, cell: Cell):
    seed = cell_seed(cfg.seed, cell.scenario, cell.N, cell.T, cell.replication)
    scen = ScenarioConfig(cell.scenario, cell.N, cell.T, seed=seed)
    pop = build_true_population(scen)
    return scen, pop, generate_dataset(scen, pop), generate_validation_set(scen, pop, cfg.validation_individuals)


def run_method(method: str, dataset, cfg: ExperimentConfig, seed: int):
    """Run one estimator; returns ``(output, point_estimates, seconds)``."""
    start = time.perf_counter()
    if method == "MCMC":
        out = run_mcmc(dataset, config=McmcConfig(**{**cfg.mcmc, "seed": seed}))
        elapsed = time.perf_counter() - start
        return out, out.point_estimates(), elapsed
    if method == "MSLE":
        out = fit_msle(dataset, MsleConfig(num_draws=cfg.msle["num_draws"], seed=seed))
        elapsed = time.perf_counter() - start
        betas, _ = conditional_betas(dataset, out, cfg.msle.get("conditional_draws", 10_000), seed=(seed, 1))
        return out, (out.alpha, out.zeta, out.omega, betas), elapsed
    vb_cfg = VbConfig(variant=method[3:], seed=seed, tol=cfg.vb["tol"], max_iter=cfg.vb["max_iter"],
                      num_draws=cfg.vb["num_draws"])
    out = run_vb(dataset, config=vb_cfg)
    elapsed = time.perf_counter() - start
    return out, vb_point_estimates(out.posterior), elapsed


def compute_metrics(pop, estimates, p_true, p_hat) -> dict:
    alpha, zeta, omega, betas = estimates
    return {
        "rmse_alpha": rmse(alpha, pop.alpha) if pop.alpha.size else None,
        "rmse_zeta": rmse(zeta, pop.sample_mean),
        "rmse_omega": rmse(unique_elements(omega), unique_elements(pop.sample_cov)),
        "rmse_beta": rmse(betas, pop.betas),
        "tvd_pct": 100.0 * float(np.mean(tvd(p_true, p_hat))),
    }


_TRUE_CACHE: dict = {}


def _true_distribution(cfg: ExperimentConfig, cell: Cell, scen, pop, validation):
    # identical for every method of a replication; cells run replication-major
    draws = cfg.prediction["true_draws"]
    key = (cfg.seed, cell.group, cell.replication, cfg.validation_individuals, draws)
    if key not in _TRUE_CACHE:
        if len(_TRUE_CACHE) >= 4:
            _TRUE_CACHE.clear()
        _TRUE_CACHE[key] = true_choice_distribution(validation, pop, draws, seed=(scen.seed, 11))
    return _TRUE_CACHE[key]


def run_cell(cfg: ExperimentConfig, cell: Cell) -> dict:
    """Estimate and evaluate one cell; failures are captured, not raised."""
    record = {"cell": cell.key, "scenario": cell.scenario, "N": cell.N, "T": cell.T,
              "replication": cell.replication, "method": cell.method}
    try:
        scen, pop, data, validation = make_cell_data(cfg, cell)
        seed = cell_seed(cfg.seed, cell.scenario, cell.N, cell.T, cell.replication,
                         ALL_METHODS.index(cell.method) + 1)
        output, estimates, elapsed = run_method(cell.method, data, cfg, seed)
        pred = cfg.prediction
        p_true = _true_distribution(cfg, cell, scen, pop, validation)
        p_hat = posterior_predictive_distribution(
            validation, output, PredictiveConfig(pred["outer_draws"], pred["inner_draws"], seed=seed))
        record.update(status="ok", time=elapsed, metrics=compute_metrics(pop, estimates, p_true, p_hat),
                      diagnostics=_diagnostics(output))
    except Exception as exc:  # isolate the failing cell
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                      traceback=traceback.format_exc())
    return record


def _diagnostics(output) -> dict:
    if hasattr(output, "iterations") and hasattr(output, "converged"):
        return {"iterations": output.iterations, "converged": output.converged, "flags": output.flags}
    if hasattr(output, "diagnostics"):
        d = dict(output.diagnostics)
        if hasattr(output, "success"):
            d.update(success=output.success, iterations=output.iterations)
        return d
    return {}


def _cell_job(args):
    return run_cell(*args)


@dataclass
class ExperimentOutcome:
    output_dir: Path
    records: list
    failures: list
    skipped: int

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0


def run_experiment(cfg: ExperimentConfig, progress=None) -> ExperimentOutcome:
    out = Path(cfg.output_dir)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    todo, skipped = [], 0
    for cell in enumerate_cells(cfg):
        path = cells_dir / f"{cell.key}.json"
        if path.exists():
            try:
                if json.loads(path.read_text()).get("status") == "ok":
                    skipped += 1
                    continue
            except json.JSONDecodeError:
                pass
        todo.append(cell)
    records = []

    def store(rec):
        (cells_dir / f"{rec['cell']}.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
        records.append(rec)
        if progress:
            progress(rec)

    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            for rec in pool.map(_cell_job, [(cfg, c) for c in todo]):
                store(rec)
    else:
        for cell in todo:
            store(run_cell(cfg, cell))
    failures = [r for r in records if r["status"] != "ok"]
    write_reports(out)
    return ExperimentOutcome(out, records, failures, skipped)


def load_cells(output_dir) -> list:
    cells_dir = Path(output_dir) / "cells"
    return [json.loads(p.read_text()) for p in sorted(cells_dir.glob("*.json"))]


def build_reports(records: list) -> dict:
    """One :class:`PredictiveReport` per ``(scenario, N, T)`` group."""
    order = {m: i for i, m in enumerate(ALL_METHODS)}
    ok = [r for r in records if r.get("status") == "ok"]
    ok.sort(key=lambda r: (r["scenario"], r["N"], r["T"], order.get(r["method"], 99), r["replication"]))
    reports = {}
    for r in ok:
        key = f"s{r['scenario']}_N{r['N']}_T{r['T']}"
        reports.setdefault(key, PredictiveReport()).add(r["method"], r["replication"], r["metrics"], r["time"])
    return reports


def write_reports(output_dir) -> dict:
    out = Path(output_dir)
    tables = out / "tables"
    tables.mkdir(parents=True, exist_ok=True)
    reports = build_reports(load_cells(out))
    for key, report in reports.items():
        report.write_csv(tables / f"results_{key}.csv")
        (tables / f"results_{key}.txt").write_text(report.to_text())
        _write_timings(report, tables / f"timings_{key}.csv")
        _write_replications(report, tables / f"replications_{key}.csv")
    return reports


def _write_timings(report: PredictiveReport, path) -> None:
    lines = ["method,replication,time_s"]
    lines += [f"{r['method']},{r['replication']},{r['time']:.3f}" for r in report.rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_replications(report: PredictiveReport, path) -> None:
    from .evaluation import METRICS
    lines = ["method,replication," + ",".join(METRICS)]
    for r in report.rows:
        vals = ["" if r.get(k) is None else repr(float(r[k])) for k in METRICS]
        lines.append(f"{r['method']},{r['replication']}," + ",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")
