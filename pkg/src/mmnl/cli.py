"""Command line interface: ``mmnl {generate,estimate,evaluate,reproduce,report}``.

Exit codes: 0 success, 1 configuration or input error, 2 some experiment
cells failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (
    ScenarioConfig,
    SchemaError,
    build_true_population,
    generate_dataset,
    generate_validation_set,
    load_dataset,
    save_dataset,
)
from .evaluation import PredictiveConfig, posterior_predictive_distribution, true_choice_distribution
from .experiment import (
    ALL_METHODS,
    ConfigError,
    ExperimentConfig,
    canonical_method,
    compute_metrics,
    run_experiment,
    run_method,
    validate_config,
    write_reports,
)
from .mcmc import McmcDraws
from .msle import MslEstimate
from .vb import VbResult, posterior_from_json, posterior_to_json

log = logging.getLogger("mmnl")

EXIT_OK, EXIT_CONFIG, EXIT_CELLS = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- persistence of estimator outputs --------------------------------------


def save_method_output(method: str, output, estimates, path) -> None:
    path = Path(path)
    alpha, zeta, omega, betas = estimates
    blob = {"method": method, "alpha": np.asarray(alpha).tolist(), "zeta": np.asarray(zeta).tolist(),
            "omega": np.asarray(omega).tolist(), "beta": np.asarray(betas).tolist()}
    if isinstance(output, VbResult):
        blob["posterior"] = posterior_to_json(output.posterior)
        blob["diagnostics"] = {"iterations": output.iterations, "converged": output.converged,
                               "delta": output.delta, "flags": output.flags}
    elif isinstance(output, MslEstimate):
        blob["estimate"] = output.to_json()
    elif isinstance(output, McmcDraws):
        draws_path = path.with_suffix(".npz")
        np.savez_compressed(draws_path, alpha=output.alpha, zeta=output.zeta, omega=output.omega,
                            beta_mean=output.beta_mean)
        blob["draws"] = draws_path.name
        blob["diagnostics"] = {"burn_in": output.burn_in, "thin": output.thin, "chains": output.chains,
                               **output.diagnostics}
    path.write_text(json.dumps(blob, indent=2) + "\n")


def load_method_output(path):
    path = Path(path)
    blob = json.loads(path.read_text())
    estimates = tuple(np.asarray(blob[k], dtype=float) for k in ("alpha", "zeta", "omega", "beta"))
    if "posterior" in blob:
        output = posterior_from_json(blob["posterior"])
    elif "estimate" in blob:
        output = MslEstimate.from_json(blob["estimate"])
    elif "draws" in blob:
        arr = np.load(path.parent / blob["draws"])
        d = blob.get("diagnostics", {})
        output = McmcDraws(arr["alpha"], arr["zeta"], arr["omega"], arr["beta_mean"], None,
                           d.get("burn_in", 0), d.get("thin", 1), d.get("chains", arr["zeta"].shape[0]), 0.0)
    else:
        raise SchemaError(f"{path} does not hold a recognised estimator output")
    return blob["method"], output, estimates


# -- subcommands ----------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = ScenarioConfig(args.scenario, args.individuals, args.occasions, seed=args.seed)
    pop = build_true_population(cfg)
    save_dataset(generate_dataset(cfg, pop), args.out)
    print(f"wrote {args.out}")
    if args.validation:
        val = generate_validation_set(cfg, pop, args.validation_individuals)
        save_dataset(val, args.validation)
        print(f"wrote {args.validation}")
    return EXIT_OK


def _experiment_settings(args) -> ExperimentConfig:
    overrides = {}
    if args.mcmc_iterations is not None:
        overrides["mcmc"] = {"iterations": args.mcmc_iterations,
                             "burn_in": args.mcmc_burn_in if args.mcmc_burn_in is not None
                             else args.mcmc_iterations // 2}
    if args.msle_draws is not None:
        overrides["msle"] = {"num_draws": args.msle_draws}
    return validate_config(overrides)


def cmd_estimate(args) -> int:
    data = load_dataset(args.data)
    method = canonical_method(args.method)
    cfg = _experiment_settings(args)
    output, estimates, elapsed = run_method(method, data, cfg, args.seed)
    save_method_output(method, output, estimates, args.out)
    print(f"{method}: estimation took {elapsed:.1f}s; wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    data = load_dataset(args.data)
    if data.truth is None:
        raise SchemaError(f"{args.data} carries no truth block; metrics need the true population")
    validation = load_dataset(args.validation)
    method, output, estimates = load_method_output(args.estimate)
    pop = data.truth
    p_true = true_choice_distribution(validation, pop, args.true_draws, seed=(args.seed, 11))
    p_hat = posterior_predictive_distribution(
        validation, output, PredictiveConfig(args.outer_draws, args.inner_draws, seed=args.seed))
    metrics = compute_metrics(pop, estimates, p_true, p_hat)
    text = json.dumps({"method": method, **metrics}, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_reproduce(args) -> int:
    overrides = {"output_dir": args.output_dir, "workers": args.workers, "replications": args.replications,
                 "methods": args.methods, "seed": args.seed}
    cfg = validate_config(args.config, overrides)

    def progress(rec):
        status = "ok" if rec["status"] == "ok" else f"FAILED ({rec['error']})"
        print(f"{rec['cell']}: {status}", flush=True)

    outcome = run_experiment(cfg, progress)
    print(f"{len(outcome.records)} cells run, {outcome.skipped} resumed from {cfg.output_dir}")
    for path in sorted((Path(cfg.output_dir) / "tables").glob("results_*.txt")):
        print(f"\n{path.stem}\n{path.read_text()}")
    if outcome.failures:
        print(f"{len(outcome.failures)} cell(s) failed", file=sys.stderr)
    return outcome.exit_code


def cmd_report(args) -> int:
    if not (Path(args.output_dir) / "cells").is_dir():
        raise ConfigError(f"{args.output_dir} holds no experiment cells")
    reports = write_reports(args.output_dir)
    for key, rep in reports.items():
        print(f"{key}\n{rep.to_text(include_time=args.with_time)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmnl", description="Mixed logit estimation by VB, MCMC and MSLE.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate a training (and validation) dataset")
    g.add_argument("--scenario", type=int, choices=(1, 2, 3, 4), default=1)
    g.add_argument("--individuals", "-N", type=int, default=500)
    g.add_argument("--occasions", "-T", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--validation")
    g.add_argument("--validation-individuals", type=int, default=25)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("estimate", help="fit one method to a stored dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--method", required=True, help=f"one of {', '.join(ALL_METHODS)}")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--mcmc-iterations", type=int)
    e.add_argument("--mcmc-burn-in", type=int)
    e.add_argument("--msle-draws", type=int)
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("evaluate", help="RMSE and TVD of a stored estimate")
    v.add_argument("--data", required=True, help="training dataset with its truth block")
    v.add_argument("--validation", required=True)
    v.add_argument("--estimate", required=True)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--true-draws", type=int, default=1_000_000)
    v.add_argument("--outer-draws", type=int, default=200)
    v.add_argument("--inner-draws", type=int, default=2000)
    v.add_argument("--out")
    v.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("reproduce", help="run the simulation study grid")
    r.add_argument("--config")
    r.add_argument("--output-dir")
    r.add_argument("--workers", type=int)
    r.add_argument("--replications", type=int)
    r.add_argument("--methods", nargs="+")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_reproduce)

    t = sub.add_parser("report", help="rebuild tables from stored cells")
    t.add_argument("--output-dir", required=True)
    t.add_argument("--with-time", action="store_true")
    t.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, FileNotFoundError) as exc:
        print(f"mmnl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
