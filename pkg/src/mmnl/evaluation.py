"""Accuracy metrics: parameter RMSE and predictive total variation distance.

Predictive choice distributions are mixed-logit probabilities on a hold-out
sample. The true distribution integrates over ``beta ~ N(zeta, Omega)`` at the
population parameters; the estimated one additionally averages over draws of
the population parameters from each method's posterior (or, for MSLE, from
the asymptotic normal of the estimate).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .data import ChoiceDataset, TruePopulation
from .draws import make_rng
from .kernel import choice_probabilities

METRICS = ("rmse_alpha", "rmse_zeta", "rmse_omega", "rmse_beta", "tvd_pct")
METRIC_LABELS = {"rmse_alpha": "alpha", "rmse_zeta": "zeta", "rmse_omega": "Omega_U",
                 "rmse_beta": "beta", "tvd_pct": "TVD (%)", "time": "Time (s)"}


def rmse(estimate, truth) -> float:
    est = np.ravel(np.asarray(estimate, dtype=float))
    tru = np.ravel(np.asarray(truth, dtype=float))
    if est.shape != tru.shape:
        raise ValueError(f"estimate has {est.size} entries, truth has {tru.size}")
    if est.size == 0:
        raise ValueError("RMSE needs at least one parameter")
    diff = est - tru
    return float(math.sqrt(diff @ diff / diff.size))


def unique_elements(matrix) -> np.ndarray:
    """Lower triangle including the diagonal, row by row."""
    m = np.asarray(matrix, dtype=float)
    return m[np.tril_indices(m.shape[0])]


def tvd(p_true, p_hat, atol: float = 1e-6):
    """Total variation distance ``sum_j |p - q| / 2`` per row."""
    p = np.asarray(p_true, dtype=float)
    q = np.asarray(p_hat, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions are over different alternative sets")
    for x in (p, q):
        if np.any(x < -atol) or np.any(np.abs(x.sum(axis=-1) - 1.0) > atol):
            raise ValueError("inputs must be probability vectors")
    out = 0.5 * np.abs(p - q).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def _mixed_probabilities(x_fixed, x_random, alpha, zeta, chol, xi):
    """Average logit probabilities over ``beta = zeta + chol xi``; shape ``(O, J)``."""
    betas = zeta + xi @ chol.T
    v = np.einsum("ojk,mk->omj", x_random, betas)
    if x_fixed.shape[-1]:
        v += (x_fixed @ alpha)[:, None, :]
    return choice_probabilities(v).mean(axis=1)


def true_choice_distribution(validation: ChoiceDataset, pop: TruePopulation,
                             num_draws: int = 1_000_000, seed=0, chunk: int = 50_000) -> np.ndarray:
    """Predictive choice probabilities at the population parameters."""
    K = validation.n_random
    chol = _cholesky_psd(pop.omega)
    rng = make_rng(seed)
    total = np.zeros((validation.num_occasions, validation.num_alternatives))
    done = 0
    while done < num_draws:
        m = min(chunk, num_draws - done)
        xi = rng.standard_normal((m, K))
        total += m * _mixed_probabilities(validation.x_fixed, validation.x_random,
                                          pop.alpha, pop.zeta, chol, xi)
        done += m
    return total / num_draws


def _cholesky_psd(m):
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        evals, evecs = np.linalg.eigh(m)
        return evecs * np.sqrt(np.clip(evals, 0.0, None))


@dataclass
class PredictiveConfig:
    """Draw counts for the estimated predictive distribution.

    Full-scale settings are 20,000 retained MCMC draws, 500 outer draws for VB
    and MSLE and 10,000 inner taste draws; the defaults here are desk scale.
    """

    outer_draws: int = 200
    inner_draws: int = 2000
    seed: int = 0
    max_attempts: int = 100


class NonPositiveDefiniteDraw(RuntimeError):
    pass


def _vb_outer(post, n, rng):
    L, K = post.mu_alpha.size, post.mu_zeta.size
    alphas = (post.mu_alpha + rng.standard_normal((n, L)) @ _cholesky_psd(post.cov_alpha).T
              if L else np.zeros((n, 0)))
    zetas = post.mu_zeta + rng.standard_normal((n, K)) @ _cholesky_psd(post.cov_zeta).T
    omegas = stats.invwishart.rvs(df=post.w, scale=post.theta, size=n, random_state=rng)
    omegas = np.asarray(omegas).reshape(n, K, K)
    return alphas, zetas, np.linalg.cholesky(omegas)


def _msle_outer(est, n, rng, max_attempts):
    layout = est.layout
    root = _cholesky_psd(est.var_phi)
    alphas, zetas, chols = np.zeros((n, layout.L)), np.zeros((n, layout.K)), np.zeros((n, layout.K, layout.K))
    for s in range(n):
        for _ in range(max_attempts):
            phi = est.phi + root @ rng.standard_normal(layout.size)
            a, z, c = layout.split(phi)
            try:
                # the sampled factor may have negative diagonal entries; only Omega matters
                chol = np.linalg.cholesky(c @ c.T)
            except np.linalg.LinAlgError:
                continue
            if np.all(np.isfinite(chol)):
                break
        else:
            raise NonPositiveDefiniteDraw(f"no positive-definite Omega draw in {max_attempts} attempts")
        alphas[s], zetas[s], chols[s] = a, z, chol
    return alphas, zetas, chols


def _mcmc_outer(draws, n):
    alpha, zeta, omega = draws.pooled("alpha"), draws.pooled("zeta"), draws.pooled("omega")
    total = zeta.shape[0]
    idx = np.arange(total) if n >= total else np.linspace(0, total - 1, n).round().astype(int)
    return alpha[idx], zeta[idx], np.linalg.cholesky(omega[idx])


def posterior_predictive_distribution(validation: ChoiceDataset, method_output,
                                      config: Optional[PredictiveConfig] = None) -> np.ndarray:
    """Estimated predictive choice probabilities for MCMC, VB or MSLE output.

    Outer draws of ``(alpha, zeta, Omega)`` come from the method's posterior.
    Each outer draw mixes ``beta`` over its own ``inner_draws`` standard-normal
    points; the inner stream depends only on the seed, so methods evaluated
    with the same seed share it.
    """
    from .mcmc import McmcDraws
    from .msle import MslEstimate
    from .vb import VariationalPosterior, VbResult

    config = config or PredictiveConfig()
    rng = make_rng(config.seed, 0)
    if isinstance(method_output, VbResult):
        method_output = method_output.posterior
    if isinstance(method_output, VariationalPosterior):
        alphas, zetas, chols = _vb_outer(method_output, config.outer_draws, rng)
    elif isinstance(method_output, MslEstimate):
        alphas, zetas, chols = _msle_outer(method_output, config.outer_draws, rng, config.max_attempts)
    elif isinstance(method_output, McmcDraws):
        alphas, zetas, chols = _mcmc_outer(method_output, config.outer_draws)
    else:
        raise TypeError(f"unsupported method output {type(method_output).__name__}")
    inner = make_rng(config.seed, 1)
    total = np.zeros((validation.num_occasions, validation.num_alternatives))
    for a, z, c in zip(alphas, zetas, chols):
        xi = inner.standard_normal((config.inner_draws, validation.n_random))
        total += _mixed_probabilities(validation.x_fixed, validation.x_random, a, z, c, xi)
    return total / len(zetas)


# -- replication summaries and reports ------------------------------------


def summarize_replications(values: Sequence[float], allow_single: bool = False):
    """Mean and standard error (sample s.d. / sqrt(R)) of one metric."""
    x = np.asarray([v for v in values], dtype=float)
    if x.size < 2:
        if allow_single and x.size == 1:
            return float(x[0]), float("nan")
        raise ValueError("a standard error needs at least two replications")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


@dataclass
class PredictiveReport:
    """Per-replication metrics for several methods, summarised like the results tables."""

    rows: list = field(default_factory=list)

    def add(self, method: str, replication: int, metrics: dict, time: float, **cell) -> None:
        self.rows.append({"method": method, "replication": replication, "time": time, **cell, **metrics})

    def methods(self) -> list:
        seen = []
        for r in self.rows:
            if r["method"] not in seen:
                seen.append(r["method"])
        return seen

    def summary(self, include_time: bool = False) -> dict:
        keys = (("time",) if include_time else ()) + METRICS
        out = {}
        for m in self.methods():
            rows = [r for r in self.rows if r["method"] == m]
            out[m] = {}
            for k in keys:
                vals = [r[k] for r in rows if r.get(k) is not None and not _isnan(r[k])]
                out[m][k] = summarize_replications(vals, allow_single=True) if vals else (float("nan"),) * 2
            out[m]["replications"] = len(rows)
        return out

    def write_csv(self, path, include_time: bool = False) -> None:
        keys = (("time",) if include_time else ()) + METRICS
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["method", "replications"] + [f"{k}_{s}" for k in keys for s in ("mean", "se")])
            for m, stats_ in self.summary(include_time).items():
                writer.writerow([m, stats_["replications"]]
                                + [_fmt(v) for k in keys for v in stats_[k]])

    def to_text(self, include_time: bool = False) -> str:
        keys = (("time",) if include_time else ()) + METRICS
        head = ["Method"] + [f"{METRIC_LABELS[k]} {s}" for k in keys for s in ("mean", "s.e.")]
        body = [[m] + [_fmt(v) for k in keys for v in st[k]] for m, st in self.summary(include_time).items()]
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in [head] + body]
        return "\n".join(lines) + "\n"


def _isnan(v) -> bool:
    return isinstance(v, float) and math.isnan(v)


def _fmt(v) -> str:
    return "nan" if _isnan(v) else f"{v:.4f}"
