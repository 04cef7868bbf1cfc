"""Maximum simulated likelihood for the mixed logit.

Parameters are stacked as ``phi = [alpha, zeta, vech(chol(Omega))]`` where
``vech`` lists the lower triangle row by row. The optimiser works on a copy of
``phi`` whose Cholesky diagonal is log-transformed, so ``Omega`` stays positive
definite throughout.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import optimize, sparse

from .data import ChoiceDataset
from .draws import individual_draws, pseudo_normal_draws
from .kernel import choice_probabilities, log_sum_exp

log = logging.getLogger(__name__)


class ParameterLayout:
    """Index bookkeeping for the stacked parameter vector."""

    def __init__(self, n_fixed: int, n_random: int):
        self.L, self.K = n_fixed, n_random
        self.rows, self.cols = np.tril_indices(n_random)
        self.size = n_fixed + n_random + self.rows.size
        self.chol_slice = slice(n_fixed + n_random, self.size)
        diag = np.flatnonzero(self.rows == self.cols)
        self.diag_positions = self.chol_slice.start + diag

    def split(self, phi):
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.size,):
            raise ValueError(f"parameter vector has shape {phi.shape}, expected ({self.size},)")
        chol = np.zeros((self.K, self.K))
        chol[self.rows, self.cols] = phi[self.chol_slice]
        return phi[: self.L], phi[self.L: self.L + self.K], chol

    def stack(self, alpha, zeta, chol):
        return np.concatenate([np.asarray(alpha, float), np.asarray(zeta, float),
                               np.asarray(chol, float)[self.rows, self.cols]])

    def to_unconstrained(self, phi):
        theta = np.array(phi, dtype=float)
        theta[self.diag_positions] = np.log(theta[self.diag_positions])
        return theta

    def from_unconstrained(self, theta):
        phi = np.array(theta, dtype=float)
        phi[self.diag_positions] = np.exp(phi[self.diag_positions])
        return phi

    def jacobian_diagonal(self, theta):
        """``d phi / d theta`` (the map is elementwise)."""
        jac = np.ones(self.size)
        jac[self.diag_positions] = np.exp(theta[self.diag_positions])
        return jac

    def names(self):
        return ([f"alpha_{i + 1}" for i in range(self.L)] + [f"zeta_{k + 1}" for k in range(self.K)]
                + [f"chol_{i + 1}_{j + 1}" for i, j in zip(self.rows, self.cols)])


class _Panel:
    """Occasion/individual bookkeeping shared by the likelihood routines."""

    def __init__(self, dataset: ChoiceDataset, chunk_individuals: int = 100):
        self.data = dataset
        self.N = dataset.num_individuals
        self.ind = dataset.individual
        occ = np.arange(dataset.num_occasions)
        self.y_xf = dataset.x_fixed[occ, dataset.choices]
        self.y_xr = dataset.x_random[occ, dataset.choices]
        self.chunks = []
        for lo in range(0, self.N, chunk_individuals):
            hi = min(lo + chunk_individuals, self.N)
            o_lo = int(np.searchsorted(self.ind, lo, side="left"))
            o_hi = int(np.searchsorted(self.ind, hi, side="left"))
            local = self.ind[o_lo:o_hi] - lo
            sum_matrix = sparse.csr_matrix(
                (np.ones(o_hi - o_lo), (local, np.arange(o_hi - o_lo))), shape=(hi - lo, o_hi - o_lo))
            self.chunks.append((lo, hi, o_lo, o_hi, local, sum_matrix))


def _occasion_logprob(panel, o_lo, o_hi, alpha, betas_occ):
    """Chosen-alternative log probability and probabilities; ``betas_occ`` is (O, D, K)."""
    data = panel.data
    xr = data.x_random[o_lo:o_hi]
    v = np.einsum("ojk,odk->odj", xr, betas_occ)
    if data.n_fixed:
        v += (data.x_fixed[o_lo:o_hi] @ alpha)[:, None, :]
    chosen = np.take_along_axis(v, data.choices[o_lo:o_hi, None, None], axis=2)[..., 0]
    return chosen - log_sum_exp(v), v


def simulated_loglik(dataset: ChoiceDataset, phi, draws: np.ndarray, gradient: bool = True,
                     panel: Optional[_Panel] = None):
    """Simulated log-likelihood ``sum_n ln((1/D) sum_d prod_t P(y_nt | beta_nd))``.

    ``draws`` are standard-normal deviates, either one ``(D, K)`` batch shared
    by all individuals or one batch per individual ``(N, D, K)``. Returns the
    value, and with ``gradient`` also its derivative with respect to ``phi``.
    """
    layout = ParameterLayout(dataset.n_fixed, dataset.n_random)
    alpha, zeta, chol = layout.split(phi)
    draws = np.asarray(draws, dtype=float)
    N = dataset.num_individuals
    if draws.ndim == 2:
        draws = np.broadcast_to(draws, (N,) + draws.shape)
    if draws.shape[0] != N or draws.shape[2] != layout.K:
        raise ValueError("draw array does not match the dataset")
    D = draws.shape[1]
    panel = panel or _Panel(dataset)
    total = 0.0
    g_alpha = np.zeros(layout.L)
    g_zeta = np.zeros(layout.K)
    g_chol = np.zeros((layout.K, layout.K))
    for lo, hi, o_lo, o_hi, local, summer in panel.chunks:
        xi = draws[lo:hi]
        betas = zeta + xi @ chol.T                      # (n, D, K)
        s = np.zeros((hi - lo, D))
        if o_hi > o_lo:
            logp, v = _occasion_logprob(panel, o_lo, o_hi, alpha, betas[local])
            s = np.asarray(summer @ logp)
        lse = log_sum_exp(s)
        if not np.all(np.isfinite(lse)):
            raise FloatingPointError("simulated likelihood is not finite")
        total += float(np.sum(lse) - (hi - lo) * np.log(D))
        if not gradient or o_hi == o_lo:
            continue
        w = np.exp(s - lse[:, None])                    # (n, D)
        w_occ = w[local]                                 # (O, D)
        p = choice_probabilities(v)                      # (O, D, J)
        # d/dv of sum_n ln mean_d exp(s_nd) = w (y - p)
        xr = dataset.x_random[o_lo:o_hi]
        g_beta_occ = w_occ[..., None] * (panel.y_xr[o_lo:o_hi, None, :]
                                         - np.einsum("odj,ojk->odk", p, xr))
        g_beta = np.asarray(summer @ g_beta_occ.reshape(o_hi - o_lo, -1)).reshape(hi - lo, D, -1)
        g_zeta += g_beta.sum(axis=(0, 1))
        g_chol += np.einsum("ndk,ndl->kl", g_beta, xi)
        if layout.L:
            xf = dataset.x_fixed[o_lo:o_hi]
            g_alpha += (w_occ.sum(axis=1) @ panel.y_xf[o_lo:o_hi]
                        - np.einsum("od,odj,ojl->l", w_occ, p, xf))
    if not gradient:
        return total
    return total, layout.stack(g_alpha, g_zeta, g_chol)


@dataclass
class MsleConfig:
    num_draws: int = 200
    seed: int = 0
    draw_kind: str = "mlhs"
    gtol: float = 1e-6  # on the per-individual average log-likelihood
    max_iter: Optional[int] = None
    chunk_individuals: int = 100
    conditional_draws: int = 10_000


@dataclass
class MslEstimate:
    phi: np.ndarray
    var_phi: np.ndarray
    loglik: float
    loglik_start: float
    n_fixed: int
    n_random: int
    success: bool = True
    message: str = ""
    iterations: int = 0
    elapsed: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def layout(self) -> ParameterLayout:
        return ParameterLayout(self.n_fixed, self.n_random)

    @property
    def alpha(self):
        return self.layout.split(self.phi)[0]

    @property
    def zeta(self):
        return self.layout.split(self.phi)[1]

    @property
    def chol(self):
        return self.layout.split(self.phi)[2]

    @property
    def omega(self):
        c = self.chol
        return c @ c.T

    def to_json(self) -> dict:
        return {"layout": self.layout.names(), "phi": self.phi.tolist(), "var_phi": self.var_phi.tolist(),
                "loglik": self.loglik, "loglik_start": self.loglik_start, "n_fixed": self.n_fixed,
                "n_random": self.n_random, "success": self.success, "message": self.message,
                "iterations": self.iterations, "elapsed": self.elapsed, "diagnostics": self.diagnostics}

    @classmethod
    def from_json(cls, blob: dict) -> "MslEstimate":
        return cls(np.array(blob["phi"]), np.array(blob["var_phi"]), blob["loglik"], blob["loglik_start"],
                   blob["n_fixed"], blob["n_random"], blob.get("success", True), blob.get("message", ""),
                   blob.get("iterations", 0), blob.get("elapsed", 0.0), blob.get("diagnostics", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


def start_point(n_fixed: int, n_random: int) -> np.ndarray:
    layout = ParameterLayout(n_fixed, n_random)
    return layout.stack(np.zeros(n_fixed), np.zeros(n_random), 0.1 * np.eye(n_random))


def fit_msle(dataset: ChoiceDataset, config: Optional[MsleConfig] = None, **overrides) -> MslEstimate:
    """BFGS maximisation of the simulated log-likelihood.

    The covariance of ``phi_hat`` is the BFGS inverse-Hessian approximation
    mapped back from the log-diagonal coordinates by the delta method.
    """
    config = replace(config or MsleConfig(), **overrides)
    start = time.perf_counter()
    layout = ParameterLayout(dataset.n_fixed, dataset.n_random)
    draws = individual_draws(dataset.num_individuals, config.num_draws, layout.K, config.seed,
                             kind=config.draw_kind)
    panel = _Panel(dataset, config.chunk_individuals)
    theta0 = layout.to_unconstrained(start_point(layout.L, layout.K))

    # the average over individuals keeps BFGS's first step on a sensible scale
    scale = 1.0 / max(dataset.num_individuals, 1)

    def fun(theta):
        # overshooting line-search trials can overflow; report them as infeasible
        with np.errstate(over="ignore", invalid="ignore"):
            phi = layout.from_unconstrained(theta)
            try:
                value, grad = simulated_loglik(dataset, phi, draws, panel=panel)
            except FloatingPointError:
                return np.inf, np.zeros_like(theta)
        return -scale * value, -scale * grad * layout.jacobian_diagonal(theta)

    f0 = fun(theta0)[0] / scale
    options = {"gtol": config.gtol}
    if config.max_iter is not None:
        options["maxiter"] = config.max_iter
    res = optimize.minimize(fun, theta0, jac=True, method="BFGS", options=options)
    theta = res.x
    if not res.success:
        log.warning("MSLE optimizer did not report convergence: %s", res.message)
    jac = layout.jacobian_diagonal(theta)
    var_phi = scale * jac[:, None] * res.hess_inv * jac[None, :]
    var_phi = 0.5 * (var_phi + var_phi.T)
    return MslEstimate(layout.from_unconstrained(theta), var_phi, -float(res.fun) / scale, -float(f0),
                       layout.L, layout.K, bool(res.success), str(res.message), int(res.nit),
                       time.perf_counter() - start,
                       {"grad_norm": float(np.max(np.abs(res.jac))), "evaluations": int(res.nfev)})


def conditional_betas(dataset: ChoiceDataset, estimate: MslEstimate, num_draws: int = 10_000,
                      seed=0, chunk_draws: int = 1000):
    """Posterior-mean tastes ``E[beta_n | y_n]`` under the fitted population.

    Uses one batch of pseudo-random draws shared by all individuals. Returns
    ``(beta_hat, fallback)`` where ``fallback`` flags individuals whose
    weights all vanished; those get ``zeta_hat``.
    """
    alpha, zeta, chol = estimate.alpha, estimate.zeta, estimate.chol
    xi = pseudo_normal_draws(num_draws, estimate.n_random, seed).draws
    betas = zeta + xi @ chol.T                           # (D, K)
    N = dataset.num_individuals
    ind = dataset.individual
    s = np.zeros((N, num_draws))
    fixed = dataset.x_fixed @ alpha if dataset.n_fixed else 0.0
    occ = np.arange(dataset.num_occasions)
    if dataset.num_occasions:
        summer = sparse.csr_matrix((np.ones(occ.size), (ind, occ)), shape=(N, occ.size))
        for lo in range(0, num_draws, chunk_draws):
            hi = min(lo + chunk_draws, num_draws)
            v = np.einsum("ojk,dk->odj", dataset.x_random, betas[lo:hi])
            if dataset.n_fixed:
                v += fixed[:, None, :]
            logp = v[occ, :, dataset.choices] - log_sum_exp(v)
            s[:, lo:hi] = np.asarray(summer @ logp)
    smax = np.max(s, axis=1)
    fallback = ~np.isfinite(smax)
    w = np.exp(s - np.where(fallback, 0.0, smax)[:, None])
    w[fallback] = 0.0
    totals = w.sum(axis=1)
    out = np.where(fallback[:, None], zeta, (w @ betas) / np.where(totals > 0, totals, 1.0)[:, None])
    if fallback.any():
        log.warning("%d individuals had vanishing simulation weights; using zeta_hat", int(fallback.sum()))
    return out, fallback
