"""Blocked Gibbs sampler with random-walk Metropolis steps for the mixed logit.

One sweep draws ``zeta``, ``Omega`` and the half-t weights ``a`` from their
conditionals, then moves every ``beta_n`` by a vectorised random-walk
Metropolis step and finally ``alpha`` by a joint random-walk step. The
``beta`` step size adapts towards a 0.3 acceptance rate on every sweep.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats

from .data import ChoiceDataset
from .draws import make_rng
from .kernel import log_sum_exp
from .vb import Hyperparameters

log = logging.getLogger(__name__)


class McmcNumericalError(RuntimeError):
    pass


@dataclass
class McmcConfig:
    chains: int = 2
    iterations: int = 20_000
    burn_in: int = 10_000
    thin: int = 5
    seed: int = 0
    rho_alpha: float = 0.01
    rho_beta: float = 0.1
    target_acceptance: float = 0.3
    rho_step: float = 0.001
    rho_floor: float = 1e-4
    # "identity": alpha + sqrt(rho) eta; "prior": alpha + sqrt(rho) chol(xi0) eta
    alpha_proposal: str = "identity"
    flat_zeta_prior: bool = False
    keep_beta_draws: bool = False
    output_dir: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("at least one chain is required")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn-in must be shorter than the chain")
        if self.thin < 1:
            raise ValueError("thinning interval must be >= 1")
        if self.alpha_proposal not in ("identity", "prior"):
            raise ValueError("alpha_proposal must be 'identity' or 'prior'")

    @property
    def retained_per_chain(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


@dataclass
class McmcState:
    alpha: np.ndarray
    beta: np.ndarray
    zeta: np.ndarray
    omega: np.ndarray
    a: np.ndarray
    rho_alpha: float = 0.01
    rho_beta: float = 0.1
    accepted_beta: float = 0.0
    accepted_alpha: int = 0

    @classmethod
    def initial(cls, n_fixed: int, n_random: int, num_individuals: int, rng, rho_alpha=0.01,
                rho_beta=0.1):
        """``alpha = 0``, ``zeta = 0``, ``Omega = I``, ``a = 1`` and ``beta_n`` drawn from
        ``N(zeta, Omega)``; starting every ``beta_n`` at zero would make the first
        ``Omega`` draws collapse and the chain crawl out of that region."""
        beta = rng.standard_normal((num_individuals, n_random))
        return cls(np.zeros(n_fixed), beta, np.zeros(n_random), np.eye(n_random),
                   np.ones(n_random), rho_alpha, rho_beta)


# -- conditionals ----------------------------------------------------------


def gibbs_zeta(state: McmcState, hyper: Hyperparameters, rng, flat_prior: bool = False) -> np.ndarray:
    """Draw ``zeta | beta, Omega``.

    With ``flat_prior`` the conditional is ``N(mean(beta), Omega/N)``; otherwise
    the normal prior ``N(mu0, sigma0)`` is folded in.
    """
    N, K = state.beta.shape
    if N < 1:
        raise ValueError("zeta conditional needs at least one individual")
    bbar = state.beta.mean(axis=0)
    if flat_prior:
        mean, cov = bbar, state.omega / N
    else:
        s0_inv = np.linalg.inv(hyper.sigma0)
        prec = s0_inv + N * np.linalg.inv(state.omega)
        cov = np.linalg.inv(prec)
        cov = 0.5 * (cov + cov.T)
        mean = cov @ (s0_inv @ hyper.mu0 + N * np.linalg.solve(state.omega, bbar))
    return mean + _sqrt_psd(cov) @ rng.standard_normal(K)


def _sqrt_psd(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        evals, evecs = np.linalg.eigh(cov)
        return evecs * np.sqrt(np.clip(evals, 0.0, None))


def sample_inverse_wishart(dof: float, scale: np.ndarray, rng) -> np.ndarray:
    K = scale.shape[0]
    if dof <= K + 1:
        raise ValueError(f"inverse Wishart degrees of freedom {dof} must exceed K + 1 = {K + 1}")
    try:
        np.linalg.cholesky(scale)
    except np.linalg.LinAlgError as exc:
        raise ValueError("inverse Wishart scale must be positive definite") from exc
    draw = stats.invwishart.rvs(df=dof, scale=scale, random_state=rng)
    draw = np.atleast_2d(draw).reshape(K, K)
    return 0.5 * (draw + draw.T)


def gibbs_omega(state: McmcState, hyper: Hyperparameters, rng) -> np.ndarray:
    """Draw ``Omega ~ IW(nu + N + K - 1, 2 nu diag(a) + sum_n (beta_n - zeta)(beta_n - zeta)')``."""
    N, K = state.beta.shape
    dev = state.beta - state.zeta
    scale = 2.0 * hyper.nu * np.diag(state.a) + dev.T @ dev
    return sample_inverse_wishart(hyper.nu + N + K - 1, 0.5 * (scale + scale.T), rng)


def gibbs_a(state: McmcState, hyper: Hyperparameters, rng) -> np.ndarray:
    """Draw ``a_k ~ Gamma((nu + K)/2, A_k^-2 + nu (Omega^-1)_kk)`` (shape, rate)."""
    K = state.omega.shape[0]
    try:
        omega_inv = np.linalg.inv(state.omega)
    except np.linalg.LinAlgError as exc:
        raise ValueError("Omega is singular") from exc
    rate = hyper.gamma_rate + hyper.nu * np.diag(omega_inv)
    return rng.gamma((hyper.nu + K) / 2.0, 1.0 / rate)


def adapt_step(rho_beta: float, acceptance: float, target: float = 0.3, step: float = 0.001,
               floor: float = 1e-4) -> float:
    if acceptance < target:
        rho_beta -= step
    elif acceptance > target:
        rho_beta += step
    return max(rho_beta, floor)


class _Likelihood:
    """Cached per-individual log-likelihood for one dataset."""

    def __init__(self, dataset: ChoiceDataset):
        self.xf, self.xr = dataset.x_fixed, dataset.x_random
        self.ind = dataset.individual
        self.N = dataset.num_individuals
        occ = np.arange(dataset.num_occasions)
        self.choices = dataset.choices
        self.occ = occ
        self.has_fixed = dataset.n_fixed > 0

    def fixed_part(self, alpha):
        if not self.has_fixed or self.occ.size == 0:
            return 0.0
        return self.xf @ alpha

    def per_individual(self, fixed_util, beta) -> np.ndarray:
        if self.occ.size == 0:
            return np.zeros(self.N)
        v = np.einsum("ojk,ok->oj", self.xr, beta[self.ind]) + fixed_util
        ll = v[self.occ, self.choices] - log_sum_exp(v)
        return np.bincount(self.ind, weights=ll, minlength=self.N)


def _prior_quad(beta, zeta, omega_inv):
    dev = beta - zeta
    return -0.5 * np.einsum("nk,kl,nl->n", dev, omega_inv, dev)


def rw_update_beta(state: McmcState, lik: _Likelihood, fixed_util, ll_current, rng, eta=None):
    """Metropolis step for every ``beta_n`` at once.

    Returns the new per-individual log-likelihood and the mean acceptance.
    ``eta`` may be supplied to fix the proposal innovations.
    """
    N, K = state.beta.shape
    if eta is None:
        eta = rng.standard_normal((N, K))
    chol = np.linalg.cholesky(state.omega)
    proposal = state.beta + np.sqrt(state.rho_beta) * eta @ chol.T
    omega_inv = np.linalg.inv(state.omega)
    ll_prop = lik.per_individual(fixed_util, proposal)
    log_r = (ll_prop + _prior_quad(proposal, state.zeta, omega_inv)
             - ll_current - _prior_quad(state.beta, state.zeta, omega_inv))
    accept = np.log(rng.uniform(size=N)) <= np.minimum(log_r, 0.0)
    state.beta = np.where(accept[:, None], proposal, state.beta)
    ll_new = np.where(accept, ll_prop, ll_current)
    rate = float(accept.mean()) if N else 0.0
    state.accepted_beta = rate
    return ll_new, rate


def rw_update_alpha(state: McmcState, lik: _Likelihood, hyper: Hyperparameters, ll_current, rng,
                    proposal_chol=None, eta=None):
    """Joint Metropolis step for ``alpha``; returns the new per-individual log-likelihood
    and whether the proposal was accepted."""
    L = state.alpha.size
    if L == 0:
        return ll_current, False
    if eta is None:
        eta = rng.standard_normal(L)
    step = eta if proposal_chol is None else proposal_chol @ eta
    proposal = state.alpha + np.sqrt(state.rho_alpha) * step
    xi_inv = np.linalg.inv(hyper.xi0)

    def log_prior(a):
        d = a - hyper.lambda0
        return -0.5 * d @ xi_inv @ d

    ll_prop = lik.per_individual(lik.fixed_part(proposal), state.beta)
    log_r = ll_prop.sum() + log_prior(proposal) - ll_current.sum() - log_prior(state.alpha)
    accepted = bool(np.log(rng.uniform()) <= min(log_r, 0.0))
    if accepted:
        state.alpha = proposal
        state.accepted_alpha += 1
        return ll_prop, True
    return ll_current, False


@dataclass
class ChainResult:
    chain: int
    alpha: np.ndarray
    zeta: np.ndarray
    omega: np.ndarray
    beta_mean: np.ndarray
    beta: Optional[np.ndarray]
    rho_beta: np.ndarray
    acceptance_beta: np.ndarray
    acceptance_alpha: float
    elapsed: float


def _layout(L, K):
    names = [f"alpha_{i + 1}" for i in range(L)] + [f"zeta_{k + 1}" for k in range(K)]
    names += [f"omega_{i + 1}_{j + 1}" for i in range(K) for j in range(i + 1)]
    return names


def run_chain(dataset: ChoiceDataset, hyper: Hyperparameters, config: McmcConfig, chain: int) -> ChainResult:
    rng = make_rng(config.seed, chain)
    start = time.perf_counter()
    L, K, N = dataset.n_fixed, dataset.n_random, dataset.num_individuals
    state = McmcState.initial(L, K, N, rng, config.rho_alpha, config.rho_beta)
    lik = _Likelihood(dataset)
    fixed_util = lik.fixed_part(state.alpha)
    ll = lik.per_individual(fixed_util, state.beta)
    prop_chol = np.linalg.cholesky(hyper.xi0) if (config.alpha_proposal == "prior" and L) else None

    S = config.retained_per_chain
    out_alpha, out_zeta = np.empty((S, L)), np.empty((S, K))
    out_omega = np.empty((S, K, K))
    beta_sum = np.zeros((N, K))
    out_beta = np.empty((S, N, K)) if config.keep_beta_draws else None
    rho_trace = np.empty(config.iterations)
    acc_trace = np.empty(config.iterations)
    alpha_acc = 0

    writer = fh = None
    if config.output_dir:
        os.makedirs(config.output_dir, exist_ok=True)
        fh = open(os.path.join(config.output_dir, f"chain_{chain}.csv"), "w", newline="")
        fh.write(f"# chain={chain} seed={config.seed} iterations={config.iterations} "
                 f"burn_in={config.burn_in} thin={config.thin} L={L} K={K} N={N}\n")
        writer = csv.writer(fh)
        writer.writerow(["draw"] + _layout(L, K))
    tril = np.tril_indices(K)
    kept = 0
    try:
        for it in range(config.iterations):
            try:
                state.zeta = gibbs_zeta(state, hyper, rng, config.flat_zeta_prior)
                state.omega = gibbs_omega(state, hyper, rng)
                state.a = gibbs_a(state, hyper, rng)
                ll, rate = rw_update_beta(state, lik, fixed_util, ll, rng)
                if L:
                    ll, acc = rw_update_alpha(state, lik, hyper, ll, rng, prop_chol)
                    alpha_acc += acc
                    fixed_util = lik.fixed_part(state.alpha)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise McmcNumericalError(f"chain {chain}, sweep {it + 1}: {exc}") from exc
            acc_trace[it] = rate
            state.rho_beta = adapt_step(state.rho_beta, rate, config.target_acceptance,
                                        config.rho_step, config.rho_floor)
            rho_trace[it] = state.rho_beta
            if it >= config.burn_in and (it - config.burn_in + 1) % config.thin == 0 and kept < S:
                out_alpha[kept], out_zeta[kept], out_omega[kept] = state.alpha, state.zeta, state.omega
                beta_sum += state.beta
                if out_beta is not None:
                    out_beta[kept] = state.beta
                if writer is not None:
                    writer.writerow([kept] + [repr(float(v)) for v in
                                              np.concatenate([state.alpha, state.zeta, state.omega[tril]])])
                kept += 1
    finally:
        if fh is not None:
            fh.close()
    return ChainResult(chain, out_alpha, out_zeta, out_omega, beta_sum / max(kept, 1), out_beta,
                       rho_trace, acc_trace, alpha_acc / config.iterations,
                       time.perf_counter() - start)


@dataclass
class McmcDraws:
    alpha: np.ndarray      # (chains, S, L)
    zeta: np.ndarray       # (chains, S, K)
    omega: np.ndarray      # (chains, S, K, K)
    beta_mean: np.ndarray  # (chains, N, K)
    beta: Optional[np.ndarray]
    burn_in: int
    thin: int
    chains: int
    elapsed: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def retained(self) -> int:
        return self.chains * self.zeta.shape[1]

    def point_estimates(self):
        """Posterior means ``(alpha, zeta, Omega, beta_1:N)`` pooled over chains."""
        return (self.alpha.mean(axis=(0, 1)), self.zeta.mean(axis=(0, 1)),
                self.omega.mean(axis=(0, 1)), self.beta_mean.mean(axis=0))

    def pooled(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape((arr.shape[0] * arr.shape[1],) + arr.shape[2:])


def _chain_job(args):
    return run_chain(*args)


def run_mcmc(dataset: ChoiceDataset, hyper: Optional[Hyperparameters] = None,
             config: Optional[McmcConfig] = None, **overrides) -> McmcDraws:
    config = replace(config or McmcConfig(), **overrides)
    hyper = hyper or Hyperparameters.default(dataset.n_fixed, dataset.n_random)
    start = time.perf_counter()
    jobs = [(dataset, hyper, config, c) for c in range(config.chains)]
    if config.workers > 1 and config.chains > 1:
        with ProcessPoolExecutor(min(config.workers, config.chains)) as pool:
            chains = list(pool.map(_chain_job, jobs))
    else:
        chains = [_chain_job(j) for j in jobs]
    beta = np.stack([c.beta for c in chains]) if config.keep_beta_draws else None
    diagnostics = {
        "acceptance_beta": [float(c.acceptance_beta[config.burn_in:].mean()) for c in chains],
        "acceptance_alpha": [c.acceptance_alpha for c in chains],
        "final_rho_beta": [float(c.rho_beta[-1]) for c in chains],
    }
    return McmcDraws(np.stack([c.alpha for c in chains]), np.stack([c.zeta for c in chains]),
                     np.stack([c.omega for c in chains]), np.stack([c.beta_mean for c in chains]),
                     beta, config.burn_in, config.thin, config.chains,
                     time.perf_counter() - start, diagnostics)


def batch_means_se(x: np.ndarray, num_batches: int = 20) -> np.ndarray:
    """Monte Carlo standard error of the mean of a correlated series (axis 0)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0] // num_batches * num_batches
    if n < num_batches:
        raise ValueError("series too short for batch means")
    batches = x[:n].reshape((num_batches, n // num_batches) + x.shape[1:]).mean(axis=1)
    return batches.std(axis=0, ddof=1) / np.sqrt(num_batches)
