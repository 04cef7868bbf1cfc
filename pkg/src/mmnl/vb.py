"""Coordinate-ascent variational Bayes for the mixed logit model.

The mean-field family factorises as ``q(alpha) q(zeta) q(Omega) q(a) prod_n
q(beta_n)`` with Gaussian factors for ``alpha``, ``zeta`` and ``beta_n``,
an inverse Wishart ``IW(w, Theta)`` for ``Omega`` and Gamma ``(c, d_k)``
factors for the half-t mixing weights. ``zeta``, ``Omega`` and ``a`` have
closed-form updates; ``alpha`` and ``beta_n`` are updated either by
quasi-Newton maximisation of their ELBO terms (``QN``) or by non-conjugate
message passing fixed points (``NCVMP``). The intractable expected
log-sum-exp is handled by the Delta method, QMC, or the MJI bound.

Every ``beta_n`` factor is updated in one vectorised sweep, so the whole
individual loop costs a handful of array operations per iteration.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import optimize

from ._bfgs import minimize_batch
from .data import ChoiceDataset
from .draws import individual_draws, mlhs_normal_draws
from .expected_lse import (
    ElseTerms,
    GaussianFactor,
    delta_terms,
    initial_aux,
    mji_refresh_aux,
    mji_terms,
    qmc_terms,
)

log = logging.getLogger(__name__)

VARIANTS = ("NCVMP-Delta", "NCVMP-MJI", "QN-Delta", "QN-QMC", "QN-MJI")


class UnsupportedVariantError(ValueError):
    pass


class VbNumericalError(RuntimeError):
    pass


def parse_variant(name: str) -> tuple[str, str]:
    """``"QN-MJI"`` -> ``("qn", "mji")``; ``Δ`` is accepted for ``Delta``."""
    text = str(name).strip().replace("Δ", "Delta").replace("_", "-").upper()
    try:
        method, treatment = text.split("-", 1)
    except ValueError:
        raise UnsupportedVariantError(f"unknown VB variant {name!r}") from None
    method, treatment = method.lower(), treatment.lower()
    if method not in ("qn", "ncvmp") or treatment not in ("delta", "qmc", "mji"):
        raise UnsupportedVariantError(f"unknown VB variant {name!r}")
    if method == "ncvmp" and treatment == "qmc":
        raise UnsupportedVariantError(
            "NCVMP with QMC is not supported: its simulated covariance fixed point is numerically unstable"
        )
    return method, treatment


def _is_pd(m: np.ndarray) -> bool:
    if m.size == 0:
        return True
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return False
    return True


@dataclass(frozen=True)
class Hyperparameters:
    """Prior settings. ``alpha ~ N(lambda0, xi0)``, ``zeta ~ N(mu0, sigma0)``,
    ``Omega | a ~ IW(nu + K - 1, 2 nu diag(a))``, ``a_k ~ Gamma(1/2, A_k^-2)``."""

    lambda0: np.ndarray
    xi0: np.ndarray
    mu0: np.ndarray
    sigma0: np.ndarray
    nu: float = 2.0
    A: np.ndarray = None

    def __post_init__(self):
        for name in ("lambda0", "mu0"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        L, K = self.lambda0.size, self.mu0.size
        object.__setattr__(self, "xi0", np.asarray(self.xi0, dtype=float).reshape(L, L))
        object.__setattr__(self, "sigma0", np.asarray(self.sigma0, dtype=float).reshape(K, K))
        A = np.full(K, 1e3) if self.A is None else np.broadcast_to(np.asarray(self.A, dtype=float), (K,)).copy()
        object.__setattr__(self, "A", A)
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if np.any(A <= 0):
            raise ValueError("half-t scales A_k must be positive")
        if not (_is_pd(self.xi0) and _is_pd(self.sigma0)):
            raise ValueError("prior covariance matrices must be positive definite")

    @classmethod
    def default(cls, n_fixed: int, n_random: int) -> "Hyperparameters":
        return cls(np.zeros(n_fixed), 1e3 * np.eye(n_fixed), np.zeros(n_random),
                   1e3 * np.eye(n_random), 2.0, np.full(n_random, 1e3))

    @property
    def n_fixed(self) -> int:
        return self.lambda0.size

    @property
    def n_random(self) -> int:
        return self.mu0.size

    @property
    def iw_dof(self) -> float:
        return self.nu + self.n_random - 1

    @property
    def gamma_shape(self) -> float:
        return 0.5

    @property
    def gamma_rate(self) -> np.ndarray:
        return self.A ** -2.0

    def to_json(self) -> dict:
        return {"lambda0": self.lambda0.tolist(), "xi0": self.xi0.tolist(), "mu0": self.mu0.tolist(),
                "sigma0": self.sigma0.tolist(), "nu": self.nu, "A": self.A.tolist()}


@dataclass
class VariationalPosterior:
    mu_alpha: np.ndarray
    cov_alpha: np.ndarray
    mu_zeta: np.ndarray
    cov_zeta: np.ndarray
    w: float
    theta: np.ndarray
    c: float
    d: np.ndarray
    mu_beta: np.ndarray
    cov_beta: np.ndarray
    aux: Optional[np.ndarray] = None

    @property
    def alpha_factor(self) -> GaussianFactor:
        return GaussianFactor(self.mu_alpha, self.cov_alpha)

    @property
    def zeta_factor(self) -> GaussianFactor:
        return GaussianFactor(self.mu_zeta, self.cov_zeta)

    def beta_factor(self, n: int) -> GaussianFactor:
        return GaussianFactor(self.mu_beta[n], self.cov_beta[n])

    @property
    def num_individuals(self) -> int:
        return self.mu_beta.shape[0]

    def copy(self) -> "VariationalPosterior":
        return replace(self, **{k: (np.array(v) if isinstance(v, np.ndarray) else v)
                                for k, v in self.__dict__.items()})

    def check(self) -> None:
        """Raise :class:`VbNumericalError` on non-finite or invalid blocks."""
        for name, val in self.__dict__.items():
            if isinstance(val, np.ndarray) and not np.all(np.isfinite(val)):
                raise VbNumericalError(f"non-finite values in {name}")
        if not _is_pd(self.theta):
            raise VbNumericalError("Theta lost positive definiteness")
        if np.any(self.d <= 0):
            raise VbNumericalError("Gamma rates d_k must stay positive")


def omega_scale(post: VariationalPosterior, hyper: Hyperparameters) -> np.ndarray:
    """``2 nu diag(c/d) + N Sigma_zeta + sum_n [Sigma_bn + (mu_bn - mu_z)(mu_bn - mu_z)']``."""
    N = post.num_individuals
    dev = post.mu_beta - post.mu_zeta
    theta = (2.0 * hyper.nu * np.diag(post.c / post.d) + N * post.cov_zeta
             + post.cov_beta.sum(axis=0) + dev.T @ dev)
    return 0.5 * (theta + theta.T)


def initial_posterior(dataset: ChoiceDataset, hyper: Hyperparameters,
                      with_aux: bool = False) -> VariationalPosterior:
    L, K, N = dataset.n_fixed, dataset.n_random, dataset.num_individuals
    if (hyper.n_fixed, hyper.n_random) != (L, K):
        raise ValueError("hyperparameter dimensions do not match the dataset")
    w = hyper.nu + N + K - 1
    post = VariationalPosterior(
        mu_alpha=np.zeros(L), cov_alpha=np.eye(L),
        mu_zeta=np.zeros(K), cov_zeta=np.eye(K),
        w=w, theta=np.eye(K), c=(hyper.nu + K) / 2.0,
        d=hyper.gamma_rate + hyper.nu * w,
        mu_beta=np.zeros((N, K)), cov_beta=np.broadcast_to(np.eye(K), (N, K, K)).copy(),
        aux=initial_aux(dataset.num_occasions, dataset.num_alternatives) if with_aux else None,
    )
    post.theta = omega_scale(post, hyper)
    return post


# -- conjugate factors -------------------------------------------------------


def update_zeta_factor(post: VariationalPosterior, hyper: Hyperparameters):
    """Return the optimal ``(mu_zeta, Sigma_zeta)`` given the other factors."""
    N = post.num_individuals
    try:
        theta_inv = np.linalg.inv(post.theta)
    except np.linalg.LinAlgError as exc:
        raise VbNumericalError("Theta is singular") from exc
    s0_inv = np.linalg.inv(hyper.sigma0)
    cov = np.linalg.inv(s0_inv + N * post.w * theta_inv)
    cov = 0.5 * (cov + cov.T)
    mu = cov @ (s0_inv @ hyper.mu0 + post.w * theta_inv @ post.mu_beta.sum(axis=0))
    return mu, cov


def update_omega_factor(post: VariationalPosterior, hyper: Hyperparameters) -> np.ndarray:
    """Return the optimal inverse Wishart scale ``Theta``."""
    return omega_scale(post, hyper)


def update_a_factors(post: VariationalPosterior, hyper: Hyperparameters) -> np.ndarray:
    """Return the Gamma rates ``d_k = A_k^-2 + nu w (Theta^-1)_kk``."""
    try:
        theta_inv = np.linalg.inv(post.theta)
    except np.linalg.LinAlgError as exc:
        raise VbNumericalError("Theta is singular") from exc
    return hyper.gamma_rate + hyper.nu * post.w * np.diag(theta_inv)


def vb_point_estimates(post: VariationalPosterior):
    """``(alpha_hat, zeta_hat, Omega_hat, beta_hat)`` from a fitted posterior."""
    K = post.theta.shape[0]
    if post.w <= K + 1:
        raise ValueError("the inverse Wishart mean needs w > K + 1")
    return (post.mu_alpha.copy(), post.mu_zeta.copy(), post.theta / (post.w - K - 1),
            post.mu_beta.copy())


# -- Cholesky packing --------------------------------------------------------


class CholeskyPacking:
    """Map ``(mu, L)`` to a flat vector with log-transformed diagonal of ``L``."""

    def __init__(self, dim: int):
        self.dim = dim
        self.rows, self.cols = np.tril_indices(dim)
        self.is_diag = self.rows == self.cols
        self.size = dim + self.rows.size

    def pack(self, mu, chol):
        vals = chol[..., self.rows, self.cols].copy()
        vals[..., self.is_diag] = np.log(vals[..., self.is_diag])
        return np.concatenate([mu, vals], axis=-1)

    def unpack(self, x):
        mu = x[..., : self.dim]
        vals = x[..., self.dim:].copy()
        vals[..., self.is_diag] = np.exp(vals[..., self.is_diag])
        chol = np.zeros(x.shape[:-1] + (self.dim, self.dim))
        chol[..., self.rows, self.cols] = vals
        return mu, chol

    def pack_gradient(self, g_mu, g_chol, chol):
        """Chain rule to the packed coordinates; ``+1`` per diagonal comes from
        ``1/2 ln|Sigma| = sum_k ln L_kk``, which callers leave out of ``g_chol``."""
        gv = g_chol[..., self.rows, self.cols].copy()
        diag = chol[..., self.rows[self.is_diag], self.cols[self.is_diag]]
        gv[..., self.is_diag] = gv[..., self.is_diag] * diag + 1.0
        return np.concatenate([g_mu, gv], axis=-1)


def _chol(cov: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(cov) if cov.size else cov.copy()


def _segment_sum(values: np.ndarray, segments: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, segments, values)
    return out


@dataclass
class VbConfig:
    variant: str = "NCVMP-Delta"
    max_iter: int = 500
    tol: float = 0.005
    window: int = 5
    num_draws: int = 64
    seed: int = 0
    gtol: float = 1e-6
    aux_tol: float = 1e-8
    aux_max_sweeps: int = 100
    ncvmp_eig_floor: float = 1e-8
    trace_path: Optional[str] = None


class ConvergenceMonitor:
    """Relative-change stopping rule on a rolling average of monitored values.

    ``delta = max_i |avg_i(tau) - avg_i(tau-1)| / |avg_i(tau-1) + 1e-8|`` where
    ``avg`` is the mean over the last ``window`` iterates. Checking starts once
    ``window + 1`` iterates have been recorded.
    """

    def __init__(self, tol: float = 0.005, window: int = 5, max_iter: int = 500):
        self.tol = tol
        self.window = window
        self.max_iter = max_iter
        self.history: list = []
        self.average: Optional[np.ndarray] = None
        self.delta = np.inf
        self.deltas: list = []

    def push(self, values) -> float:
        values = np.asarray(values, dtype=float)
        self.history.append(values)
        recent = np.array(self.history[-self.window:])
        new_avg = recent.mean(axis=0)
        if len(self.history) > self.window and self.average is not None:
            self.delta = float(np.max(np.abs(new_avg - self.average)
                                      / np.abs(self.average + 1e-8))) if new_avg.size else 0.0
        self.average = new_avg
        self.deltas.append(self.delta)
        return self.delta

    @property
    def converged(self) -> bool:
        return self.delta < self.tol

    @property
    def exhausted(self) -> bool:
        return len(self.history) >= self.max_iter


def monitored_vector(post: VariationalPosterior) -> np.ndarray:
    return np.concatenate([post.mu_alpha, post.mu_zeta, np.diag(post.theta), post.d])


class VbEngine:
    """Holds the data, draws and current posterior for one VB run."""

    def __init__(self, dataset: ChoiceDataset, hyper: Optional[Hyperparameters] = None,
                 config: Optional[VbConfig] = None, posterior: Optional[VariationalPosterior] = None):
        self.config = config or VbConfig()
        self.method, self.treatment = parse_variant(self.config.variant)
        self.hyper = hyper or Hyperparameters.default(dataset.n_fixed, dataset.n_random)
        self.data = dataset
        self.xf, self.xr = dataset.x_fixed, dataset.x_random
        self.ind = dataset.individual
        self.N, self.L, self.K = dataset.num_individuals, dataset.n_fixed, dataset.n_random
        occ = np.arange(dataset.num_occasions)
        self.y_xf = self.xf[occ, dataset.choices]
        self.y_xr = self.xr[occ, dataset.choices]
        self.post = posterior if posterior is not None else initial_posterior(
            dataset, self.hyper, with_aux=self.treatment == "mji")
        if self.treatment == "mji" and self.post.aux is None:
            self.post.aux = initial_aux(dataset.num_occasions, dataset.num_alternatives)
        self.xi_alpha = self.xi_beta = None
        if self.treatment == "qmc":
            D = self.config.num_draws
            self.xi_alpha = (mlhs_normal_draws(D, self.L, (self.config.seed, 0)).draws
                             if self.L else np.zeros((D, 0)))
            xi = individual_draws(self.N, D, self.K, (self.config.seed, 1))
            self.xi_beta = xi[self.ind]
        self.alpha_pack = CholeskyPacking(self.L)
        self.beta_pack = CholeskyPacking(self.K)
        self.flags = {"ncvmp_alpha_reverts": 0, "ncvmp_beta_reverts": 0, "qn_alpha_failures": 0,
                      "qn_beta_failures": 0, "aux_nonconverged": 0}
        self.prior_xi_inv = np.linalg.inv(self.hyper.xi0) if self.L else np.zeros((0, 0))

    # -- expected log-sum-exp over a set of occasions --

    def _terms(self, occ, mu_a, cov_a, chol_a, mu_b, cov_b, chol_b, gradients=True) -> ElseTerms:
        """E-LSE terms for occasions ``occ``; beta arguments are per individual."""
        xf, xr = self.xf[occ], self.xr[occ]
        who = self.ind[occ]
        if xr.shape[0] == 0:
            return ElseTerms(np.zeros(0), np.zeros((0, self.L)), np.zeros((0, self.K)),
                             np.zeros((0, self.L, self.L)), np.zeros((0, self.K, self.K)),
                             np.zeros((0, self.L, self.L)), np.zeros((0, self.K, self.K)))
        if self.treatment == "delta":
            return delta_terms(xf, xr, mu_a, cov_a, mu_b[who], cov_b[who], gradients)
        if self.treatment == "mji":
            return mji_terms(xf, xr, mu_a, cov_a, mu_b[who], cov_b[who], self.post.aux[occ], gradients)
        a_draws = mu_a + self.xi_alpha @ chol_a.T
        xi_b = self.xi_beta[occ]
        b_draws = mu_b[who][:, None, :] + np.einsum("okl,odl->odk", chol_b[who], xi_b)
        return qmc_terms(xf, xr, a_draws, self.xi_alpha, b_draws, xi_b, gradients)

    def _chol_gradient(self, terms: ElseTerms, which: str, chol):
        """Derivative of summed E-LSE terms w.r.t. a Cholesky factor."""
        if self.treatment == "qmc":
            return getattr(terms, f"grad_chol_{which}")
        g_cov = getattr(terms, f"grad_cov_{which}")
        return 2.0 * g_cov @ chol

    # -- beta_n ---------------------------------------------------------------

    def beta_objective(self, mu_b, chol_b, active=None, gradients=True):
        """ELBO terms of each ``q(beta_n)`` (value per individual) and gradients.

        The ``ln|Sigma|/2`` entropy part is returned in the value but its
        derivative is left to :meth:`CholeskyPacking.pack_gradient`.
        """
        post = self.post
        N, K = self.N, self.K
        if active is None:
            active = np.ones(N, dtype=bool)
        occ = np.flatnonzero(active[self.ind]) if not active.all() else slice(None)
        cov_b = chol_b @ np.swapaxes(chol_b, -1, -2)
        chol_a = _chol(post.cov_alpha)
        t = self._terms(occ, post.mu_alpha, post.cov_alpha, chol_a, mu_b, cov_b, chol_b, gradients)
        who = self.ind[occ]
        y_xr = self.y_xr[occ]
        ll = _segment_sum(np.sum(y_xr * mu_b[who], axis=1) - t.value, who, N)
        theta_inv = np.linalg.inv(post.theta)
        w = post.w
        diag = np.log(np.abs(np.diagonal(chol_b, axis1=-2, axis2=-1)))
        value = (ll - 0.5 * w * np.einsum("kl,nlk->n", theta_inv, cov_b)
                 - 0.5 * w * np.einsum("nk,kl,nl->n", mu_b, theta_inv, mu_b)
                 + w * mu_b @ theta_inv @ post.mu_zeta + diag.sum(axis=1))
        if not gradients:
            return value
        g_mu = _segment_sum(y_xr - t.grad_mu_beta, who, N) - w * (mu_b - post.mu_zeta) @ theta_inv
        if self.treatment == "qmc":
            g_chol = -_segment_sum(t.grad_chol_beta, who, N)
        else:
            g_chol = -2.0 * _segment_sum(t.grad_cov_beta, who, N) @ chol_b
        g_chol = g_chol - w * theta_inv @ chol_b
        return value, g_mu, g_chol

    def qn_update_beta(self) -> np.ndarray:
        """Maximise every beta_n objective; returns the objective values after the update."""
        pack = self.beta_pack
        chol0 = np.linalg.cholesky(self.post.cov_beta)
        x0 = pack.pack(self.post.mu_beta, chol0)

        def fun(x, active):
            mu, chol = pack.unpack(x)
            value, g_mu, g_chol = self.beta_objective(mu, chol, active)
            return -value, -pack.pack_gradient(g_mu, g_chol, chol)

        res = minimize_batch(fun, x0, gtol=self.config.gtol)
        if res.failed.any():
            self.flags["qn_beta_failures"] += int(res.failed.sum())
            log.debug("line search collapsed for %d beta factors", int(res.failed.sum()))
        mu, chol = pack.unpack(res.x)
        self.post.mu_beta = mu
        self.post.cov_beta = chol @ np.swapaxes(chol, -1, -2)
        return -res.fun

    def beta_gradients(self, mu_b=None, cov_b=None):
        """Gradients of the expected log joint w.r.t. ``mu_beta_n`` and ``Sigma_beta_n``
        (covariance entries treated as free), without the entropy term."""
        post = self.post
        mu_b = post.mu_beta if mu_b is None else mu_b
        cov_b = post.cov_beta if cov_b is None else cov_b
        t = self._terms(slice(None), post.mu_alpha, post.cov_alpha, None, mu_b, cov_b, None)
        theta_inv = np.linalg.inv(post.theta)
        g_mu = (_segment_sum(self.y_xr - t.grad_mu_beta, self.ind, self.N)
                - post.w * (mu_b - post.mu_zeta) @ theta_inv)
        g_cov = -_segment_sum(t.grad_cov_beta, self.ind, self.N) - 0.5 * post.w * theta_inv
        return g_mu, g_cov

    def ncvmp_update_beta(self) -> None:
        post = self.post
        g_mu, g_cov = self.beta_gradients()
        cov = np.linalg.inv(-2.0 * g_cov)
        cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
        bad = np.linalg.eigvalsh(cov)[:, 0] < self.config.ncvmp_eig_floor
        if bad.any():
            self.flags["ncvmp_beta_reverts"] += int(bad.sum())
            cov[bad] = post.cov_beta[bad]
        post.mu_beta = post.mu_beta + np.einsum("nkl,nl->nk", cov, g_mu)
        post.cov_beta = cov

    # -- alpha ----------------------------------------------------------------

    def alpha_objective(self, mu_a, chol_a, gradients=True):
        post = self.post
        cov_a = chol_a @ chol_a.T
        chol_b = np.linalg.cholesky(post.cov_beta) if self.treatment == "qmc" else None
        t = self._terms(slice(None), mu_a, cov_a, chol_a, post.mu_beta, post.cov_beta, chol_b,
                        gradients)
        xi_inv = self.prior_xi_inv
        dev = mu_a - self.hyper.lambda0
        value = (np.sum(self.y_xf @ mu_a) - t.value.sum() - 0.5 * np.sum(xi_inv * cov_a)
                 - 0.5 * dev @ xi_inv @ dev + np.sum(np.log(np.abs(np.diag(chol_a)))))
        if not gradients:
            return value
        g_mu = self.y_xf.sum(axis=0) - xi_inv @ dev
        if t.value.size:
            g_mu = g_mu - t.grad_mu_alpha.sum(axis=0)
            if self.treatment == "qmc":
                g_chol = -t.grad_chol_alpha.sum(axis=0)
            else:
                g_chol = -2.0 * t.grad_cov_alpha.sum(axis=0) @ chol_a
        else:
            g_chol = np.zeros_like(chol_a)
        g_chol = g_chol - xi_inv @ chol_a
        return value, g_mu, g_chol

    def qn_update_alpha(self) -> float:
        if self.L == 0:
            return 0.0
        pack = self.alpha_pack
        x0 = pack.pack(self.post.mu_alpha, np.linalg.cholesky(self.post.cov_alpha))

        def fun(x):
            mu, chol = pack.unpack(x)
            value, g_mu, g_chol = self.alpha_objective(mu, chol)
            return -value, -pack.pack_gradient(g_mu, g_chol, chol)

        f0 = fun(x0)[0]
        res = optimize.minimize(fun, x0, jac=True, method="BFGS", options={"gtol": self.config.gtol})
        x = res.x
        if not np.isfinite(res.fun) or res.fun > f0:
            self.flags["qn_alpha_failures"] += 1
            x = x0
        elif not res.success:
            log.debug("alpha optimizer: %s", res.message)
        mu, chol = pack.unpack(x)
        self.post.mu_alpha = mu
        self.post.cov_alpha = chol @ chol.T
        return -min(res.fun, f0)

    def alpha_gradients(self, mu_a=None, cov_a=None):
        post = self.post
        mu_a = post.mu_alpha if mu_a is None else mu_a
        cov_a = post.cov_alpha if cov_a is None else cov_a
        t = self._terms(slice(None), mu_a, cov_a, None, post.mu_beta, post.cov_beta, None)
        xi_inv = self.prior_xi_inv
        g_mu = self.y_xf.sum(axis=0) - xi_inv @ (mu_a - self.hyper.lambda0)
        g_cov = -0.5 * xi_inv
        if t.value.size:
            g_mu = g_mu - t.grad_mu_alpha.sum(axis=0)
            g_cov = g_cov - t.grad_cov_alpha.sum(axis=0)
        return g_mu, g_cov

    def ncvmp_update_alpha(self) -> None:
        if self.L == 0:
            return
        post = self.post
        g_mu, g_cov = self.alpha_gradients()
        cov = np.linalg.inv(-2.0 * g_cov)
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov)[0] < self.config.ncvmp_eig_floor:
            self.flags["ncvmp_alpha_reverts"] += 1
            cov = post.cov_alpha
        post.mu_alpha = post.mu_alpha + cov @ g_mu
        post.cov_alpha = cov

    # -- remaining blocks ---------------------------------------------------

    def update_globals(self) -> None:
        post = self.post
        post.mu_zeta, post.cov_zeta = update_zeta_factor(post, self.hyper)
        post.theta = update_omega_factor(post, self.hyper)
        post.d = update_a_factors(post, self.hyper)

    def refresh_aux(self) -> None:
        if self.treatment != "mji" or self.data.num_occasions == 0:
            return
        post = self.post
        res = mji_refresh_aux(self.xf, self.xr, post.mu_alpha, post.cov_alpha,
                              post.mu_beta[self.ind], post.cov_beta[self.ind], post.aux,
                              tol=self.config.aux_tol, max_sweeps=self.config.aux_max_sweeps)
        if not res.converged:
            self.flags["aux_nonconverged"] += 1
        post.aux = res.aux

    def iterate(self) -> dict:
        """One sweep: alpha, all beta_n, zeta, Theta, d, then MJI weights."""
        times = {}
        t0 = time.perf_counter()
        if self.method == "qn":
            self.qn_update_alpha()
        else:
            self.ncvmp_update_alpha()
        t1 = time.perf_counter()
        if self.method == "qn":
            self.qn_update_beta()
        else:
            self.ncvmp_update_beta()
        t2 = time.perf_counter()
        self.update_globals()
        t3 = time.perf_counter()
        self.refresh_aux()
        t4 = time.perf_counter()
        times.update(time_alpha=t1 - t0, time_beta=t2 - t1, time_global=t3 - t2, time_aux=t4 - t3)
        self.post.check()
        return times


@dataclass
class VbResult:
    posterior: VariationalPosterior
    variant: str
    iterations: int
    converged: bool
    elapsed: float
    delta: float
    trace: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def point_estimates(self):
        return vb_point_estimates(self.posterior)


def run_vb(dataset: ChoiceDataset, hyper: Optional[Hyperparameters] = None,
           config: Optional[VbConfig] = None, **overrides) -> VbResult:
    """Fit one VB variant by coordinate ascent until the stopping rule fires."""
    config = replace(config or VbConfig(), **overrides)
    start = time.perf_counter()
    engine = VbEngine(dataset, hyper, config)
    monitor = ConvergenceMonitor(config.tol, config.window, config.max_iter)
    trace = []
    while not monitor.exhausted:
        try:
            times = engine.iterate()
        except (np.linalg.LinAlgError, FloatingPointError, VbNumericalError) as exc:
            raise VbNumericalError(f"{config.variant} iteration {len(trace) + 1}: {exc}") from exc
        values = monitored_vector(engine.post)
        delta = monitor.push(values)
        trace.append({"iteration": len(trace) + 1, "delta": delta, **times,
                      **{f"theta_{i}": v for i, v in enumerate(values)}})
        if monitor.converged:
            break
    if not monitor.converged:
        log.warning("VB %s hit the iteration cap (%d) with delta %.4g",
                    config.variant, config.max_iter, monitor.delta)
    result = VbResult(engine.post, config.variant, len(trace), monitor.converged,
                      time.perf_counter() - start, monitor.delta, trace, dict(engine.flags))
    if config.trace_path:
        write_trace_csv(trace, config.trace_path)
    return result


def write_trace_csv(trace: list, path) -> None:
    if not trace:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(trace[0].keys()))
        writer.writeheader()
        for row in trace:
            writer.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})


def posterior_to_json(post: VariationalPosterior) -> dict:
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in post.__dict__.items()}


def posterior_from_json(blob: dict) -> VariationalPosterior:
    arrays = {k: (np.asarray(v, dtype=float) if isinstance(v, list) else v) for k, v in blob.items()}
    L = len(blob["mu_alpha"])
    arrays["mu_alpha"] = np.asarray(blob["mu_alpha"], dtype=float).reshape(L)
    arrays["cov_alpha"] = np.asarray(blob["cov_alpha"], dtype=float).reshape(L, L)
    return VariationalPosterior(**arrays)
