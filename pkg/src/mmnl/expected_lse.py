"""Treatments of the expected log-sum-exp term ``E_q[ln sum_j exp(X_j Gamma)]``.

Under the mean-field family the tastes of decision-maker ``n`` are Gaussian,
``Gamma_n = [alpha; beta_n] ~ N([mu_a; mu_b], blockdiag(S_a, S_b))``. The
expectation of the log-sum-exp has no closed form; three replacements are
provided:

* :func:`delta_terms` - second-order Taylor expansion around the means,
* :func:`qmc_terms` - average over fixed quasi-random draws,
* :func:`mji_terms` - the modified Jensen upper bound with auxiliary simplex
  weights ``a`` (see :func:`mji_refresh_aux`).

The ``*_terms`` functions are batched over ``O`` occasions and also return
the gradients the variational updates need. Per-occasion conveniences
(:func:`elise_delta`, :func:`elise_qmc`, :func:`elise_mji_bound`) wrap them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .kernel import choice_probabilities, log_sum_exp

log = logging.getLogger(__name__)


class NonPositiveDefiniteError(ValueError):
    pass


def matrix_sqrt(cov: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Lower Cholesky factor, or a symmetric root for singular PSD input."""
    if cov.size == 0:
        return cov.copy()
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        evals, evecs = np.linalg.eigh(cov)
        if evals.min() < -tol * max(1.0, np.abs(evals).max()):
            raise NonPositiveDefiniteError("covariance matrix is not positive semi-definite")
        return (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T


@dataclass(frozen=True)
class GaussianFactor:
    """Gaussian variational factor ``N(mean, cov)`` with a cached square root."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float).reshape(mean.size, mean.size)
        if not np.allclose(cov, cov.T, atol=1e-10, rtol=0):
            raise NonPositiveDefiniteError("covariance matrix is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", matrix_sqrt(cov))

    @classmethod
    def empty(cls) -> "GaussianFactor":
        return cls(np.zeros(0), np.zeros((0, 0)))

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass
class ElseTerms:
    """Per-occasion value of an E-LSE treatment and its gradients.

    ``grad_cov_*`` are derivatives with respect to the covariance entries
    (Delta, MJI); ``grad_chol_*`` with respect to the Cholesky factor (QMC).
    """

    value: np.ndarray
    grad_mu_alpha: Optional[np.ndarray] = None
    grad_mu_beta: Optional[np.ndarray] = None
    grad_cov_alpha: Optional[np.ndarray] = None
    grad_cov_beta: Optional[np.ndarray] = None
    grad_chol_alpha: Optional[np.ndarray] = None
    grad_chol_beta: Optional[np.ndarray] = None


def _mean_utilities(xf, xr, mu_a, mu_b):
    v = np.einsum("ojk,ok->oj", xr, mu_b)
    if xf.shape[-1]:
        v = v + xf @ mu_a
    return v


def _spread(xf, xr, cov_a, cov_b):
    """``S = X_F S_a X_F' + X_R S_b X_R'`` per occasion, shape ``(O, J, J)``."""
    xs = np.einsum("ojk,okl->ojl", xr, cov_b)
    S = np.einsum("ojl,oml->ojm", xs, xr)
    if xf.shape[-1]:
        S = S + np.einsum("ojl,lm,oim->oji", xf, cov_a, xf)
    return S


def _curvature_form(x, p):
    """``X' (diag(p) - p p') X`` per occasion."""
    px = np.einsum("oj,ojk->ok", p, x)
    return np.einsum("ojk,oj,ojl->okl", x, p, x) - px[:, :, None] * px[:, None, :]


def delta_terms(xf, xr, mu_a, cov_a, mu_b, cov_b, gradients: bool = True) -> ElseTerms:
    """Delta-method approximation of E-LSE for a stack of occasions.

    ``mu_b`` and ``cov_b`` hold the beta factor of each occasion's
    decision-maker, shapes ``(O, K)`` and ``(O, K, K)``.
    """
    v = _mean_utilities(xf, xr, mu_a, mu_b)
    p = choice_probabilities(v)
    S = _spread(xf, xr, cov_a, cov_b)
    s = np.einsum("ojj->oj", S)
    Sp = np.einsum("ojm,om->oj", S, p)
    value = log_sum_exp(v) + 0.5 * (np.sum(p * s, axis=1) - np.sum(p * Sp, axis=1))
    if not gradients:
        return ElseTerms(value)
    # d value / d v = p + 1/2 (diag(p) - p p') (s - 2 S p)
    u = s - 2.0 * Sp
    dv = p + 0.5 * (p * u - p * np.sum(p * u, axis=1, keepdims=True))
    out = ElseTerms(value, grad_mu_beta=np.einsum("ojk,oj->ok", xr, dv))
    out.grad_cov_beta = 0.5 * _curvature_form(xr, p)
    if xf.shape[-1]:
        out.grad_mu_alpha = np.einsum("ojl,oj->ol", xf, dv)
        out.grad_cov_alpha = 0.5 * _curvature_form(xf, p)
    return out


def qmc_terms(xf, xr, alpha_draws, xi_alpha, beta_draws, xi_beta,
              gradients: bool = True) -> ElseTerms:
    """Simulated E-LSE from fixed standard-normal points.

    ``alpha_draws`` ``(D, L)`` are ``mu_a + chol(S_a) xi_alpha``; ``beta_draws``
    ``(O, D, K)`` are the per-occasion ``mu_b + chol(S_b) xi_beta``.
    """
    D = beta_draws.shape[1]
    v = np.einsum("ojk,odk->odj", xr, beta_draws)
    if xf.shape[-1]:
        v = v + np.einsum("ojl,dl->odj", xf, alpha_draws)
    value = log_sum_exp(v).mean(axis=1)
    if not gradients:
        return ElseTerms(value)
    p = choice_probabilities(v)
    pxr = np.einsum("odj,ojk->odk", p, xr)
    out = ElseTerms(value, grad_mu_beta=pxr.sum(axis=1) / D)
    out.grad_chol_beta = np.einsum("odk,odl->okl", pxr, xi_beta) / D
    if xf.shape[-1]:
        pxf = np.einsum("odj,ojl->odl", p, xf)
        out.grad_mu_alpha = pxf.sum(axis=1) / D
        out.grad_chol_alpha = np.einsum("odl,dm->olm", pxf, xi_alpha) / D
    return out


def mji_terms(xf, xr, mu_a, cov_a, mu_b, cov_b, aux, gradients: bool = True) -> ElseTerms:
    """Modified-Jensen upper bound on E-LSE with auxiliary weights ``aux`` ``(O, J)``."""
    bar_r = np.einsum("oj,ojk->ok", aux, xr)
    zr = xr - bar_r[:, None, :]
    u = np.einsum("ojk,ok->oj", zr, mu_b)
    u += 0.5 * np.einsum("ojk,okl,ojl->oj", zr, cov_b, zr)
    lin = np.sum(bar_r * mu_b, axis=1)
    has_fixed = xf.shape[-1] > 0
    if has_fixed:
        bar_f = np.einsum("oj,ojl->ol", aux, xf)
        zf = xf - bar_f[:, None, :]
        u += zf @ mu_a + 0.5 * np.einsum("ojl,lm,ojm->oj", zf, cov_a, zf)
        lin += bar_f @ mu_a
    value = lin + log_sum_exp(u)
    if not gradients:
        return ElseTerms(value)
    pi = choice_probabilities(u)
    out = ElseTerms(value, grad_mu_beta=np.einsum("oj,ojk->ok", pi, xr))
    out.grad_cov_beta = 0.5 * np.einsum("ojk,oj,ojl->okl", zr, pi, zr)
    if has_fixed:
        out.grad_mu_alpha = np.einsum("oj,ojl->ol", pi, xf)
        out.grad_cov_alpha = 0.5 * np.einsum("ojl,oj,ojm->olm", zf, pi, zf)
    return out


def mji_aux_map(xf, xr, mu_a, cov_a, mu_b, cov_b, aux):
    """Right-hand side of the auxiliary fixed-point equation.

    ``a_j ∝ exp(X_j G + 1/2 (X_j - 2 sum_m a_m X_m) V X_j')`` which, with
    ``S = X V X'``, is ``softmax(v + diag(S)/2 - S a)``.
    """
    v = _mean_utilities(xf, xr, mu_a, mu_b)
    S = _spread(xf, xr, cov_a, cov_b)
    s = np.einsum("ojj->oj", S)
    return choice_probabilities(v + 0.5 * s - np.einsum("ojm,om->oj", S, aux))


@dataclass
class AuxRefresh:
    aux: np.ndarray
    sweeps: int
    max_change: float
    converged: bool


def mji_refresh_aux(xf, xr, mu_a, cov_a, mu_b, cov_b, aux, tol: float = 1e-8,
                    max_sweeps: int = 100, damping: float = 0.5) -> AuxRefresh:
    """Damped fixed-point iteration for the auxiliary weights of all occasions.

    ``a <- (1 - damping) a + damping F(a)`` until the largest elementwise change
    drops below ``tol`` or ``max_sweeps`` is reached; non-convergence is logged
    and the last iterate returned.
    """
    aux = np.asarray(aux, dtype=float).copy()
    if np.any(aux < 0) or np.any(np.abs(aux.sum(axis=-1) - 1.0) > 1e-10):
        raise ValueError("auxiliary weights must lie on the probability simplex")
    v = _mean_utilities(xf, xr, mu_a, mu_b)
    S = _spread(xf, xr, cov_a, cov_b)
    base = v + 0.5 * np.einsum("ojj->oj", S)
    change = np.inf
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        target = choice_probabilities(base - np.einsum("ojm,om->oj", S, aux))
        new = (1.0 - damping) * aux + damping * target
        change = float(np.max(np.abs(new - aux))) if aux.size else 0.0
        aux = new / new.sum(axis=-1, keepdims=True)
        if change < tol:
            break
    converged = change < tol
    if not converged:
        log.warning("MJI auxiliary refresh stopped after %d sweeps (change %.3g)", sweeps, change)
    return AuxRefresh(aux, sweeps, change, converged)


def initial_aux(num_occasions: int, num_alternatives: int) -> np.ndarray:
    return np.full((num_occasions, num_alternatives), 1.0 / num_alternatives)


# ---------------------------------------------------------------------------
# single-occasion conveniences


def _occasion(x_fixed, x_random):
    xr = np.asarray(x_random, dtype=float)[None]
    xf = np.asarray(x_fixed, dtype=float)
    xf = xf.reshape(1, xr.shape[1], -1)
    return xf, xr


def _check(xf, xr, alpha_factor, beta_factor):
    if alpha_factor.dim != xf.shape[-1] or beta_factor.dim != xr.shape[-1]:
        raise ValueError("factor dimensions do not match the attribute columns")


def elise_delta(x_fixed, x_random, alpha_factor: GaussianFactor,
                beta_factor: GaussianFactor) -> float:
    xf, xr = _occasion(x_fixed, x_random)
    _check(xf, xr, alpha_factor, beta_factor)
    t = delta_terms(xf, xr, alpha_factor.mean, alpha_factor.cov,
                    beta_factor.mean[None], beta_factor.cov[None], gradients=False)
    return float(t.value[0])


def elise_qmc(x_fixed, x_random, alpha_factor: GaussianFactor, beta_factor: GaussianFactor,
              alpha_xi: np.ndarray, beta_xi: np.ndarray) -> float:
    """``alpha_xi`` is ``(D, L)`` and ``beta_xi`` ``(D, K)`` standard-normal points."""
    xf, xr = _occasion(x_fixed, x_random)
    _check(xf, xr, alpha_factor, beta_factor)
    beta_xi = np.asarray(beta_xi, dtype=float)
    alpha_xi = np.asarray(alpha_xi, dtype=float).reshape(beta_xi.shape[0], -1)
    a_draws = alpha_factor.mean + alpha_xi @ alpha_factor.chol.T
    b_draws = beta_factor.mean + beta_xi @ beta_factor.chol.T
    t = qmc_terms(xf, xr, a_draws, alpha_xi, b_draws[None], beta_xi[None], gradients=False)
    return float(t.value[0])


def elise_mji_bound(x_fixed, x_random, alpha_factor: GaussianFactor,
                    beta_factor: GaussianFactor, aux) -> float:
    xf, xr = _occasion(x_fixed, x_random)
    _check(xf, xr, alpha_factor, beta_factor)
    aux = np.asarray(aux, dtype=float)
    if aux.shape != (xr.shape[1],) or np.any(aux < 0) or abs(aux.sum() - 1.0) > 1e-10:
        raise ValueError("auxiliary weights must be a simplex vector over the choice set")
    t = mji_terms(xf, xr, alpha_factor.mean, alpha_factor.cov,
                  beta_factor.mean[None], beta_factor.cov[None], aux[None], gradients=False)
    return float(t.value[0])


def mji_refresh_occasion(x_fixed, x_random, alpha_factor: GaussianFactor,
                         beta_factor: GaussianFactor, aux, **kwargs) -> AuxRefresh:
    xf, xr = _occasion(x_fixed, x_random)
    _check(xf, xr, alpha_factor, beta_factor)
    res = mji_refresh_aux(xf, xr, alpha_factor.mean, alpha_factor.cov,
                          beta_factor.mean[None], beta_factor.cov[None],
                          np.asarray(aux, dtype=float)[None], **kwargs)
    res.aux = res.aux[0]
    return res
