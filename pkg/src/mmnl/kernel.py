"""Numerically stable multinomial logit primitives.

All functions operate on the last axis, so a stack of choice occasions with
shape ``(..., J)`` is handled in one call.
"""

from __future__ import annotations

import numpy as np


def log_sum_exp(v, axis: int = -1):
    """Return ``ln sum(exp(v))`` along ``axis`` using a max shift.

    No clipping is applied; entries of magnitude up to ~1e3 (and far beyond)
    are handled without overflow.
    """
    v = np.asarray(v, dtype=float)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("log_sum_exp of an empty vector is undefined")
    vmax = np.max(v, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(v - vmax), axis=axis, keepdims=True)) + vmax
    return np.squeeze(out, axis=axis) if out.ndim > 0 else float(out)


def choice_probabilities(v, axis: int = -1):
    """Softmax of utilities ``v`` along ``axis``."""
    v = np.asarray(v, dtype=float)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("choice probabilities of an empty vector are undefined")
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_curvature(p, atol: float = 1e-8):
    """Hessian of the log-sum-exp expressed through probabilities.

    Returns ``diag(p) - p p'`` for a probability vector ``p`` (or a stack of
    them with shape ``(..., J)``, giving ``(..., J, J)``).
    """
    p = np.asarray(p, dtype=float)
    if np.any(p < -atol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ValueError("softmax_curvature expects normalized probability vectors")
    eye = np.eye(p.shape[-1])
    return p[..., :, None] * eye - p[..., :, None] * p[..., None, :]


def utilities(x_fixed, alpha, x_random, beta):
    """Deterministic utilities ``X_F alpha + X_R beta`` for a stack of occasions.

    ``x_fixed`` has shape ``(O, J, L)`` and ``x_random`` ``(O, J, K)``; ``beta``
    is either a single ``K`` vector or one row per occasion ``(O, K)``.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.ndim == 1:
        v = x_random @ beta
    else:
        v = np.einsum("ojk,ok->oj", x_random, beta)
    if x_fixed.shape[-1]:
        v = v + x_fixed @ np.asarray(alpha, dtype=float)
    return v


def occasion_log_probs(v, choices):
    """Log probability of the chosen alternative on each occasion."""
    v = np.asarray(v, dtype=float)
    chosen = np.take_along_axis(v, np.asarray(choices)[..., None], axis=-1)[..., 0]
    return chosen - log_sum_exp(v)


def sequence_log_likelihood(x_fixed, x_random, choices, gamma):
    """Log probability of one decision-maker's sequence of choices.

    Parameters
    ----------
    x_fixed, x_random : ndarray
        Attributes for the individual's ``T`` occasions, shapes ``(T, J, L)``
        and ``(T, J, K)``.
    choices : ndarray
        Chosen alternative (0-based) on each occasion.
    gamma : ndarray
        Stacked taste vector ``[alpha; beta]`` of length ``L + K``.
    """
    x_fixed = np.asarray(x_fixed, dtype=float)
    x_random = np.asarray(x_random, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    n_fix, n_rnd = x_fixed.shape[-1], x_random.shape[-1]
    if gamma.shape != (n_fix + n_rnd,):
        raise ValueError(
            f"taste vector has length {gamma.shape}, expected {n_fix + n_rnd}"
        )
    if x_random.shape[0] == 0:
        return 0.0
    v = utilities(x_fixed, gamma[:n_fix], x_random, gamma[n_fix:])
    return float(np.sum(occasion_log_probs(v, choices)))
