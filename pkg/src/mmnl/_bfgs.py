"""BFGS over a batch of independent smooth minimisation problems.

All problems share the same dimension and advance in lock step, so one
vectorised objective call serves the whole batch. Each problem keeps its own
inverse-Hessian approximation and backtracking line search. A step is only
taken when it satisfies the Armijo condition, so the objective of every problem
is non-increasing across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# fun(x, active) -> (f, g); rows of x that are not active may be ignored and
# their entries of f and g left arbitrary.
BatchObjective = Callable[[np.ndarray, np.ndarray], "tuple[np.ndarray, np.ndarray]"]


@dataclass
class BatchResult:
    x: np.ndarray
    fun: np.ndarray
    grad: np.ndarray
    converged: np.ndarray
    failed: np.ndarray
    iterations: int
    evaluations: int


def minimize_batch(fun: BatchObjective, x0: np.ndarray, gtol: float = 1e-6,
                   max_iter: int = 200, c1: float = 1e-4, max_backtrack: int = 40,
                   max_step: float = 10.0) -> BatchResult:
    x = np.array(x0, dtype=float, copy=True)
    B, P = x.shape
    everyone = np.ones(B, dtype=bool)
    f, g = fun(x, everyone)
    evals = 1
    H = np.broadcast_to(np.eye(P), (B, P, P)).copy()
    fresh = np.ones(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    converged = np.max(np.abs(g), axis=1) < gtol
    it = 0
    while it < max_iter:
        active = ~(converged | failed)
        if not active.any():
            break
        it += 1
        p = -np.einsum("bij,bj->bi", H, g)
        slope = np.sum(p * g, axis=1)
        # reset directions that are not descent directions
        bad = active & ~(slope < 0)
        if bad.any():
            H[bad] = np.eye(P)
            fresh[bad] = True
            p[bad] = -g[bad]
            slope[bad] = -np.sum(g[bad] ** 2, axis=1)
        norm = np.linalg.norm(p, axis=1)
        scale = np.where(fresh & (norm > max_step), max_step / np.maximum(norm, 1e-300), 1.0)
        step = np.where(active, scale, 0.0)
        searching = active.copy()
        x_new = x.copy()
        f_new = f.copy()
        g_new = g.copy()
        for _ in range(max_backtrack):
            trial = x + step[:, None] * p
            ft, gt = fun(trial, searching)
            evals += 1
            ok = searching & np.isfinite(ft) & (ft <= f + c1 * step * slope)
            ok &= np.all(np.isfinite(gt), axis=1)
            x_new[ok], f_new[ok], g_new[ok] = trial[ok], ft[ok], gt[ok]
            searching &= ~ok
            if not searching.any():
                break
            step = np.where(searching, 0.5 * step, step)
        # a problem whose line search collapsed keeps its last iterate
        stuck = searching
        if stuck.any():
            retry = stuck & ~fresh
            H[retry] = np.eye(P)
            fresh[retry] = True
            failed |= stuck & ~retry
        moved = active & ~stuck
        s = x_new - x
        y = g_new - g
        sy = np.sum(s * y, axis=1)
        upd = moved & (sy > 1e-12 * np.linalg.norm(s, axis=1) * np.linalg.norm(y, axis=1))
        if upd.any():
            first = upd & fresh
            if first.any():
                yy = np.sum(y[first] ** 2, axis=1)
                H[first] = np.eye(P) * (sy[first] / yy)[:, None, None]
            rho = 1.0 / sy[upd]
            Hu, su, yu = H[upd], s[upd], y[upd]
            Hy = np.einsum("bij,bj->bi", Hu, yu)
            yHy = np.sum(yu * Hy, axis=1)
            Hu = (Hu - rho[:, None, None] * (su[:, :, None] * Hy[:, None, :] + Hy[:, :, None] * su[:, None, :])
                  + (rho ** 2 * yHy + rho)[:, None, None] * su[:, :, None] * su[:, None, :])
            H[upd] = Hu
            fresh[upd] = False
        x, f, g = x_new, f_new, g_new
        converged |= moved & (np.max(np.abs(g), axis=1) < gtol)
        # a vanishing step means no further progress is possible
        converged |= moved & (np.max(np.abs(s), axis=1) <= 1e-14 * (1.0 + np.max(np.abs(x), axis=1)))
    return BatchResult(x, f, g, converged, failed, it, evals)
