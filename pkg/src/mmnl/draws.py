"""Standard-normal simulation draws: pseudo-random and MLHS.

Every generator is a pure function of ``(D, K, seed)``. Seeds may be plain
integers or tuples; tuples are turned into a :class:`numpy.random.SeedSequence`
with a spawn key, which gives the counter-based streams used for
per-individual draw batches (``seed=(base, n)`` is reproducible no matter in
which order individuals are visited).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import special

SeedLike = Union[int, Sequence[int], np.random.SeedSequence]


def make_rng(seed: SeedLike, *keys: int) -> np.random.Generator:
    """Generator for ``seed`` extended by an integer counter ``keys``."""
    if isinstance(seed, np.random.SeedSequence):
        base = seed
        key = tuple(base.spawn_key) + tuple(int(k) for k in keys)
        return np.random.default_rng(
            np.random.SeedSequence(base.entropy, spawn_key=key)
        )
    if isinstance(seed, (tuple, list)):
        head, *rest = seed
        keys = tuple(rest) + tuple(keys)
        seed = head
    return np.random.default_rng(
        np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    )


@dataclass(frozen=True)
class DrawBatch:
    """``D x K`` matrix of standard-normal deviates."""

    draws: np.ndarray
    kind: str
    seed: object

    def __post_init__(self):
        if self.draws.ndim != 2 or self.draws.shape[0] < 1:
            raise ValueError("a draw batch needs shape (D, K) with D >= 1")
        if not np.all(np.isfinite(self.draws)):
            raise ValueError("draw batch contains non-finite entries")
        self.draws.setflags(write=False)

    @property
    def num_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def dim(self) -> int:
        return self.draws.shape[1]


def normal_inverse_cdf(u):
    """Standard normal quantile function on the open unit interval."""
    u = np.asarray(u, dtype=float)
    if np.any(~(u > 0.0)) or np.any(~(u < 1.0)):
        raise ValueError("normal_inverse_cdf is defined on the open interval (0, 1)")
    out = special.ndtri(u)
    return float(out) if out.ndim == 0 else out


def mlhs_uniforms(D: int, K: int, rng: np.random.Generator, shift=None) -> np.ndarray:
    """Shifted, independently shuffled Latin hypercube points in ``[0, 1)``.

    Column ``k`` holds ``(i + s_k) / D`` for ``i = 0..D-1`` in random order.
    ``shift`` fixes the ``s_k`` (scalar or length ``K``) instead of drawing them.
    """
    if D < 1 or K < 1:
        raise ValueError("MLHS needs D >= 1 and K >= 1")
    if shift is None:
        shift = rng.uniform(size=K)
    shift = np.broadcast_to(np.asarray(shift, dtype=float), (K,))
    grid = np.arange(D, dtype=float)[:, None]
    u = (grid + shift[None, :]) / D
    for k in range(K):
        u[:, k] = u[rng.permutation(D), k]
    return u


def mlhs_normal_draws(D: int, K: int, seed: SeedLike, shift=None) -> DrawBatch:
    """Modified Latin hypercube draws mapped to standard normal deviates."""
    rng = make_rng(seed)
    u = mlhs_uniforms(D, K, rng, shift=shift)
    # a shift of exactly 0 puts a point on u = 0
    u = np.clip(u, 1e-300, None)
    return DrawBatch(special.ndtri(u), "mlhs", seed)


def pseudo_normal_draws(D: int, K: int, seed: SeedLike) -> DrawBatch:
    """I.i.d. standard normal draws."""
    if D < 1 or K < 1:
        raise ValueError("pseudo-random draws need D >= 1 and K >= 1")
    return DrawBatch(make_rng(seed).standard_normal((D, K)), "pseudo", seed)


def individual_draws(
    N: int, D: int, K: int, seed: SeedLike, kind: str = "mlhs"
) -> np.ndarray:
    """Stack of per-individual batches, shape ``(N, D, K)``.

    Batch ``n`` is generated from the counter stream ``(seed, n)``.
    """
    make = mlhs_normal_draws if kind == "mlhs" else pseudo_normal_draws
    out = np.empty((N, D, K))
    base = seed if isinstance(seed, (tuple, list)) else (seed,)
    for n in range(N):
        out[n] = make(D, K, tuple(base) + (n,)).draws
    return out
