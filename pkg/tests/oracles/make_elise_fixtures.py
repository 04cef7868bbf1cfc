"""Brute-force Monte Carlo oracle for the expected log-sum-exp fixtures.

Writes tests/fixtures/elise_fixtures.json. Uses only numpy/scipy, not the
package, so the committed values are independent of the code under test.

    python tests/oracles/make_elise_fixtures.py
"""

import json
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from scipy.stats import wishart

SHAPES = [  # (J, K, L)
    (2, 2, 0), (2, 1, 0), (3, 1, 2), (3, 2, 0), (3, 4, 2),
    (7, 1, 0), (7, 2, 2), (7, 4, 0), (7, 4, 2), (2, 4, 2),
]
DRAWS = 1_000_000
CHUNK = 100_000


def random_cov(dim, scale, rng):
    if dim == 0:
        return np.zeros((0, 0))
    return wishart.rvs(df=dim + 4, scale=np.eye(dim) * scale / (dim + 4), random_state=rng).reshape(dim, dim)


def oracle(xf, xr, mu_a, cov_a, mu_b, cov_b, rng):
    L, K = mu_a.size, mu_b.size
    mean = np.concatenate([mu_a, mu_b])
    cov = np.zeros((L + K, L + K))
    cov[:L, :L], cov[L:, L:] = cov_a, cov_b
    x = np.concatenate([xf, xr], axis=1)
    root = np.linalg.cholesky(cov)
    total = total_sq = 0.0
    for _ in range(DRAWS // CHUNK):
        gamma = mean + rng.standard_normal((CHUNK, L + K)) @ root.T
        g = logsumexp(gamma @ x.T, axis=1)
        total += g.sum()
        total_sq += (g ** 2).sum()
    m = total / DRAWS
    sd = np.sqrt(total_sq / DRAWS - m ** 2)
    return m, sd / np.sqrt(DRAWS)


def main():
    rng = np.random.default_rng(20240601)
    fixtures = []
    for i, (J, K, L) in enumerate(SHAPES):
        xf = 0.55 * rng.standard_normal((J, L))
        xr = 0.55 * rng.standard_normal((J, K))
        mu_a = rng.normal(0.0, 0.8, L)
        mu_b = rng.normal(0.0, 1.0, K)
        cov_a = random_cov(L, 0.05, rng)
        cov_b = random_cov(K, 0.6, rng)
        value, se = oracle(xf, xr, mu_a, cov_a, mu_b, cov_b, np.random.default_rng(1000 + i))
        fixtures.append({
            "name": f"J{J}_K{K}_L{L}", "x_fixed": xf.tolist(), "x_random": xr.tolist(),
            "mu_alpha": mu_a.tolist(), "cov_alpha": cov_a.tolist(),
            "mu_beta": mu_b.tolist(), "cov_beta": cov_b.tolist(),
            "oracle": value, "oracle_se": se, "draws": DRAWS,
        })
        print(f"{fixtures[-1]['name']}: {value:.6f} +- {se:.2e}")
    out = Path(__file__).resolve().parents[1] / "fixtures" / "elise_fixtures.json"
    out.write_text(json.dumps(fixtures, indent=1) + "\n")


if __name__ == "__main__":
    main()
