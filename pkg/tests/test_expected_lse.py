import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, load_fixture, relative_error
from mmnl.draws import mlhs_normal_draws
from mmnl.expected_lse import (
    GaussianFactor,
    NonPositiveDefiniteError,
    delta_terms,
    elise_delta,
    elise_mji_bound,
    elise_qmc,
    initial_aux,
    mji_aux_map,
    mji_refresh_aux,
    mji_refresh_occasion,
    mji_terms,
    qmc_terms,
)
from mmnl.kernel import choice_probabilities, log_sum_exp

FIXTURES = load_fixture("elise_fixtures.json")


def factors(fx):
    return (GaussianFactor(fx["mu_alpha"], fx["cov_alpha"]), GaussianFactor(fx["mu_beta"], fx["cov_beta"]))


def qmc_points(L, K, D=64, seed=0):
    xi = mlhs_normal_draws(D, L + K, seed).draws
    return xi[:, :L], xi[:, L:]


def converged_aux(fx):
    fa, fb = factors(fx)
    J = len(fx["x_random"])
    return mji_refresh_occasion(fx["x_fixed"], fx["x_random"], fa, fb, np.full(J, 1.0 / J)).aux


@pytest.mark.parametrize("fx", FIXTURES, ids=[f["name"] for f in FIXTURES])
def test_delta_matches_oracle(fx):
    fa, fb = factors(fx)
    assert abs(elise_delta(fx["x_fixed"], fx["x_random"], fa, fb) - fx["oracle"]) < 0.02


@pytest.mark.parametrize("fx", FIXTURES, ids=[f["name"] for f in FIXTURES])
def test_qmc_matches_oracle(fx):
    fa, fb = factors(fx)
    xa, xb = qmc_points(fa.dim, fb.dim)
    assert abs(elise_qmc(fx["x_fixed"], fx["x_random"], fa, fb, xa, xb) - fx["oracle"]) < 0.02


@pytest.mark.parametrize("fx", FIXTURES, ids=[f["name"] for f in FIXTURES])
def test_mji_bound_above_oracle(fx):
    fa, fb = factors(fx)
    bound = elise_mji_bound(fx["x_fixed"], fx["x_random"], fa, fb, converged_aux(fx))
    assert bound >= fx["oracle"] - 3 * fx["oracle_se"]


@pytest.mark.parametrize("fx", FIXTURES, ids=[f["name"] for f in FIXTURES])
def test_qmc_is_unbiased_across_mlhs_seeds(fx):
    fa, fb = factors(fx)
    errs = []
    for seed in range(30):
        xa, xb = qmc_points(fa.dim, fb.dim, seed=seed)
        errs.append(elise_qmc(fx["x_fixed"], fx["x_random"], fa, fb, xa, xb) - fx["oracle"])
    errs = np.asarray(errs)
    assert abs(errs.mean()) < 3 * errs.std(ddof=1) / np.sqrt(errs.size) + 3 * fx["oracle_se"]


def test_fixture_grid_covers_required_shapes():
    shapes = {(len(f["x_random"]), len(f["mu_beta"]), len(f["mu_alpha"])) for f in FIXTURES}
    assert len(FIXTURES) == 10
    assert {j for j, _, _ in shapes} == {2, 3, 7}
    assert {k for _, k, _ in shapes} == {1, 2, 4}
    assert {l for _, _, l in shapes} == {0, 2}


def random_occasion(rng, J=4, K=3, L=2):
    xf = rng.normal(size=(J, L))
    xr = rng.normal(size=(J, K))
    fa = GaussianFactor(rng.normal(size=L), 0.1 * np.eye(L))
    fb = GaussianFactor(rng.normal(size=K), 0.3 * np.eye(K) + 0.05)
    return xf, xr, fa, fb


def test_zero_covariance_gives_lse_at_means():
    rng = np.random.default_rng(1)
    xf, xr, fa, fb = random_occasion(rng)
    fa0 = GaussianFactor(fa.mean, np.zeros((2, 2)))
    fb0 = GaussianFactor(fb.mean, np.zeros((3, 3)))
    v = xf @ fa.mean + xr @ fb.mean
    xa, xb = qmc_points(2, 3, D=16)
    assert elise_delta(xf, xr, fa0, fb0) == pytest.approx(log_sum_exp(v), abs=1e-14)
    assert elise_qmc(xf, xr, fa0, fb0, xa, xb) == pytest.approx(log_sum_exp(v), abs=1e-12)
    p = choice_probabilities(v)
    assert elise_mji_bound(xf, xr, fa0, fb0, p) == pytest.approx(log_sum_exp(v), abs=1e-12)
    # any other simplex point gives a larger value
    assert elise_mji_bound(xf, xr, fa0, fb0, np.full(4, 0.25)) >= log_sum_exp(v) - 1e-12


def test_single_alternative_is_exact_for_all_treatments():
    rng = np.random.default_rng(2)
    xf, xr, fa, fb = random_occasion(rng, J=1)
    exact = float(xf[0] @ fa.mean + xr[0] @ fb.mean)
    xa, xb = qmc_points(2, 3, D=32)
    assert elise_delta(xf, xr, fa, fb) == pytest.approx(exact, abs=1e-12)
    assert elise_qmc(xf, xr, fa, fb, xa, xb) == pytest.approx(exact + float(
        np.mean(xa @ fa.chol.T @ xf[0] + xb @ fb.chol.T @ xr[0])), abs=1e-12)
    assert elise_mji_bound(xf, xr, fa, fb, [1.0]) == pytest.approx(exact, abs=1e-12)


def test_delta_shift_invariance():
    rng = np.random.default_rng(3)
    xf, xr, fa, fb = random_occasion(rng)
    cf, cr = rng.normal(size=2), rng.normal(size=3)
    shifted = elise_delta(xf + cf, xr + cr, fa, fb)
    assert shifted == pytest.approx(elise_delta(xf, xr, fa, fb) + cf @ fa.mean + cr @ fb.mean, abs=1e-12)


def test_delta_formula_by_hand():
    xr = np.array([[1.0, 0.0], [0.0, 1.0]])
    fb = GaussianFactor([0.3, -0.2], [[0.5, 0.1], [0.1, 0.4]])
    p = choice_probabilities(xr @ fb.mean)
    H = np.diag(p) - np.outer(p, p)
    expected = log_sum_exp(xr @ fb.mean) + 0.5 * np.trace(xr.T @ H @ xr @ fb.cov)
    assert elise_delta(np.zeros((2, 0)), xr, GaussianFactor.empty(), fb) == pytest.approx(expected, abs=1e-14)


def test_factor_validation():
    with pytest.raises(NonPositiveDefiniteError):
        GaussianFactor([0.0, 0.0], [[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(NonPositiveDefiniteError):
        GaussianFactor([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        elise_mji_bound(np.zeros((2, 0)), np.ones((2, 1)), GaussianFactor.empty(),
                        GaussianFactor([0.0], [[1.0]]), [0.7, 0.7])


def test_aux_identical_alternatives_is_uniform():
    xr = np.tile([[0.4, -1.0]], (5, 1))
    fb = GaussianFactor([1.0, 0.5], [[0.6, 0.2], [0.2, 0.3]])
    start = np.array([0.5, 0.2, 0.1, 0.1, 0.1])
    res = mji_refresh_occasion(np.zeros((5, 0)), xr, GaussianFactor.empty(), fb, start)
    assert res.converged
    np.testing.assert_allclose(res.aux, 0.2, atol=1e-8)


def test_aux_without_variance_is_softmax():
    rng = np.random.default_rng(4)
    xf, xr, fa, fb = random_occasion(rng)
    fa0 = GaussianFactor(fa.mean, np.zeros((2, 2)))
    fb0 = GaussianFactor(fb.mean, np.zeros((3, 3)))
    res = mji_refresh_occasion(xf, xr, fa0, fb0, np.full(4, 0.25))
    np.testing.assert_allclose(res.aux, choice_probabilities(xf @ fa.mean + xr @ fb.mean), atol=1e-8)


@pytest.mark.parametrize("fx", FIXTURES[:5], ids=[f["name"] for f in FIXTURES[:5]])
def test_aux_fixed_point_multistart(fx):
    fa, fb = factors(fx)
    J = len(fx["x_random"])
    xf = np.asarray(fx["x_fixed"]).reshape(1, J, -1)
    xr = np.asarray(fx["x_random"])[None]
    rng = np.random.default_rng(5)
    ref = converged_aux(fx)
    for _ in range(3):
        start = rng.dirichlet(np.ones(J))
        # independent plain damped iteration with a tighter tolerance
        a = start.copy()
        for _ in range(5000):
            new = 0.5 * a + 0.5 * mji_aux_map(xf, xr, fa.mean, fa.cov, fb.mean[None], fb.cov[None], a[None])[0]
            if np.max(np.abs(new - a)) < 1e-13:
                break
            a = new
        np.testing.assert_allclose(a, ref, atol=1e-6)
    residual = ref - mji_aux_map(xf, xr, fa.mean, fa.cov, fb.mean[None], fb.cov[None], ref[None])[0]
    assert np.max(np.abs(residual)) < 1e-7


def test_aux_nonconvergence_is_reported(caplog):
    rng = np.random.default_rng(6)
    xf, xr, fa, fb = random_occasion(rng)
    res = mji_refresh_occasion(xf, xr, fa, fb, np.full(4, 0.25), max_sweeps=1)
    assert not res.converged and res.sweeps == 1
    assert np.isclose(res.aux.sum(), 1.0)
    assert "stopped after" in caplog.text


# -- gradients of the batched terms against central differences --


def _batch(rng, O=3, J=4, K=2, L=2):
    xf = rng.normal(size=(O, J, L))
    xr = rng.normal(size=(O, J, K))
    mu_a = rng.normal(size=L)
    A = rng.normal(size=(L, L))
    cov_a = 0.2 * A @ A.T + 0.1 * np.eye(L)
    mu_b = rng.normal(size=(O, K))
    B = rng.normal(size=(O, K, K))
    cov_b = 0.2 * B @ np.swapaxes(B, 1, 2) + 0.1 * np.eye(K)
    return xf, xr, mu_a, cov_a, mu_b, cov_b


@pytest.mark.parametrize("treatment", ["delta", "mji"])
@pytest.mark.parametrize("seed", range(5))
def test_covariance_treatment_gradients(treatment, seed):
    rng = np.random.default_rng(seed)
    xf, xr, mu_a, cov_a, mu_b, cov_b = _batch(rng)
    aux = rng.dirichlet(np.ones(4), size=3)

    def terms(mu_a, cov_a, mu_b, cov_b, grad=False):
        if treatment == "delta":
            return delta_terms(xf, xr, mu_a, cov_a, mu_b, cov_b, grad)
        return mji_terms(xf, xr, mu_a, cov_a, mu_b, cov_b, aux, grad)

    t = terms(mu_a, cov_a, mu_b, cov_b, True)
    total = lambda **kw: terms(**{"mu_a": mu_a, "cov_a": cov_a, "mu_b": mu_b, "cov_b": cov_b, **kw}).value.sum()
    assert relative_error(t.grad_mu_alpha.sum(0), central_difference(lambda m: total(mu_a=m), mu_a)) < 1e-6
    assert relative_error(t.grad_mu_beta, central_difference(lambda m: total(mu_b=m), mu_b)) < 1e-6
    # covariance gradients are taken treating entries as free (not symmetrised)
    assert relative_error(t.grad_cov_alpha.sum(0), central_difference(lambda c: total(cov_a=c), cov_a)) < 1e-6
    assert relative_error(t.grad_cov_beta, central_difference(lambda c: total(cov_b=c), cov_b)) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_qmc_gradients(seed):
    rng = np.random.default_rng(seed)
    xf, xr, mu_a, cov_a, mu_b, cov_b = _batch(rng)
    D = 8
    xi_a = rng.normal(size=(D, 2))
    xi_b = rng.normal(size=(3, D, 2))
    ca = np.linalg.cholesky(cov_a)
    cb = np.linalg.cholesky(cov_b)

    def value(mu_a, ca, mu_b, cb, grad=False):
        a = mu_a + xi_a @ ca.T
        b = mu_b[:, None, :] + np.einsum("okl,odl->odk", cb, xi_b)
        return qmc_terms(xf, xr, a, xi_a, b, xi_b, grad)

    t = value(mu_a, ca, mu_b, cb, True)
    total = lambda **kw: value(**{"mu_a": mu_a, "ca": ca, "mu_b": mu_b, "cb": cb, **kw}).value.sum()
    assert relative_error(t.grad_mu_alpha.sum(0), central_difference(lambda m: total(mu_a=m), mu_a)) < 1e-6
    assert relative_error(t.grad_mu_beta, central_difference(lambda m: total(mu_b=m), mu_b)) < 1e-6
    assert relative_error(t.grad_chol_alpha.sum(0), central_difference(lambda c: total(ca=c), ca)) < 1e-6
    assert relative_error(t.grad_chol_beta, central_difference(lambda c: total(cb=c), cb)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_mji_bound_dominates_qmc_estimate(J, K, seed):
    # the bound holds for every Gaussian, so it must exceed a large-sample estimate of E-LSE
    rng = np.random.default_rng(seed)
    xr = rng.normal(size=(J, K))
    B = rng.normal(size=(K, K))
    fb = GaussianFactor(rng.normal(size=K), 0.5 * B @ B.T + 0.05 * np.eye(K))
    aux = rng.dirichlet(np.ones(J))
    xi = rng.standard_normal((20000, K))
    mc = log_sum_exp((fb.mean + xi @ fb.chol.T) @ xr.T).mean()
    se = log_sum_exp((fb.mean + xi @ fb.chol.T) @ xr.T).std() / np.sqrt(20000)
    assert elise_mji_bound(np.zeros((J, 0)), xr, GaussianFactor.empty(), fb, aux) >= mc - 4 * se


def test_batched_aux_refresh_matches_single():
    rng = np.random.default_rng(9)
    xf, xr, mu_a, cov_a, mu_b, cov_b = _batch(rng)
    res = mji_refresh_aux(xf, xr, mu_a, cov_a, mu_b, cov_b, initial_aux(3, 4))
    for o in range(3):
        one = mji_refresh_occasion(xf[o], xr[o], GaussianFactor(mu_a, cov_a),
                                   GaussianFactor(mu_b[o], cov_b[o]), np.full(4, 0.25))
        np.testing.assert_allclose(res.aux[o], one.aux, atol=1e-9)
