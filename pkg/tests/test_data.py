import numpy as np
import pytest

from conftest import FIXTURES
from mmnl.data import (
    ATTRIBUTE_SCALE,
    ChoiceDataset,
    ScenarioConfig,
    SchemaError,
    TruePopulation,
    _simulate_choices,
    build_true_population,
    expected_error_rate,
    generate_dataset,
    generate_validation_set,
    load_dataset,
    measure_error_rate,
    save_dataset,
)
from mmnl.draws import make_rng


def test_scenario_parameters():
    p1 = build_true_population(ScenarioConfig(1))
    np.testing.assert_array_equal(p1.zeta, [-1.0430, 1.5700, 0.7720, -0.5260])
    assert p1.alpha.size == 0
    p3 = build_true_population(ScenarioConfig(3))
    np.testing.assert_array_equal(p3.alpha, [-0.3280, -0.3390, -0.3900, -0.9460, -0.5840, -1.2790, -0.4520])
    p2 = build_true_population(ScenarioConfig(2))
    assert p2.psi[0, 1] == -0.5
    np.testing.assert_array_equal(np.diag(p2.psi), 1.0)
    for p in (p1, p2, p3):
        np.testing.assert_array_equal(p.omega, np.diag(p.sigma) @ p.psi @ np.diag(p.sigma))
        assert np.linalg.eigvalsh(p.psi).min() > 0
        assert np.linalg.eigvalsh(p.sample_cov).min() >= -1e-12


def test_unknown_scenario():
    with pytest.raises(ValueError):
        ScenarioConfig(5)


def test_dataset_shape_and_determinism():
    cfg = ScenarioConfig(1, 500, 5, seed=3)
    pop = build_true_population(cfg)
    d = generate_dataset(cfg, pop)
    assert d.num_occasions == 2500 and d.num_alternatives == 7
    assert d.num_occasions * d.num_alternatives == 17500
    assert d.n_fixed == 0 and d.n_random == 4
    assert d.equals(generate_dataset(cfg, build_true_population(cfg)))
    other = generate_dataset(ScenarioConfig(1, 500, 5, seed=4), build_true_population(ScenarioConfig(1, 500, 5, seed=4)))
    assert not d.equals(other)


def test_scenario3_fixed_columns_are_dummies_plus_continuous():
    cfg = ScenarioConfig(3, 50, 2, seed=1)
    d = generate_dataset(cfg, build_true_population(cfg))
    assert d.n_fixed == 7
    dummies = d.x_fixed[:, :, :6]
    assert set(np.unique(dummies)) <= {0.0, 1.0}
    # one base alternative without a dummy
    np.testing.assert_array_equal(dummies.sum(axis=2).min(axis=0), [1, 0, 1, 1, 1, 1, 1])


def test_error_rate_calibrated():
    cfg = ScenarioConfig(1, 500, 5, seed=11)
    pop = build_true_population(cfg)
    rate = measure_error_rate(generate_dataset(cfg, pop), pop)
    assert 0.40 <= rate <= 0.60
    for s in (1, 2, 3, 4):
        assert abs(expected_error_rate(ScenarioConfig(s), ATTRIBUTE_SCALE[s], num_sets=50_000) - 0.5) < 0.01


def test_error_rate_limits():
    cfg = ScenarioConfig(1, 50, 4, seed=2, noise_scale=1e-9)
    pop = build_true_population(cfg)
    assert measure_error_rate(generate_dataset(cfg, pop), pop) == 0.0
    one = ScenarioConfig(1, 30, 2, seed=2, num_alternatives=1)
    pop1 = build_true_population(one)
    assert measure_error_rate(generate_dataset(one, pop1), pop1) == 0.0


def test_sample_moments_converge():
    rng = make_rng(0)
    pop = build_true_population(ScenarioConfig(1))
    big = TruePopulation.from_parameters(pop.alpha, pop.zeta, pop.sigma, pop.psi, 100_000, rng)
    se = np.sqrt(np.diag(pop.omega) / 100_000)
    assert np.all(np.abs(big.sample_mean - pop.zeta) < 3 * se)
    # s.e. of a sample covariance entry: sqrt((O_ii O_jj + O_ij^2) / n)
    d = np.diag(pop.omega)
    se_cov = np.sqrt((np.outer(d, d) + pop.omega ** 2) / 100_000)
    assert np.all(np.abs(big.sample_cov - pop.omega) < 3.5 * se_cov)


def test_choice_shares_match_mixed_logit():
    # two alternatives, x = (1, 0), beta ~ N(0.5, 1.2^2); quadrature oracle 0.596087
    n = 400_000
    rng = make_rng(5)
    x = np.zeros((n, 2, 1))
    x[:, 0, 0] = 1.0
    betas = 0.5 + 1.2 * rng.standard_normal((n, 1))
    y = _simulate_choices(np.zeros((n, 2, 0)), x, np.zeros(0), betas, 1.0, rng)
    assert abs(np.mean(y == 0) - 0.5960873055121724) < 0.01


def test_validation_set():
    cfg = ScenarioConfig(3, 100, 5, seed=2)
    pop = build_true_population(cfg)
    v = generate_validation_set(cfg, pop)
    assert v.num_individuals == 25 and v.num_occasions == 25
    assert v.n_fixed == 7 and v.truth is None


def test_round_trip(tmp_path):
    cfg = ScenarioConfig(4, 12, 3, seed=9)
    d = generate_dataset(cfg, build_true_population(cfg))
    save_dataset(d, tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv")
    assert back.equals(d)
    np.testing.assert_array_equal(back.truth.sample_cov, d.truth.sample_cov)
    assert back.metadata["scenario"] == 4


def test_file_without_truth():
    d = load_dataset(FIXTURES / "no_truth.csv")
    assert d.truth is None
    assert d.num_individuals == 2 and d.num_occasions == 3
    np.testing.assert_array_equal(d.choices, [0, 2, 1])
    np.testing.assert_array_equal(d.occasions_per_individual, [2, 1])
    pop = build_true_population(ScenarioConfig(1, 2, 1))
    with pytest.raises(ValueError):
        measure_error_rate(d, pop)


def test_inconsistent_alternatives_rejected():
    with pytest.raises(SchemaError, match="alternatives"):
        load_dataset(FIXTURES / "bad_alternatives.csv")


def test_schema_version_checked(tmp_path):
    src = (FIXTURES / "no_truth.csv").read_text()
    meta = (FIXTURES / "no_truth.csv.json").read_text().replace('"schema_version": 1', '"schema_version": 99')
    (tmp_path / "d.csv").write_text(src)
    (tmp_path / "d.csv.json").write_text(meta)
    with pytest.raises(SchemaError, match="schema version"):
        load_dataset(tmp_path / "d.csv")


def test_dataset_invariants():
    ok = dict(individual=[0, 0, 1], x_fixed=np.zeros((3, 2, 0)), x_random=np.ones((3, 2, 1)),
              choices=[0, 1, 1], num_individuals=2)
    ChoiceDataset(**ok)
    with pytest.raises(ValueError):
        ChoiceDataset(**{**ok, "choices": [0, 2, 1]})
    with pytest.raises(ValueError):
        ChoiceDataset(**{**ok, "individual": [1, 0, 0]})
    with pytest.raises(ValueError):
        ChoiceDataset(**{**ok, "x_random": np.full((3, 2, 1), np.inf)})


def test_subset_and_empty():
    cfg = ScenarioConfig(1, 10, 3, seed=1)
    d = generate_dataset(cfg, build_true_population(cfg))
    s = d.subset([7, 2])
    assert s.num_individuals == 2 and s.num_occasions == 6
    np.testing.assert_array_equal(s.x_random[:3], d.x_random[d.individual_slice(7)])
    e = d.without_occasions()
    assert e.num_occasions == 0 and e.num_individuals == 10 and e.n_random == 4
