"""Panel choice data and the semi-synthetic simulation scenarios.

Attributes are stored occasion-major: ``x_fixed`` has shape ``(O, J, L)`` and
``x_random`` ``(O, J, K)`` where ``O`` is the total number of choice
occasions. Occasions are sorted by decision-maker and ``individual`` maps each
occasion to its decision-maker. Choices are 0-based alternative indices.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .draws import make_rng
from .kernel import choice_probabilities, utilities

SCHEMA_VERSION = 1

# True population parameters of the four simulation scenarios.
SCENARIO_ALPHA = np.array([-0.3280, -0.3390, -0.3900, -0.9460, -0.5840, -1.2790, -0.4520])
SCENARIO_ZETA = np.array([-1.0430, 1.5700, 0.7720, -0.5260])
SCENARIO_SIGMA = np.array([1.1305, 1.0328, 1.1673, 1.2225])
PSI_LOW = np.array(
    [
        [1.0000, -0.2398, -0.1834, 0.2229],
        [-0.2398, 1.0000, 0.2550, -0.2703],
        [-0.1834, 0.2550, 1.0000, -0.3119],
        [0.2229, -0.2703, -0.3119, 1.0000],
    ]
)
PSI_HIGH = np.array(
    [
        [1.0000, -0.5000, -0.5000, 0.4000],
        [-0.5000, 1.0000, 0.4000, -0.4000],
        [-0.5000, 0.4000, 1.0000, -0.4000],
        [0.4000, -0.4000, -0.4000, 1.0000],
    ]
)

# Alternatives carry a fuel type; the second one (diesel) is the base level
# of the six fuel-type dummies. The seventh fixed column is a continuous
# price-like attribute.
FUEL_DUMMY_ALTERNATIVES = (0, 2, 3, 4, 5, 6)

# Attribute scale per scenario giving an expected error rate of 0.5 for the
# default attribute generator (see calibrate_attribute_scale).
ATTRIBUTE_SCALE = {1: 0.5427, 2: 0.5602, 3: 0.5096, 4: 0.5241}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: int
    num_individuals: int = 500
    num_occasions: int = 5
    seed: int = 0
    num_alternatives: int = 7
    attribute_scale: Optional[float] = None
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.scenario_id not in (1, 2, 3, 4):
            raise ValueError(f"unknown scenario_id {self.scenario_id!r}; expected 1-4")
        if self.num_individuals < 1 or self.num_occasions < 0:
            raise ValueError("need num_individuals >= 1 and num_occasions >= 0")
        if self.num_alternatives < 1:
            raise ValueError("need at least one alternative per choice set")

    @property
    def has_fixed(self) -> bool:
        return self.scenario_id in (3, 4)

    @property
    def scale(self) -> float:
        if self.attribute_scale is not None:
            return float(self.attribute_scale)
        return ATTRIBUTE_SCALE[self.scenario_id]


@dataclass
class TruePopulation:
    alpha: np.ndarray
    zeta: np.ndarray
    sigma: np.ndarray
    psi: np.ndarray
    omega: np.ndarray
    betas: np.ndarray
    sample_mean: np.ndarray
    sample_cov: np.ndarray

    @classmethod
    def from_parameters(cls, alpha, zeta, sigma, psi, num_individuals, rng):
        """Draw ``num_individuals`` taste vectors from ``N(zeta, Omega)``."""
        alpha = np.asarray(alpha, dtype=float)
        zeta = np.asarray(zeta, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        psi = np.asarray(psi, dtype=float)
        omega = np.diag(sigma) @ psi @ np.diag(sigma)
        # Cholesky fails for sigma = 0; use a symmetric square root instead
        evals, evecs = np.linalg.eigh(omega)
        root = evecs * np.sqrt(np.clip(evals, 0.0, None))
        betas = zeta + rng.standard_normal((num_individuals, zeta.size)) @ root.T
        return cls.from_betas(alpha, zeta, sigma, psi, betas)

    @classmethod
    def from_betas(cls, alpha, zeta, sigma, psi, betas):
        sigma = np.asarray(sigma, dtype=float)
        psi = np.asarray(psi, dtype=float)
        betas = np.asarray(betas, dtype=float)
        mean = betas.mean(axis=0)
        dev = betas - mean
        return cls(
            alpha=np.asarray(alpha, dtype=float),
            zeta=np.asarray(zeta, dtype=float),
            sigma=sigma,
            psi=psi,
            omega=np.diag(sigma) @ psi @ np.diag(sigma),
            betas=betas,
            sample_mean=mean,
            sample_cov=dev.T @ dev / betas.shape[0],
        )

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "zeta": self.zeta.tolist(),
            "sigma": self.sigma.tolist(),
            "psi": self.psi.tolist(),
            "betas": self.betas.tolist(),
        }

    @classmethod
    def from_json(cls, blob: dict) -> "TruePopulation":
        betas = np.asarray(blob["betas"], dtype=float)
        k = len(blob["zeta"])
        return cls.from_betas(
            blob["alpha"], blob["zeta"], blob["sigma"], blob["psi"], betas.reshape(-1, k)
        )


@dataclass
class ChoiceDataset:
    """Panel of choices; see the module docstring for array layouts."""

    individual: np.ndarray
    x_fixed: np.ndarray
    x_random: np.ndarray
    choices: np.ndarray
    num_individuals: int
    truth: Optional[TruePopulation] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.individual = np.asarray(self.individual, dtype=np.int64)
        self.choices = np.asarray(self.choices, dtype=np.int64)
        self.x_fixed = np.asarray(self.x_fixed, dtype=float)
        self.x_random = np.asarray(self.x_random, dtype=float)
        O = self.individual.shape[0]
        if self.x_random.ndim != 3 or self.x_fixed.ndim != 3:
            raise ValueError("attribute arrays must have shape (occasions, J, columns)")
        if self.x_random.shape[0] != O or self.x_fixed.shape[0] != O:
            raise ValueError("attribute rows inconsistent with the number of occasions")
        if self.x_fixed.shape[1] != self.x_random.shape[1]:
            raise ValueError("fixed and random attributes disagree on J")
        if self.x_random.shape[2] < 1:
            raise ValueError("at least one random-parameter attribute is required")
        if self.choices.shape != (O,):
            raise ValueError("one choice per occasion is required")
        J = self.x_random.shape[1]
        if O and (self.choices.min() < 0 or self.choices.max() >= J):
            raise ValueError(f"choices must lie in 0..{J - 1}")
        if O and np.any(np.diff(self.individual) < 0):
            raise ValueError("occasions must be sorted by individual")
        if O and (self.individual.min() < 0 or self.individual.max() >= self.num_individuals):
            raise ValueError("individual index out of range")
        if not (np.all(np.isfinite(self.x_fixed)) and np.all(np.isfinite(self.x_random))):
            raise ValueError("attributes must be finite")

    @property
    def num_occasions(self) -> int:
        return self.individual.shape[0]

    @property
    def num_alternatives(self) -> int:
        return self.x_random.shape[1]

    @property
    def n_fixed(self) -> int:
        return self.x_fixed.shape[2]

    @property
    def n_random(self) -> int:
        return self.x_random.shape[2]

    @property
    def occasions_per_individual(self) -> np.ndarray:
        return np.bincount(self.individual, minlength=self.num_individuals)

    def individual_slice(self, n: int) -> slice:
        start = np.searchsorted(self.individual, n, side="left")
        stop = np.searchsorted(self.individual, n, side="right")
        return slice(int(start), int(stop))

    def subset(self, individuals) -> "ChoiceDataset":
        """Dataset restricted to ``individuals`` (renumbered 0..len-1)."""
        individuals = np.asarray(individuals, dtype=np.int64)
        lookup = np.full(self.num_individuals, -1)
        lookup[individuals] = np.arange(individuals.size)
        keep = lookup[self.individual] >= 0
        new_ind = lookup[self.individual[keep]]
        order = np.argsort(new_ind, kind="stable")
        return ChoiceDataset(
            new_ind[order],
            self.x_fixed[keep][order],
            self.x_random[keep][order],
            self.choices[keep][order],
            individuals.size,
        )

    def without_occasions(self) -> "ChoiceDataset":
        """Same individuals and attribute dimensions, no observed choices."""
        J = self.num_alternatives
        return ChoiceDataset(
            np.zeros(0, dtype=np.int64),
            np.zeros((0, J, self.n_fixed)),
            np.zeros((0, J, self.n_random)),
            np.zeros(0, dtype=np.int64),
            self.num_individuals,
        )

    def equals(self, other: "ChoiceDataset") -> bool:
        same = (
            self.num_individuals == other.num_individuals
            and np.array_equal(self.individual, other.individual)
            and np.array_equal(self.x_fixed, other.x_fixed)
            and np.array_equal(self.x_random, other.x_random)
            and np.array_equal(self.choices, other.choices)
        )
        if not same or (self.truth is None) != (other.truth is None):
            return False
        if self.truth is None:
            return True
        a, b = self.truth, other.truth
        return all(
            np.array_equal(getattr(a, f), getattr(b, f))
            for f in ("alpha", "zeta", "sigma", "psi", "betas")
        )


def build_true_population(config: ScenarioConfig) -> TruePopulation:
    """True parameters of the scenario plus realized individual tastes."""
    psi = PSI_LOW if config.scenario_id in (1, 3) else PSI_HIGH
    alpha = SCENARIO_ALPHA.copy() if config.has_fixed else np.zeros(0)
    rng = make_rng(config.seed, 0)
    return TruePopulation.from_parameters(
        alpha, SCENARIO_ZETA, SCENARIO_SIGMA, psi, config.num_individuals, rng
    )


def generate_attributes(config: ScenarioConfig, num_occasions: int, rng):
    """Synthetic attributes for ``num_occasions`` choice sets.

    Random-parameter columns are i.i.d. standard normal. Fixed-parameter
    columns (scenarios 3 and 4) are six fuel-type dummies plus one standard
    normal column. The continuous columns are multiplied by the scenario's
    attribute scale; the dummies stay 0/1.
    """
    J = config.num_alternatives
    K = SCENARIO_ZETA.size
    x_random = rng.standard_normal((num_occasions, J, K))
    if config.has_fixed:
        x_fixed = np.zeros((num_occasions, J, SCENARIO_ALPHA.size))
        for col, alt in enumerate(FUEL_DUMMY_ALTERNATIVES):
            if alt < J:
                x_fixed[:, alt, col] = 1.0
        x_fixed[:, :, -1] = rng.standard_normal((num_occasions, J))
    else:
        x_fixed = np.zeros((num_occasions, J, 0))
    s = config.scale
    x_fixed[:, :, -1:] *= s
    return x_fixed, s * x_random


def _simulate_choices(x_fixed, x_random, alpha, betas_per_occ, noise_scale, rng):
    v = utilities(x_fixed, alpha, x_random, betas_per_occ)
    eps = rng.gumbel(size=v.shape)
    return np.argmax(v + noise_scale * eps, axis=1)


def generate_dataset(config: ScenarioConfig, pop: TruePopulation) -> ChoiceDataset:
    """Simulate choices of ``pop``'s decision-makers with Gumbel disturbances."""
    N, T = config.num_individuals, config.num_occasions
    if pop.betas.shape[0] != N:
        raise ValueError("population size does not match the scenario config")
    individual = np.repeat(np.arange(N), T)
    x_fixed, x_random = generate_attributes(config, N * T, make_rng(config.seed, 1))
    choices = _simulate_choices(
        x_fixed, x_random, pop.alpha, pop.betas[individual],
        config.noise_scale, make_rng(config.seed, 2),
    )
    meta = {"scenario": config.scenario_id, "seed": config.seed, "attribute_scale": config.scale}
    return ChoiceDataset(individual, x_fixed, x_random, choices, N, truth=pop, metadata=meta)


def generate_validation_set(
    config: ScenarioConfig, pop: TruePopulation, num_individuals: int = 25
) -> ChoiceDataset:
    """Hold-out sample: ``num_individuals`` new decision-makers, one occasion each."""
    rng = make_rng(config.seed, 3)
    K = pop.zeta.size
    L = np.linalg.cholesky(pop.omega)
    betas = pop.zeta + rng.standard_normal((num_individuals, K)) @ L.T
    x_fixed, x_random = generate_attributes(config, num_individuals, rng)
    choices = _simulate_choices(x_fixed, x_random, pop.alpha, betas, config.noise_scale, rng)
    return ChoiceDataset(
        np.arange(num_individuals), x_fixed, x_random, choices, num_individuals,
        metadata={"scenario": config.scenario_id, "seed": config.seed, "role": "validation"},
    )


def measure_error_rate(dataset: ChoiceDataset, pop: TruePopulation) -> float:
    """Share of occasions where the choice differs from the deterministic best."""
    if pop.betas.shape != (dataset.num_individuals, dataset.n_random):
        raise ValueError("population tastes do not match the dataset dimensions")
    if pop.alpha.shape != (dataset.n_fixed,):
        raise ValueError("fixed tastes do not match the dataset dimensions")
    if dataset.num_occasions == 0:
        return 0.0
    v = utilities(dataset.x_fixed, pop.alpha, dataset.x_random, pop.betas[dataset.individual])
    return float(np.mean(np.argmax(v, axis=1) != dataset.choices))


def expected_error_rate(config: ScenarioConfig, scale: float, num_sets: int = 200_000,
                        seed: int = 12345) -> float:
    """Error rate implied by the logit kernel, averaged over attributes and tastes."""
    cfg = replace(config, attribute_scale=scale, seed=seed)
    psi = PSI_LOW if cfg.scenario_id in (1, 3) else PSI_HIGH
    rng = make_rng(seed, 7)
    alpha = SCENARIO_ALPHA if cfg.has_fixed else np.zeros(0)
    pop = TruePopulation.from_parameters(alpha, SCENARIO_ZETA, SCENARIO_SIGMA, psi, num_sets, rng)
    x_fixed, x_random = generate_attributes(cfg, num_sets, rng)
    v = utilities(x_fixed, pop.alpha, x_random, pop.betas)
    p = choice_probabilities(v)
    return float(1.0 - np.mean(p[np.arange(num_sets), np.argmax(v, axis=1)]))


def calibrate_attribute_scale(scenario_id: int, target: float = 0.5, tol: float = 1e-4,
                              num_sets: int = 200_000) -> float:
    """Attribute scale whose expected error rate equals ``target`` (bisection)."""
    config = ScenarioConfig(scenario_id)
    lo, hi = 1e-3, 10.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        # error rate decreases as attributes (and utility differences) grow
        if expected_error_rate(config, mid, num_sets) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# persistence

_BASE_COLUMNS = ["individual", "occasion", "alternative", "chosen"]


def save_dataset(dataset: ChoiceDataset, path) -> None:
    """Write ``path`` (long-format CSV) and ``path.json`` (metadata sidecar)."""
    path = Path(path)
    L, K, J = dataset.n_fixed, dataset.n_random, dataset.num_alternatives
    fixed_cols = [f"xf{l + 1}" for l in range(L)]
    random_cols = [f"xr{k + 1}" for k in range(K)]
    occ_index = np.zeros(dataset.num_occasions, dtype=np.int64)
    for n in range(dataset.num_individuals):
        sl = dataset.individual_slice(n)
        occ_index[sl] = np.arange(sl.stop - sl.start)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_BASE_COLUMNS + fixed_cols + random_cols)
        for o in range(dataset.num_occasions):
            for j in range(J):
                row = [dataset.individual[o], occ_index[o], j, int(dataset.choices[o] == j)]
                row += [repr(float(x)) for x in dataset.x_fixed[o, j]]
                row += [repr(float(x)) for x in dataset.x_random[o, j]]
                w.writerow(row)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "num_individuals": dataset.num_individuals,
        "num_alternatives": J,
        "fixed_columns": fixed_cols,
        "random_columns": random_cols,
        "metadata": dataset.metadata,
    }
    if dataset.truth is not None:
        meta["truth"] = dataset.truth.to_json()
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))


class SchemaError(ValueError):
    """A dataset file violates the documented layout."""


def load_dataset(path) -> ChoiceDataset:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(
            f"schema version {meta.get('schema_version')!r} != supported {SCHEMA_VERSION}"
        )
    fixed_cols, random_cols = meta["fixed_columns"], meta["random_columns"]
    J = int(meta["num_alternatives"])
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _BASE_COLUMNS + fixed_cols + random_cols:
            raise SchemaError("CSV header does not match the metadata column partition")
        rows = [r for r in reader if r]
    # group rows into occasions by (individual, occasion), preserving file order
    occasions: dict = {}
    for r in rows:
        occasions.setdefault((int(r[0]), int(r[1])), []).append(r)
    O = len(occasions)
    L, K = len(fixed_cols), len(random_cols)
    individual = np.empty(O, dtype=np.int64)
    choices = np.empty(O, dtype=np.int64)
    x_fixed = np.empty((O, J, L))
    x_random = np.empty((O, J, K))
    for o, ((n, _), occ_rows) in enumerate(occasions.items()):
        if len(occ_rows) != J:
            raise SchemaError(
                f"occasion of individual {n} has {len(occ_rows)} alternatives, expected {J}"
            )
        alts = [int(r[2]) for r in occ_rows]
        if sorted(alts) != list(range(J)):
            raise SchemaError(f"alternative indices of individual {n} are not 0..{J - 1}")
        chosen = [int(r[2]) for r in occ_rows if r[3] == "1"]
        if len(chosen) != 1:
            raise SchemaError(f"occasion of individual {n} must have exactly one chosen row")
        individual[o] = n
        choices[o] = chosen[0]
        for r in occ_rows:
            j = int(r[2])
            vals = [float(x) for x in r[4:]]
            x_fixed[o, j] = vals[:L]
            x_random[o, j] = vals[L:]
    truth = None
    if "truth" in meta:
        truth = TruePopulation.from_json(meta["truth"])
    return ChoiceDataset(
        individual, x_fixed, x_random, choices, int(meta["num_individuals"]),
        truth=truth, metadata=meta.get("metadata", {}),
    )
