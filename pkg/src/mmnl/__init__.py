"""Mixed multinomial logit estimation by variational Bayes, MCMC and simulated likelihood."""

from .data import (
    ChoiceDataset,
    ScenarioConfig,
    SchemaError,
    TruePopulation,
    build_true_population,
    generate_dataset,
    generate_validation_set,
    load_dataset,
    save_dataset,
)
from .evaluation import (
    PredictiveConfig,
    PredictiveReport,
    posterior_predictive_distribution,
    rmse,
    summarize_replications,
    true_choice_distribution,
    tvd,
)
from .expected_lse import GaussianFactor, elise_delta, elise_mji_bound, elise_qmc
from .experiment import ConfigError, ExperimentConfig, run_experiment, validate_config
from .mcmc import McmcConfig, McmcDraws, run_mcmc
from .msle import MslEstimate, MsleConfig, conditional_betas, fit_msle
from .vb import Hyperparameters, VariationalPosterior, VbConfig, VbResult, run_vb, vb_point_estimates

__version__ = "0.1.0"
