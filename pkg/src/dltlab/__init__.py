"""Learning from noisy labels with dynamic loss thresholds, at desk scale."""
from .config import TrainConfig, load_config, parse_config
from .data import Dataset, Provenance
from .errors import (ConfigError, ContractError, DegeneracyError, DltError, NumericError, ShapeError,
                     StateError)
from .estimator import GaussianMixture2, estimate_noise_rate, fit_gmm2, posterior_clean
from .ledger import LossLedger, ThresholdPolicy, quantile, selection_proportion
from .nn import MlpModel, SgdState
from .ssl import SslWeights
from .trainer import estimate_noise, evaluate, run_hard_sample_study, train

__version__ = "0.1.0"
