"""GMM estimation when key variables are missing and recoverable from auxiliary data.

Public surface: dataset handling (:mod:`auxgmm.data`), series bases
(:mod:`auxgmm.sieve`), moment models (:mod:`auxgmm.moments`),
selection-probability fits (:mod:`auxgmm.propensity`), the estimator families
(:mod:`auxgmm.estimators`), variance bounds and influence values
(:mod:`auxgmm.bounds`), and simulation tooling (:mod:`auxgmm.simulate`).
"""

__version__ = "0.1.0"

from .data import Case, ColumnSpec, Dataset, load_dataset, marginal_p, split_samples
from .estimators import Estimate, EstimatorConfig, Family, OptimizerSpec, PropensitySpec, estimate
from .moments import cdf_moment, linreg_moment, mean_moment
from .sieve import BasisKind, BasisSpec, Interaction
from .simulate import DGP_A, DGP_B, PRESETS, DGPSpec, exact_oracle_discrete, generate, run_monte_carlo

__all__ = [
    "Case", "ColumnSpec", "Dataset", "load_dataset", "marginal_p", "split_samples",
    "Estimate", "EstimatorConfig", "Family", "OptimizerSpec", "PropensitySpec", "estimate",
    "cdf_moment", "linreg_moment", "mean_moment",
    "BasisKind", "BasisSpec", "Interaction",
    "DGP_A", "DGP_B", "PRESETS", "DGPSpec", "exact_oracle_discrete", "generate", "run_monte_carlo",
    "__version__",
]
