"""Covariate adjustment in cluster-randomized trials.

Mixed-model (ML / REML) and cluster-level ANCOVA estimators of the average
treatment effect, their model-based and sandwich variances, and a Monte Carlo
engine for comparing them.
"""

from .clanova import aggregate, fit_cluster_ancova, thm2_gap
from .csalg import CompoundSymmetry
from .dataio import SchemaMap, read_trial, write_report, write_trial
from .dgp import ScenarioConfig, gen_trial, icc_estimate
from .errors import (
    BadSize, ConfigError, CrtAncovaError, DegreesOfFreedom, EmptyDataset, InconsistentTreatment,
    InvalidPi, NoConvergedReps, ParseError, SingularCovariance, SingularDesign,
)
from .mmfit import ClusterRecord, MixedFit, TrialDataset, fit, fit_unadjusted
from .simkit import EstimatorSpec, MetricsTable, compare_ml_reml, run_replication, run_study
from .variance import (
    EstimateReport, estimate, influence_values, model_based_variance, sandwich_variance,
)

__version__ = "0.1.0"
