"""Varying-coefficient mixed models for clustered data.

Local linear estimation of coefficient curves, variance-component
estimates, plug-in bias and variance, Gumbel-calibrated simultaneous bands
and sup-norm tests, plus a simulation harness and a CSV/TOML driven
command line (``python -m vcmm``).
"""

from .config import FitConfig
from .data import Cluster, ClusterDataset, CoefLayout, Observation, validate_dataset
from .errors import *  # noqa: F401,F403
from .inference import (BandResult, BiasEstimate, ConstantEstimate, TestResult,
                        VarianceEstimate, band_multiplier, cluster_effect, confidence_band,
                        critical_value, estimate_bias, estimate_variance, gumbel_pvalue,
                        jackknife_se, omega_n, test_constancy, test_specified)
from .io import load_csv, read_config, write_csv
from .kernels import EPANECHNIKOV, TRIWEIGHT, UNIFORM, Kernel, kernel_eval, kernel_moments
from .local import (CoefficientCurves, LocalFit, build_design, constant_estimates,
                    estimate_constant, evaluate_at, fit_curves, fit_unstructured, local_fit,
                    local_fits)
from .pipeline import AnalysisReport, RunSpec, analyze, run_pipeline, write_results
from .simulation import (SimConfig, SimTruth, calibration_study, generate_dataset,
                         mise_study, rmise_study)
from .varcomp import (VarianceComponents, estimate_sigma2, estimate_Sigma,
                      estimate_variance_components, predict_random_effects, psd_project)

__version__ = "0.1.0"
