"""Design and analysis of multi-arm cluster randomized trials under
covariate-constrained randomization."""

__version__ = "0.1.0"

from ._kernels import BACKEND
from .balance import (BalanceScorer, BalanceSpec, Metric, SingularCovarianceWarning,
                      default_weights, l2_score, mahalanobis_score)
from .design import (AllocationScheme, CovariateTable, OutcomeDataset, TrialDesign,
                     aggregate_to_cluster, dummy_code)
from .errors import *
from .lmm import LmmFit, Method, ModelSpec, fit, marginal_loglik, profile_loglik
from .model_tests import (TestResult, bonferroni, wald_global_chisq, wald_global_f,
                          wald_pairwise_t, wald_pairwise_z)
from .randtests import (ConfidenceInterval, RandTestResult, ScoreBlocks, invert_ci,
                        randomization_test_global, randomization_test_pairwise, score_blocks)
from .space import (Count, Quantile, RandomizationSpace, build_space, conditional_subspace,
                    constrain, enumerate_space, sample_space, select_scheme)
