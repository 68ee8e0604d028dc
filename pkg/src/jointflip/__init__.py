"""Sign-flip score tests for many GLMs fitted in parallel, with FWER control."""

__version__ = "0.1.0"

from .errors import (
    DegenerateVariance,
    JointFlipError,
    NonConvergence,
    ParseError,
    SeparationDetected,
    SingularCovariance,
    SingularDesign,
    TooLarge,
    TooManyHypotheses,
)
from .flips import FlipPlan, make_exhaustive, make_plan
from .glm import (
    FullFit,
    ModelSpec,
    NullFit,
    fit_full,
    fit_full_batch,
    fit_null,
    fit_null_batch,
    get_family,
    get_link,
)
from .multitest import (
    CombiningFunction,
    TestResult,
    bonferroni_holm,
    closed_testing,
    flip_covariance,
    global_result,
    global_test,
    mahalanobis_global,
    maxt_single_step,
    maxt_step_down,
    perm_pvalue,
    raw_pvalues,
)
from .scores import (
    FlipStatMatrix,
    ScoreBatch,
    ScoreDecomposition,
    build_matrix,
    decompose,
    decompose_batch,
    flip_statistics,
    flip_variance,
    flip_variances,
    flipped_stat,
)
