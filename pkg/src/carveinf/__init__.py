"""Data-carved selective inference.

Selection rules on pilot-stage statistics, carved conditional likelihoods
and exact pivots on the augmented data, confidence intervals by pivot
inversion, tail-decay asymptotics, and a seeded simulation harness that
certifies the distributional claims empirically.
"""

from .errors import (
    InvariantViolation,
    NumericError,
    QuadratureConvergenceError,
    RareEventUnderflow,
    SolverConvergenceError,
)
from .gauss import (
    MvnSpec,
    QuadratureConfig,
    RngStream,
    gauss_expectation,
    mills_lower,
    mills_upper,
    mvn_orthant_mc,
    std_normal_cdf,
    std_normal_pdf,
    std_normal_quantile,
    std_normal_survival,
)
from .selection import (
    ElasticNetFit,
    ScreeningRule,
    SelectionOutcome,
    elastic_net_fit,
    elastic_net_outcome,
    kkt_randomization,
    screen_bh,
    screen_threshold,
    screen_top_d,
)
from .seq import (
    ConfidenceInterval,
    PivotResult,
    SeqCarveProblem,
    seq_carved_density,
    seq_confidence_interval,
    seq_pivot,
    seq_survival_factor,
    split_interval,
)
from .mv import (
    CarveGeometry,
    QAlpha,
    build_q_alpha,
    elastic_net_geometry,
    mv_carved_density_ratio,
    mv_confidence_interval,
    mv_pivot,
    mv_selection_prob,
    mv_selprob_importance_mc,
    mv_selprob_product_mc,
    screening_geometry,
)
from .asymptotics import (
    decay_ratio_report,
    decay_sandwich_report,
    l_constant,
    mv_selprob_asymptotic,
    randomization_moments_check,
    sandwich_report,
    seq_selprob_asymptotic,
)
from .families import GenerativeSpec, sample_triangular_array
from .harness import (
    ExperimentConfig,
    ReplicationRecord,
    coverage_report,
    records_to_csv,
    regime_sweep,
    run_two_stage,
    summarize,
    summary_to_json,
    uniformity_report,
)

__version__ = "0.1.0"
