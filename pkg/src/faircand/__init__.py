"""faircand: fair threshold-policy selection for first-stage candidate generation.

Selects per-group candidate-set thresholds from biased, partial click logs
with distribution-free guarantees, and ships the simulator, baselines, and
experiment harness used to verify them.
"""

from .corpus import (
    ADVANTAGED,
    DISADVANTAGED,
    Dataset,
    Item,
    ParseError,
    Query,
    SplitSpec,
    SyntheticSpec,
    assign_groups,
    average_relevant,
    binarize,
    binarize_relevance,
    parse_letor,
    serialize_letor,
    split,
    synth_generate,
)
from .relevance import (
    ConstantModel,
    CorruptedModel,
    CorruptionSpec,
    FeatureModel,
    LogisticModel,
    PlattModel,
    RelevanceModel,
    corrupt_scores,
    load_model,
    model_from_dict,
    platt_calibrate,
    save_model,
    score,
    train_logistic,
)
from .clicklog import (
    InteractionLog,
    OracleTable,
    RankedSlate,
    build_oracle_table,
    load_log_csv,
    rank_group,
    rank_query,
    save_log_csv,
    simulate_log,
    true_expected_relevant,
)
from .estimator import (
    BoundTable,
    build_bound_table,
    cipw_estimate,
    cipw_per_request,
    ipw_estimate,
    lower_bound,
    sample_variance,
    upper_bound,
)
from .selector import (
    CandidatePolicy,
    FixedThresholdPolicy,
    GapComponents,
    MONOTONE,
    OracleThreshold,
    PerQueryPolicy,
    SelectionConfig,
    UNION,
    algorithm1,
    apply_policy,
    baseline_individual,
    baseline_ipw,
    baseline_marginal,
    equal_opportunity_targets,
    gap_bounds,
    load_policy,
    oracle_threshold,
    save_policy,
    select_monotone,
    select_union,
)
from .evaluation import (
    ExperimentSpec,
    METHOD_NAMES,
    aggregate,
    asymptotics_study,
    coverage_study,
    default_experiment_spec,
    default_synth_spec,
    eval_css,
    eval_er,
    run_replications,
)

__version__ = "0.1.0"
