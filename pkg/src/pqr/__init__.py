"""Reward identification for entropy-regularized MDPs with anchor actions.

The package covers the full workflow: exact and fitted soft-MDP solvers,
demonstration rollouts with JSON-lines persistence, policy and regression
estimators, the policy -> action-value -> reward identification pipeline,
grounded baselines, and a reproducible experiment harness.
"""

from .approx import (
    PolicyEstimate,
    TrainerConfig,
    TrainingDivergedError,
    TwoLayerReluNet,
    clip_log_policy,
    fit_policy_mle,
    train_regressor,
)
from .baselines import (
    GroundedEstimate,
    SplGdEstimate,
    maxent_irl_grounded,
    normalize_by_anchor,
    select_alpha,
    spl_gd,
)
from .demos import (
    DatasetFormatError,
    TrajectoryDataset,
    load_dataset,
    rollout,
    save_dataset,
)
from .estimators import (
    AnchorSolve,
    PqrConfig,
    PqrRun,
    QEstimate,
    RewardEstimate,
    StageError,
    fqi_identify,
    pqr_full,
    q_estimator,
    reward_estimation,
    shaping_probe,
    solve_qa_exact,
)
from .harness import (
    ExperimentConfig,
    MetricsReport,
    evaluate_mse,
    robustness_experiment,
    run_experiment,
    sweep,
)
from .soft_mdp import (
    FittedSoftQ,
    FittedSoftQConfig,
    SoftSolution,
    SyntheticMdp,
    TabularMdp,
    fitted_soft_q,
    random_tabular_mdp,
    soft_bellman_backup,
    solve_soft,
    synthetic_reward,
    synthetic_step,
)

__version__ = "0.1.0"
