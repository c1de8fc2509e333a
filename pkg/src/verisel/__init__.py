"""Provable-disagreement scoring and filtering for ReLU policy networks.

Workflow: train or load a set of independently trained policies, bound each
pair's output disagreement over an input box with a complete branch-and-bound
verifier (or a gradient-attack stand-in), then iteratively drop the models
that disagree most with the rest. High pairwise agreement is evidence the
survivors generalize to the covered inputs.
"""

from .boxes import Box, as_boxes
from .nets import (
    Layer,
    Network,
    NetworkError,
    concat,
    forward,
    forward_many,
    forward_preacts,
    load_network,
    save_network,
)
from .distance import (
    DEFAULT_CATEGORIES,
    Category,
    DistanceSpec,
    cdistance,
    eval_distance,
    l1,
    pair_distance_value,
)
from .verifier import (
    BabConfig,
    Bracket,
    BudgetExhausted,
    Query,
    Verdict,
    VerdictKind,
    VerifierError,
    decide,
    maximize,
    propagate_bounds,
)
from .attacks import (
    AttackConfig,
    AttackOracle,
    AttackResult,
    attack_oracle,
    constrained_pgd,
    fgsm,
    output_jacobian,
    pgd,
)
from .selection import (
    PdtTable,
    SelectionConfig,
    SelectionTrace,
    VerifierOracle,
    disagreement_scores,
    filter_step,
    pdt,
    pdt_table,
    select,
    uncertainty_rank,
)
from .envs import (
    REWARD_THRESHOLDS,
    CartpoleConfig,
    EpisodeResult,
    MountainCarConfig,
    RolloutResult,
    classify,
    env_preset,
    query_domain,
    rollout,
)
from .trainer import (
    FixtureSet,
    TrainConfig,
    cem_train,
    default_architecture,
    make_fixture_set,
)

__version__ = "0.1.0"

__all__ = [
    "Box",
    "as_boxes",
    "Layer",
    "Network",
    "NetworkError",
    "concat",
    "forward",
    "forward_many",
    "forward_preacts",
    "load_network",
    "save_network",
    "DEFAULT_CATEGORIES",
    "Category",
    "DistanceSpec",
    "cdistance",
    "eval_distance",
    "l1",
    "pair_distance_value",
    "BabConfig",
    "Bracket",
    "BudgetExhausted",
    "Query",
    "Verdict",
    "VerdictKind",
    "VerifierError",
    "decide",
    "maximize",
    "propagate_bounds",
    "AttackConfig",
    "AttackOracle",
    "AttackResult",
    "attack_oracle",
    "constrained_pgd",
    "fgsm",
    "output_jacobian",
    "pgd",
    "PdtTable",
    "SelectionConfig",
    "SelectionTrace",
    "VerifierOracle",
    "disagreement_scores",
    "filter_step",
    "pdt",
    "pdt_table",
    "select",
    "uncertainty_rank",
    "REWARD_THRESHOLDS",
    "CartpoleConfig",
    "EpisodeResult",
    "MountainCarConfig",
    "RolloutResult",
    "classify",
    "env_preset",
    "query_domain",
    "rollout",
    "FixtureSet",
    "TrainConfig",
    "cem_train",
    "default_architecture",
    "make_fixture_set",
    "__version__",
]
