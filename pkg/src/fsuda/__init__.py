"""Few-shot unsupervised domain adaptation via meta prompt learning.

Closed-form per-task solvers (ridge classifier + cross-domain projection),
an exactly differentiated three-term outer objective, an episodic trainer
over a frozen backbone, and an evaluation harness with stability statistics.
"""

from .config import ConfigError, RunConfig, load_config
from .episodes import (
    ClassSplit,
    DomainShiftSpec,
    Episode,
    FeaturePool,
    sample_episode,
    split_classes,
    synth_domains,
)
from .estimator import CrossDomainProjector, MetaPromptLearner, RidgeHeadClassifier
from .objective import LossBreakdown, episode_outer_loss, outer_gradient
from .promptnet import FrozenBackbone, PromptParams, build_backbone, embed, init_params
from .trainer import (
    EvalSummary,
    TaskResult,
    TrainHistory,
    adapt_and_test,
    evaluate_suite,
    meta_train,
)

__all__ = [
    "ClassSplit",
    "ConfigError",
    "CrossDomainProjector",
    "DomainShiftSpec",
    "Episode",
    "EvalSummary",
    "FeaturePool",
    "FrozenBackbone",
    "LossBreakdown",
    "MetaPromptLearner",
    "PromptParams",
    "RidgeHeadClassifier",
    "RunConfig",
    "TaskResult",
    "TrainHistory",
    "adapt_and_test",
    "build_backbone",
    "embed",
    "episode_outer_loss",
    "evaluate_suite",
    "init_params",
    "load_config",
    "meta_train",
    "outer_gradient",
    "sample_episode",
    "split_classes",
    "synth_domains",
]

__version__ = "0.1.0"
