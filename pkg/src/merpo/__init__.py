"""Tabular offline meta-reinforcement learning with a regularized, model-based actor-critic.

Submodules: :mod:`~merpo.mdp` (exact tabular DP), :mod:`~merpo.tasks` (task families and
offline data), :mod:`~merpo.models` (proximal meta-model learning), :mod:`~merpo.rac`
(within-task actor-critic), :mod:`~merpo.meta` (meta-training), :mod:`~merpo.theory`
(numeric bound checks) and :mod:`~merpo.harness` (benchmark suites).
"""
from .mdp import StochasticPolicy, TabularMdp, expected_return
from .meta import MerpoConfig, MetaState, adapt_new_task, train_merpo
from .models import ModelParams, MetaModelParams, fit_task_model, train_meta_model
from .rac import RacConfig, RacResult, run_rac
from .tasks import OfflineDataset, Quality, TaskFamily, TaskSpec, collect_dataset, sample_tasks

__version__ = "0.1.0"

__all__ = [
    "StochasticPolicy",
    "TabularMdp",
    "expected_return",
    "MerpoConfig",
    "MetaState",
    "adapt_new_task",
    "train_merpo",
    "ModelParams",
    "MetaModelParams",
    "fit_task_model",
    "train_meta_model",
    "RacConfig",
    "RacResult",
    "run_rac",
    "OfflineDataset",
    "Quality",
    "TaskFamily",
    "TaskSpec",
    "collect_dataset",
    "sample_tasks",
]
