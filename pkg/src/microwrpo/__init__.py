"""Desk-scale lab for weighted-reward preference optimization.

Tiny tabular autoregressive policies stand in for the target, reference,
and source models; a deterministic bigram-affinity oracle stands in for
the external reward model. On top of that substrate the package provides
the full preference-objective family (DPO, IPO, SimPO, and their
weighted-reward hybrids), the quadruple data-construction pipeline, the
two-stage SFT + preference-optimization trainer with per-step telemetry,
and a CLI for config-driven runs, alpha sweeps, and figure exports.
"""

from .objectives import (
    LogProbBundle,
    LossResult,
    ObjectiveConfig,
    RoleLogProb,
    bt_probability,
    compound_reward,
    internal_reward,
)
from .policy import PolicyModel, SamplingConfig, Sequence, Vocabulary
from .schedule import FusionSchedule, alpha_at

__version__ = "0.1.0"

__all__ = [
    "LogProbBundle",
    "LossResult",
    "ObjectiveConfig",
    "RoleLogProb",
    "bt_probability",
    "compound_reward",
    "internal_reward",
    "PolicyModel",
    "SamplingConfig",
    "Sequence",
    "Vocabulary",
    "FusionSchedule",
    "alpha_at",
    "__version__",
]
