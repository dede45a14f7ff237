"""Imperfect Byzantine generals: the (k, lambda)-protocol, attackers, verification and applications."""

from .errors import BudgetExceeded, ConfigurationError, ShapeError
from .protocol import (
    AgentState,
    Outcome,
    OutcomeKind,
    ProtocolParams,
    RoundDistribution,
    RoundMessages,
    Transcript,
    classify_outcome,
    decide,
    execute,
    initial_broadcast,
    run_protocol,
    sample_round_count,
    single_round_rule,
    step_round,
)

__version__ = "0.1.0"

__all__ = [
    "AgentState",
    "BudgetExceeded",
    "ConfigurationError",
    "Outcome",
    "OutcomeKind",
    "ProtocolParams",
    "RoundDistribution",
    "RoundMessages",
    "ShapeError",
    "Transcript",
    "classify_outcome",
    "decide",
    "execute",
    "initial_broadcast",
    "run_protocol",
    "sample_round_count",
    "single_round_rule",
    "step_round",
]
