"""
Exception hierarchy shared by the engine, the run store and the plugins.
Core modules raise these; run_service turns them into (ok, message) tuples.
"""


class EngineError(Exception):
    """Base class for every error raised by the evolution engine."""


class InvalidRatingError(EngineError, ValueError):
    """A rating, outcome or K-factor outside its domain."""


class ArityError(EngineError, ValueError):
    """Too few participants (agents, outcomes, accuracies) for an operation."""


class BudgetExhaustedError(EngineError):
    """The ledger cannot cover the requested evaluations."""

    def __init__(self, needed: int, remaining: int):
        super().__init__(f"Budget exhausted: need {needed} evaluations, {remaining} remaining.")
        self.needed = needed
        self.remaining = remaining


class AlignmentError(EngineError, ValueError):
    """Agents were not evaluated on identical example sets."""


class ConfigError(EngineError, ValueError):
    """Malformed or inconsistent configuration."""


class PluginError(EngineError):
    """A plugin could not be resolved or started."""


class EvaluatorError(EngineError):
    """An evaluator batch crashed, timed out or replied with garbage."""


class MutationError(EngineError):
    """The mutator failed to produce an artifact."""


class IntegrityError(EngineError):
    """A run store is missing records, corrupted or locked by another writer."""
