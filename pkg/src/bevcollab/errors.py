"""Exception taxonomy shared across the package."""


class BevCollabError(Exception):
    """Base class for all package errors."""


class ParameterError(BevCollabError):
    """An operation received arguments that violate its contract (shapes, ranges)."""


class ContractError(BevCollabError):
    """An API-level contract was violated (e.g. non-scalar loss, missing trace)."""


class ConfigError(BevCollabError):
    """A configuration object or file is invalid."""


class EmptyCollaboratorError(BevCollabError):
    """A fusion or normalization step received zero agents."""


class GenerationError(BevCollabError):
    """Scene generation could not satisfy its constraints."""


class UnknownAgentError(BevCollabError, LookupError):
    """An agent id or agent type was not found where required."""


class CheckpointError(BevCollabError):
    """A checkpoint file or group structure is invalid or incomplete."""


class EvaluationError(BevCollabError):
    """A numeric evaluation failed (non-finite forward value, undefined metric)."""


class TrainingError(BevCollabError):
    """Training aborted (divergence, non-finite gradient)."""
