"""Exception hierarchy. Each class maps to a CLI exit code."""


class ReplayLabError(Exception):
    exit_code = 1


class ConfigError(ReplayLabError, ValueError):
    exit_code = 3


class ShapeError(ReplayLabError, ValueError):
    exit_code = 3


class DomainError(ReplayLabError, ValueError):
    """Values outside the legal range (e.g. masks outside [0, 1])."""

    exit_code = 3


class ContractError(ReplayLabError):
    exit_code = 4


class GraphStateError(ReplayLabError, RuntimeError):
    exit_code = 4


class TrainingError(ReplayLabError, RuntimeError):
    exit_code = 5


class ArtifactError(ReplayLabError):
    exit_code = 6


class UsageError(ReplayLabError):
    exit_code = 2
