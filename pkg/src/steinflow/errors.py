"""Exception hierarchy shared across the package.

CLI exit codes: usage errors map to 2, sampling/inversion divergence to 3,
backend protocol failures to 4.
"""


class SteinflowError(Exception):
    """Base class for all package errors."""


class DomainError(SteinflowError):
    """A numeric argument lies outside the operation's valid domain."""


class ContractViolation(SteinflowError):
    """Caller broke an interface contract (shape mismatch, missing data)."""


class UnsupportedOracleError(SteinflowError):
    """The requested closed-form oracle does not cover this configuration."""


class ExpertEvaluationError(SteinflowError):
    """A score backend failed; carries the expert identity."""

    def __init__(self, expert: str, message: str):
        super().__init__(f"expert {expert!r}: {message}")
        self.expert = expert


class SamplingDivergedError(SteinflowError):
    """A particle became non-finite during annealing."""

    def __init__(self, t: int, particle: int):
        super().__init__(f"non-finite particle {particle} at annealing step t={t}")
        self.t = t
        self.particle = particle


class InversionDivergedError(SteinflowError):
    """An inversion intermediate became non-finite."""

    def __init__(self, step: int):
        super().__init__(f"non-finite inversion state at step {step}")
        self.step = step


class ConfigError(SteinflowError):
    """Run configuration failed validation (a usage error)."""


class ProtocolError(SteinflowError):
    """Malformed or inconsistent wire frame; not retriable."""


class TransportError(SteinflowError):
    """Connection-level failure (timeout, reset); safe to retry."""


class BackendError(SteinflowError):
    """Remote backend answered with an error status."""
