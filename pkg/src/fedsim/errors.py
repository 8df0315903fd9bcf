"""Exception types raised across the simulator."""

from __future__ import annotations


class FedSimError(Exception):
    """Base class for every simulator error."""


# trace ---------------------------------------------------------------------


class TraceError(FedSimError, ValueError):
    pass


class MalformedLine(TraceError):
    def __init__(self, line_no: int, text: str = ""):
        self.line_no = line_no
        super().__init__(f"malformed trace line {line_no}: {text!r}")


class EmptyTrace(TraceError):
    pass


class NonMonotonicTime(TraceError):
    def __init__(self, line_no: int):
        self.line_no = line_no
        super().__init__(f"timestamp does not increase at line {line_no}")


class EmptyInput(FedSimError, ValueError):
    pass


class StalledTransfer(FedSimError):
    """A transfer sat on a zero-bandwidth plateau for longer than the timeout.

    ``elapsed`` is the simulated time from transfer start until the stall was
    declared; ``bytes_done`` is what got through before the plateau.
    """

    def __init__(self, elapsed: float, bytes_done: float, timeout: float):
        self.elapsed = elapsed
        self.bytes_done = bytes_done
        self.timeout = timeout
        super().__init__(
            f"transfer stalled after {elapsed:.1f}s "
            f"({bytes_done:.0f} bytes sent, timeout {timeout:.0f}s)"
        )


# predictor -----------------------------------------------------------------


class EmptyHistory(FedSimError, ValueError):
    pass


class EmptyCohort(FedSimError, ValueError):
    pass


class TraceTooShort(FedSimError, ValueError):
    pass


# learner -------------------------------------------------------------------


class InvalidConfig(FedSimError, ValueError):
    pass


class NonFiniteLoss(FedSimError, ArithmeticError):
    pass


class DimensionMismatch(FedSimError, ValueError):
    pass


# selection / scheduler -----------------------------------------------------


class InvalidInput(FedSimError, ValueError):
    pass


class CohortTooLarge(FedSimError, ValueError):
    pass


class UnknownClient(FedSimError, KeyError):
    pass


class WindowNotComplete(FedSimError, RuntimeError):
    pass


class InvalidPrediction(FedSimError, ValueError):
    pass


class NonPositiveFactor(FedSimError, ValueError):
    pass


class InvalidDuration(FedSimError, ValueError):
    pass


# engine / config -----------------------------------------------------------


class AllClientsDropped(FedSimError, RuntimeError):
    pass


class ConfigError(FedSimError, ValueError):
    pass


class ParseError(ConfigError):
    def __init__(self, location: str, message: str):
        self.location = location
        super().__init__(f"{location}: {message}")


class ValidationError(ConfigError):
    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class UnknownKey(ConfigError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"unknown config key {key!r}")
