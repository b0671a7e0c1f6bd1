"""
Exception hierarchy for the ProtoFair harness.

Every error raised on purpose by the package derives from ProtoFairError so the
CLI can tell "the run failed for a known reason" apart from a crash.
"""

from typing import Optional, Sequence, Tuple


class ProtoFairError(Exception):
    """Base class for all harness errors."""


class ContractViolation(ProtoFairError, ValueError):
    """A documented precondition (shape, length, unit norm, scalar loss) was not met."""


class DegenerateRowError(ContractViolation):
    """A row's norm is too small to normalize."""

    def __init__(self, row: int, norm: float, eps: float):
        self.row = row
        self.norm = norm
        self.eps = eps
        super().__init__(
            f"row {row} has norm {norm:.3e} below the normalization guard {eps:.0e}"
        )


class ConfigurationError(ProtoFairError, ValueError):
    """A component was configured with values it cannot work with."""


class PrototypeLifecycleError(ProtoFairError, RuntimeError):
    """The prototype bank was used out of order or its invariants broke."""


class DataValidationError(ProtoFairError, ValueError):
    """Input data failed validation. `line` is 1-based when the data came from a file."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CsvFormatError(DataValidationError):
    """A CSV row could not be parsed."""


class UndefinedRateError(ProtoFairError, ValueError):
    """A conditional rate was requested for an empty (target, sensitive) cell."""

    def __init__(self, target: int, sensitive: int):
        self.cell = (target, sensitive)
        super().__init__(
            f"no samples with y={target}, s={sensitive}; rate P(yhat=1 | y={target}, s={sensitive}) is undefined"
        )


class DegenerateTaskError(ProtoFairError, ValueError):
    """The probe was asked to learn a target with a single class."""


# ─────────────────────────────────────────────────────────────────────────────
# Configuration file errors
# ─────────────────────────────────────────────────────────────────────────────

class ConfigError(ConfigurationError):
    """Base for experiment-config loading errors (CLI exit code 2)."""


class ConfigFileMissingError(ConfigError):
    """The config path does not exist."""


class MalformedConfigError(ConfigError):
    """The config file is not valid UTF-8 JSON or is not a JSON object."""


class UnknownConfigKeyError(ConfigError):
    """The config contains keys the experiment does not know."""

    def __init__(self, keys: Sequence[str]):
        self.keys = list(keys)
        super().__init__(f"unknown config key(s): {', '.join(self.keys)}")


class ConfigRangeError(ConfigError):
    """One or more config values are out of range or of the wrong type."""

    def __init__(self, problems: Sequence[Tuple[str, str]]):
        self.problems = list(problems)
        self.keys = [key for key, _ in self.problems]
        detail = "; ".join(f"{key}: {msg}" for key, msg in self.problems)
        super().__init__(f"invalid config value(s): {detail}")
