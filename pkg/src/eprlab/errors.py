"""Exception hierarchy shared by every eprlab module.

Two families exist so the command line can map failures onto exit codes:
``ConfigError`` (bad input, exit 2) and ``NumericalError`` (the computation
itself broke down, exit 3).
"""


class EprlabError(Exception):
    """Base class for all package errors."""

    kind = "error"

    def to_dict(self):
        out = {"error": self.kind, "message": str(self)}
        out.update(getattr(self, "details", {}) or {})
        return out


class ConfigError(EprlabError):
    kind = "config_error"


class NumericalError(EprlabError):
    kind = "numerical_error"


class SizeError(ConfigError):
    kind = "size_error"


class FormatError(ConfigError):
    kind = "format_error"


class ParseError(ConfigError):
    kind = "parse_error"


class ValidationError(ConfigError):
    kind = "validation_error"


class OrderMismatchError(ConfigError):
    kind = "order_mismatch"


class CapabilityError(ConfigError):
    kind = "capability_error"


class CoverageError(ConfigError):
    kind = "coverage_error"


class StateError(ConfigError):
    kind = "state_error"


class NodeError(NumericalError):
    kind = "node_error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class AmbiguityError(NumericalError):
    kind = "measurement_ambiguity"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details
