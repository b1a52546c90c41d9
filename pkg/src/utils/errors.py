"""Exception hierarchy for the separation pipeline."""
from typing import Any, Dict, Optional


class ConDeepModError(Exception):
    """Base error carrying a stable code and optional structured details."""

    code = "error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self, stage: Optional[str] = None) -> Dict[str, Any]:
        """Serialize the error for the machine-readable stderr report."""
        payload = {"error": self.code, "message": self.message, "details": self.details}
        if stage is not None:
            payload["stage"] = stage
        return payload


class FormatError(ConDeepModError):
    code = "format_error"


class UnsupportedError(ConDeepModError):
    code = "unsupported"


class ShapeError(ConDeepModError):
    code = "shape_error"


class EmptyInputError(ConDeepModError):
    code = "empty_input"


class DataError(ConDeepModError):
    code = "data_error"


class StateError(ConDeepModError):
    code = "state_error"


class ArgumentError(ConDeepModError):
    code = "argument_error"


class DegenerateGraphError(ConDeepModError):
    code = "degenerate_graph"


class NumericalError(ConDeepModError):
    code = "numerical_error"


class DivergenceError(ConDeepModError):
    code = "divergence"


class ConfigError(ConDeepModError):
    code = "config_error"


class UsageError(ConDeepModError):
    code = "usage_error"
