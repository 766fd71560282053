"""Structured exceptions shared by every module.

Each error carries a short machine-readable ``code`` so the CLI can emit a
JSON record on stderr instead of a bare traceback.
"""

from __future__ import annotations

from typing import Any


class CtomError(Exception):
    code = "error"
    exit_code = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict[str, Any]:
        return {"error": self.code, "message": self.message, **self.details}


class ShapeError(CtomError, ValueError):
    code = "shape_mismatch"


class ParameterError(CtomError, ValueError):
    code = "invalid_parameter"


class FormatError(CtomError, ValueError):
    code = "bad_format"


class DataError(CtomError, ValueError):
    code = "bad_data"


class TrainingError(CtomError, RuntimeError):
    code = "training_failed"


class UsageError(CtomError):
    code = "usage"
    exit_code = 2
