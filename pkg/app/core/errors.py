from typing import Optional


class EngineError(Exception):
    """Base class for every failure the engine reports to an operator"""

    exit_code: int = 1
    status_code: int = 500

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ConfigError(EngineError):
    exit_code = 1
    status_code = 422


class CueError(EngineError):
    exit_code = 1
    status_code = 422


class ParseError(EngineError):
    exit_code = 2
    status_code = 422

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(EngineError):
    exit_code = 3
    status_code = 500

    def __init__(self, op: str, *shapes):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")
        self.shapes = shapes


class NonScalarLoss(EngineError):
    exit_code = 3
    status_code = 500


class NumericalError(EngineError):
    exit_code = 3
    status_code = 500


class DegenerateRotation(EngineError):
    exit_code = 3
    status_code = 422


class EmptyDatabase(EngineError):
    exit_code = 4
    status_code = 404


class EmptyPartition(EngineError):
    exit_code = 4
    status_code = 404


class FeatureUnavailable(EngineError):
    exit_code = 4
    status_code = 404
