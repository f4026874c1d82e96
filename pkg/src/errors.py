"""Exception types raised across the re-identification package."""


class ReIDError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(ReIDError):
    """A primitive received operands whose shapes it cannot combine."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: shape mismatch {rendered}")


class ConfigurationError(ReIDError):
    """Invalid configuration value or inconsistent mode/loss combination."""


class GraphError(ReIDError):
    """Skeleton graph is malformed or its spectrum cannot serve the request."""


class IngestError(ReIDError):
    """A file on disk could not be parsed."""


class DataError(ReIDError):
    """Dataset contents violate a precondition (empty tracklet, PK structure, ...)."""


class EvaluationError(ReIDError):
    """Retrieval evaluation cannot be carried out."""


class TrainingError(ReIDError):
    """Training diverged; the message carries the diagnostic."""


# Exit codes used by the command-line surface
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(error, TrainingError):
        return EXIT_RUNTIME
    if isinstance(error, ReIDError):
        return EXIT_VALIDATION
    return EXIT_RUNTIME
