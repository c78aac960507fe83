"""Exception hierarchy; the CLI maps each family onto an exit code."""


class WslocError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(WslocError, ValueError):
    """Invalid input data, configuration, or domain invariant violation."""


class SchemaError(ValidationError):
    """A record in an input file does not match its schema."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class RegistryError(ValidationError):
    """Problem with the tool-class registry or a class lookup."""


class PipelineStateError(WslocError):
    """Persisted pipeline state is inconsistent with the requested run."""


class IntegrityError(PipelineStateError):
    """A persisted artifact fails its content digest check."""


class StalenessError(PipelineStateError):
    """Detections were produced from a different training set than expected."""


class TrainingError(WslocError):
    """The surrogate detector cannot be fit on the given dataset."""
