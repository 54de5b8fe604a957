"""Exception hierarchy.

Validation-type errors subclass ``ValueError`` so callers (and the CLI) can
map them to exit code 1; everything else is a runtime failure.
"""


class DemarkError(Exception):
    pass


class ValidationError(DemarkError, ValueError):
    """Input values outside their documented domain."""


class ShapeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DegenerateSpecError(ValidationError):
    """A watermark spec that renders to nothing."""


class InputError(ValidationError):
    """Missing or unusable input files."""


class LoadError(DemarkError):
    """Checkpoint cannot be loaded into the requested model."""


class NonFiniteLossError(DemarkError, RuntimeError):
    def __init__(self, term, value):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
        self.value = value
