"""Exception hierarchy.

Validation problems (bad inputs, schema, degenerate arguments) derive from
:class:`ValidationError`; failures of the numerics themselves derive from
:class:`NumericalError`.  The CLI maps the two families to distinct exit codes.
"""


class SohError(Exception):
    """Base class for all package errors."""


class ValidationError(SohError, ValueError):
    pass


class NumericalError(SohError, ArithmeticError):
    pass


class SchemaError(ValidationError):
    pass


class ProfileTooShortError(ValidationError):
    def __init__(self, source_ids):
        self.source_ids = list(source_ids)
        super().__init__("profiles with fewer than 8 usable samples: " + ", ".join(self.source_ids))


class ConstantColumnError(ValidationError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"column {name!r} has zero variance")


class ParameterMismatchError(ValidationError):
    pass


class SplitError(ValidationError):
    pass


class RangeError(ValidationError):
    pass


class FitError(NumericalError):
    pass


class DerivativeSingularityError(NumericalError):
    pass


class NormalizationDegenerateError(NumericalError):
    pass


class ConditioningError(NumericalError):
    pass


class DegenerateNoiseError(NumericalError):
    pass


class EmptyModelError(NumericalError):
    pass


class EmptyOutputError(ValidationError):
    pass
