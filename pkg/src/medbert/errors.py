"""Exception types raised across the package."""


class MedBertError(Exception):
    """Base class for all package errors."""


class ConfigError(MedBertError, ValueError):
    """Invalid configuration; the message names the offending field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class EmptyVisit(MedBertError, ValueError):
    pass


class EmptyPatient(MedBertError, ValueError):
    pass


class EmptyCohort(MedBertError, ValueError):
    pass


class TooSmall(MedBertError, ValueError):
    pass


class RangeError(MedBertError, ValueError):
    pass


class DegenerateSample(MedBertError, ValueError):
    pass


class DegenerateLabels(MedBertError, ValueError):
    pass


class ShapeError(MedBertError, ValueError):
    pass


class NumericsError(MedBertError, FloatingPointError):
    pass


class ContractError(MedBertError, RuntimeError):
    """A caller violated a documented precondition."""


class VocabRangeError(MedBertError, IndexError):
    pass


class IoError(MedBertError, OSError):
    pass
