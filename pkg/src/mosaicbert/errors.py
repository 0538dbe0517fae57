"""Exception hierarchy shared across the package."""


class MosaicError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MosaicError, ValueError):
    pass


class DimensionError(MosaicError, ValueError):
    pass


class DegenerateSliceError(MosaicError, ValueError):
    """A softmax slice (or attention row) has no finite entry."""


class DataError(MosaicError, ValueError):
    pass


class LengthError(DataError):
    """Sequence longer than a learned position table allows."""


class MaskLayoutError(DataError):
    """Attention mask is not right-padded (real tokens must form a prefix)."""


class PackingError(MosaicError, ValueError):
    """Malformed cu_seqlens or packed/padded shape disagreement."""


class IngestionError(DataError):
    pass


class EvaluationError(MosaicError, ArithmeticError):
    """A function under gradient check produced a non-finite value."""


class ScheduleExhaustedError(MosaicError, ValueError):
    pass


class DivergenceError(MosaicError, ArithmeticError):
    def __init__(self, message, *, parameter=None, last_checkpoint=None):
        super().__init__(message)
        self.parameter = parameter
        self.last_checkpoint = last_checkpoint


class IncompatibleCheckpointError(MosaicError, ValueError):
    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = tuple(fields)


class CheckpointFormatError(MosaicError, ValueError):
    pass


class MeasurementError(MosaicError, RuntimeError):
    pass


class SchemaError(MosaicError, ValueError):
    pass
