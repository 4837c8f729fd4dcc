"""Exception hierarchy for vcmm."""


class VCMMError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(VCMMError, ValueError):
    pass


class NonFiniteValue(VCMMError, ValueError):
    pass


class DegenerateIndex(VCMMError, ValueError):
    pass


class QuadratureFailure(VCMMError, ArithmeticError):
    pass


class InsufficientLocalData(VCMMError):
    """Too few observations carry kernel weight around a fit point."""

    def __init__(self, message, u0=None):
        super().__init__(message)
        self.u0 = u0


class SingularSystem(VCMMError, ArithmeticError):
    def __init__(self, message, u0=None):
        super().__init__(message)
        self.u0 = u0


class NoUsableClusters(VCMMError):
    pass


class SingularCluster(VCMMError):
    pass


class InvalidInterval(VCMMError, ValueError):
    pass


class TooFewClusters(VCMMError, ValueError):
    pass


class SchemaError(VCMMError, ValueError):
    pass


class InconsistentClusterCovariate(VCMMError, ValueError):
    pass


class ParseError(VCMMError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class ConfigError(VCMMError, ValueError):
    pass


class IoError(VCMMError, OSError):
    pass


class PipelineError(VCMMError):
    """A pipeline stage failed; ``stage`` names it and ``cause`` holds the original error."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
