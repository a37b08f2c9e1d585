"""Exception hierarchy shared across the package."""


class InferShareError(Exception):
    """Base class for every error raised by this package."""


# manifest
class ManifestError(InferShareError):
    pass


class MalformedDocument(ManifestError):
    pass


class UnknownLayerKind(ManifestError):
    pass


class ShapeMismatch(ManifestError):
    pass


class CyclicGraph(ManifestError):
    pass


class WeightByteMismatch(ManifestError):
    pass


# executor
class NonFiniteOutput(InferShareError):
    pass


# predictor
class BatchTooLarge(InferShareError):
    pass


# worker / controller
class UnknownModel(InferShareError):
    pass


class ModelTooLarge(InferShareError):
    pass


class Overloaded(InferShareError):
    pass


class Cancelled(InferShareError):
    pass


class DeviceFault(InferShareError):
    pass


class QuotaExceeded(InferShareError):
    pass


class ValidationFailed(InferShareError):
    def __init__(self, findings):
        self.findings = list(findings)
        super().__init__("; ".join(str(f) for f in self.findings) or "validation failed")


class InsufficientCapacity(InferShareError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ModelUnavailable(InferShareError):
    pass


# simulation / config
class ConfigInvalid(InferShareError):
    pass


class TraceParseError(InferShareError):
    pass
