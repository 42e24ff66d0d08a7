"""Exception types raised across the package."""


class ADIError(Exception):
    pass


class EmptyPool(ADIError):
    pass


class EmptyClass(ADIError):
    pass


class EmptyLeaf(ADIError):
    pass


class DimensionMismatch(ADIError, ValueError):
    pass


class SingleClass(ADIError, ValueError):
    pass


class NonDifferentiable(ADIError):
    pass


class DegenerateClassCount(ADIError, ValueError):
    pass


class SinkhornNonConvergence(ADIError):
    pass


class PackingFailure(ADIError):
    pass


class SpecMismatch(ADIError, ValueError):
    pass


class IndivisibleDim(ADIError, ValueError):
    pass


class MalformedFile(ADIError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConnectionFailure(ADIError):
    pass


class ProtocolError(ADIError):
    pass


class ConfigError(ADIError, ValueError):
    pass


class BindFailure(ADIError):
    pass


class ModelLoadFailure(ADIError):
    pass
