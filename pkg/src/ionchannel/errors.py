"""Exception hierarchy shared by all modules."""


class IonChannelError(Exception):
    """Base class for every error raised by the package."""


class GeometryError(IonChannelError):
    pass


class InvalidMeshError(IonChannelError):
    pass


class ElementInversionError(IonChannelError):
    def __init__(self, message, element=None, volume=None):
        super().__init__(message)
        self.element = element
        self.volume = volume


class MeshFormatError(IonChannelError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class BreakdownError(IonChannelError):
    pass


class SingularMatrixError(IonChannelError):
    pass


class DomainError(IonChannelError, ValueError):
    pass


class AssemblyError(IonChannelError):
    pass


class RescalingError(IonChannelError):
    pass


class FloatingSystemError(IonChannelError):
    pass


class RigidModeError(IonChannelError):
    pass


class ParameterError(IonChannelError, ValueError):
    pass


class ModelBreakdownError(IonChannelError):
    pass


class SamplingError(IonChannelError):
    pass


class GummelDivergenceError(IonChannelError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class ConfigError(IonChannelError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip() if where else message)
        self.line = line
        self.path = path
