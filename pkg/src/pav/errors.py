class PavError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(PavError, ValueError):
    pass


class SingularGeometryError(PavError, ValueError):
    pass


class InvalidStateError(PavError, RuntimeError):
    pass


class NonFiniteGradientError(PavError, FloatingPointError):
    def __init__(self, name: str, index: tuple):
        super().__init__(f"non-finite gradient in {name} at index {index}")
        self.name = name
        self.index = index


class ConfigError(PavError, ValueError):
    pass
