"""Exception types raised across the package."""


class VistaError(Exception):
    """Base class for all package errors."""


class NonFiniteError(VistaError, ValueError):
    pass


class ShapeMismatch(VistaError, ValueError):
    pass


class DegenerateNormalizer(VistaError, ArithmeticError):
    pass


class UnsupportedOuterActivation(VistaError):
    pass


class FullyMaskedRow(VistaError, ValueError):
    pass


class NonFiniteLoss(VistaError, ArithmeticError):
    def __init__(self, layer, detail=""):
        self.layer = layer
        super().__init__(f"non-finite value in layer '{layer}'" + (f": {detail}" if detail else ""))


class StaleVersion(VistaError):
    pass


class CorruptSnapshot(VistaError):
    pass


class UserNotFound(VistaError, KeyError):
    def __str__(self):
        return f"user not found: {self.args[0]!r}" if self.args else "user not found"


class StalenessExceeded(VistaError):
    pass


class DegenerateLabels(VistaError, ValueError):
    pass


class SchemaMismatch(VistaError, ValueError):
    pass


class EmptyFile(VistaError, ValueError):
    pass


class ConfigError(VistaError, ValueError):
    pass
