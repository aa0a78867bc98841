class AlamError(Exception):
    pass


class ConfigurationError(AlamError, ValueError):
    """Shapes, dimensions or settings that do not fit together."""


class UsageError(AlamError, ValueError):
    """A call that violates an operation's preconditions (empty batch, non-scalar loss...)."""


class NonFiniteError(AlamError, FloatingPointError):
    """A NaN or infinity reached a loss, gradient or environment input."""

    def __init__(self, message: str, diagnostics: dict | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConvergenceError(AlamError, RuntimeError):
    def __init__(self, message: str, residual: float) -> None:
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual
