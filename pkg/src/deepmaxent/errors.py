"""Exception hierarchy shared by the library and the CLI."""


class DeepMaxentError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DeepMaxentError, ValueError):
    """Operands have incompatible shapes."""


class DegenerateBatchError(DimensionError):
    """A normalisation was requested over fewer than two sites."""


class ContractError(DeepMaxentError, ValueError):
    """A call violated an API precondition (e.g. backward on a non-scalar)."""


class ConfigError(DeepMaxentError, ValueError):
    """Invalid hyperparameter or architecture setting."""


class DataError(DeepMaxentError, ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class NumericalError(DeepMaxentError, ArithmeticError):
    """A non-finite value appeared during training or optimisation."""
