"""Exception hierarchy shared across the toolkit."""


class XvkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(XvkitError, ValueError):
    pass


class EmptyInputError(XvkitError, ValueError):
    pass


class DataError(XvkitError):
    """Malformed or missing data (files, labels, archives)."""


class ShapeError(XvkitError, ValueError):
    pass


class NumericalError(XvkitError, ArithmeticError):
    """Degenerate statistics, NaN losses, non-convergence."""


class DegenerateEnergyError(NumericalError):
    pass


class NetSpecParseError(XvkitError, ValueError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", col {column})" if column is not None else ")")
        super().__init__(message + where)


class PrerequisiteError(DataError):
    pass


class StaleArtifactError(DataError):
    pass
