"""Exception hierarchy shared by every subsystem.

The CLI maps these onto process exit codes, so each class carries the code
it should terminate with.
"""


class SamovarError(Exception):
    exit_code = 1


class ConfigError(SamovarError, ValueError):
    exit_code = 2


class DataError(SamovarError, ValueError):
    exit_code = 3


class ParseError(DataError):
    """Malformed input file; ``row``/``col`` are 1-based when known."""

    def __init__(self, message, row=None, col=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if col is not None:
            where.append(f"col {col}")
        if where:
            message = f"{message} (at {', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.col = col


class NumericError(SamovarError, ArithmeticError):
    exit_code = 4


class NumericInstabilityError(NumericError):
    def __init__(self, op, message="non-finite value produced"):
        super().__init__(f"{message} in op '{op}'")
        self.op = op


class ShapeError(SamovarError, ValueError):
    exit_code = 4


class GraphError(SamovarError, RuntimeError):
    exit_code = 4


class OracleInvalidError(SamovarError, RuntimeError):
    exit_code = 4


class SamplingError(SamovarError, RuntimeError):
    exit_code = 4


class ConditioningError(NumericError):
    pass


class DivergenceError(NumericError):
    pass


class PathBudgetError(SamovarError, ValueError):
    exit_code = 2


class CheckpointError(SamovarError, IOError):
    exit_code = 3
