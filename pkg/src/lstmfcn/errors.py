"""Exception hierarchy. ``exit_code`` is what the CLI returns for each failure class."""


class BenchError(Exception):
    exit_code = 1


class ConfigError(BenchError):
    exit_code = 1


class ParameterError(BenchError, ValueError):
    exit_code = 1


class ContractError(BenchError):
    exit_code = 1


class DimensionError(ContractError, ValueError):
    pass


class DataError(BenchError):
    exit_code = 2


class ParseError(DataError, ValueError):
    def __init__(self, path, row, column, token):
        super().__init__(f"{path}: row {row}, column {column}: cannot parse {token!r} as a number")
        self.row, self.column, self.token = row, column, token


class EmptyDatasetError(DataError):
    pass


class DegenerateStatisticsError(DataError, ValueError):
    pass


class DegenerateLabelsError(ParameterError):
    pass


class DegeneratePairsError(ParameterError):
    pass


class TrainingDiverged(BenchError, FloatingPointError):
    exit_code = 3

    def __init__(self, epoch, message="training loss became non-finite"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch
