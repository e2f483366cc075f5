"""Exception hierarchy. The CLI maps each family onto an exit code."""


class UrbanWageError(Exception):
    exit_code = 1


class ConfigError(UrbanWageError, ValueError):
    exit_code = 1


class DataError(UrbanWageError, ValueError):
    exit_code = 2


class EstimationError(UrbanWageError, RuntimeError):
    exit_code = 3


class ConvergenceError(EstimationError):
    pass


class RankDeficiencyError(EstimationError):
    def __init__(self, column: str, message: str | None = None):
        self.column = column
        super().__init__(message or f"covariate {column!r} is collinear with the absorbed effects or earlier covariates")


class VerificationError(UrbanWageError):
    exit_code = 4
