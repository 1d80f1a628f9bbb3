"""Exception types raised across the package."""


class FedRecoverError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(FedRecoverError, ValueError):
    pass


class NonFiniteError(FedRecoverError, ValueError):
    pass


class ProxConvergenceError(FedRecoverError, RuntimeError):
    """An inner prox solver hit its iteration cap.

    The best iterate found so far and its residual are kept on the exception
    so callers can decide whether to accept it.
    """

    def __init__(self, message, best=None, residual=float("nan")):
        super().__init__(message)
        self.best = best
        self.residual = residual


class DatasetError(FedRecoverError, ValueError):
    pass


class ConfigError(FedRecoverError, ValueError):
    pass


class RunError(FedRecoverError, RuntimeError):
    """Failure inside a federated run, tagged with where it happened."""

    def __init__(self, message, round=None, step=None, stage=None):
        where = []
        if stage is not None:
            where.append(f"stage={stage}")
        if round is not None:
            where.append(f"round={round}")
        if step is not None:
            where.append(f"step={step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.round = round
        self.step = step
        self.stage = stage
