class EnvQueueError(Exception):
    """Base class for every error raised by envqueue."""


class SpecError(EnvQueueError):
    """A model or run configuration is malformed or inconsistent."""


class BoundViolation(EnvQueueError):
    """A rate leaves its declared envelope (lambda > lambda_bar or mu < mu_bar)."""


class DomainError(EnvQueueError):
    """A point lies outside the declared environment domain."""


class ScaleOverflow(EnvQueueError):
    """The layer speed-up beta_n * rho(z)**(-n) is not representable."""

    def __init__(self, msg: str, n: int | None = None):
        super().__init__(msg)
        self.n = n


class DivergenceError(EnvQueueError):
    """An integral or series that should be finite diverges."""


class BudgetExceeded(EnvQueueError):
    """An event, step or term budget ran out before the horizon."""


class FitRejected(EnvQueueError):
    """A statistical fit failed its acceptance test."""


class PreconditionError(EnvQueueError):
    """Inputs do not satisfy the assumptions of the requested bound."""
