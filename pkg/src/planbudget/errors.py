class PlanBudgetError(Exception):
    """Base class for all package errors."""


class DomainError(PlanBudgetError, ValueError):
    """An input lies outside the domain an operation accepts."""


class InfeasibleError(DomainError):
    pass


class SolverError(PlanBudgetError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class ParseError(PlanBudgetError, ValueError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class GatewayError(PlanBudgetError):
    pass


class TransportError(GatewayError):
    """Retries exhausted on a transient failure."""


class ProtocolError(GatewayError):
    """The backend answered with a body we cannot interpret."""


class RequestError(GatewayError):
    """Non-retryable client-side failure (HTTP 4xx other than 429)."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class ScriptExhaustedError(GatewayError):
    pass


class DatasetError(PlanBudgetError, ValueError):
    def __init__(self, message: str, problems: list[str] | None = None):
        self.problems = problems or []
        detail = "".join(f"\n  {p}" for p in self.problems)
        super().__init__(message + detail)
