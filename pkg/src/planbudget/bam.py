"""Budget Allocation Model: power-law utility and optimal token allocation.

Each sub-question j gets utility ``alpha * (1 - c_j / b_j**beta_j - aleatoric_j)``
for a budget of ``b_j`` tokens. Maximising the summed utility under
``sum(b) == B`` is the same as minimising ``sum(c_j / b_j**beta_j)``.

Two allocators are provided:

* :func:`allocate_closed_form` evaluates the normalised formula
  ``B * (c_j beta_j)**(1/(beta_j+1)) / sum_k (...)``. It is the exact optimum
  only when every ``beta_j`` is equal.
* :func:`allocate_kkt` solves the stationarity condition
  ``lambda = c_j beta_j b_j**-(beta_j+1)`` for the multiplier by bisection,
  which is correct for heterogeneous exponents too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, SolverError

DEFAULT_TOL = 1e-9
MAX_ITER = 200


@dataclass(frozen=True)
class UtilityParams:
    c: float
    beta: float
    alpha: float = 1.0
    aleatoric: float = 0.0

    def __post_init__(self):
        if not (self.c > 0 and self.beta > 0 and self.alpha > 0):
            raise DomainError(f"c, beta and alpha must be positive: {self}")
        if self.aleatoric < 0:
            raise DomainError(f"aleatoric must be nonnegative: {self}")


@dataclass(frozen=True)
class AllocationInstance:
    total_budget: float
    items: tuple[UtilityParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if not self.items:
            raise DomainError("allocation instance needs at least one item")
        if not self.total_budget > 0:
            raise DomainError(f"total budget must be positive, got {self.total_budget}")

    @classmethod
    def from_arrays(cls, total_budget: float, c: Sequence[float], beta: Sequence[float]):
        if len(c) != len(beta):
            raise DomainError("c and beta must have equal length")
        return cls(total_budget, tuple(UtilityParams(ci, bi) for ci, bi in zip(c, beta)))

    @classmethod
    def from_dict(cls, data: dict) -> "AllocationInstance":
        """Build from ``{"B": ..., "items": [{"c": ..., "beta": ...}, ...]}``."""
        try:
            items = tuple(
                UtilityParams(
                    c=float(it["c"]),
                    beta=float(it["beta"]),
                    alpha=float(it.get("alpha", 1.0)),
                    aleatoric=float(it.get("aleatoric", 0.0)),
                )
                for it in data["items"]
            )
            return cls(float(data["B"]), items)
        except (KeyError, TypeError) as exc:
            raise DomainError(f"malformed allocation instance: {exc}") from exc

    @property
    def c(self) -> np.ndarray:
        return np.array([it.c for it in self.items], dtype=float)

    @property
    def beta(self) -> np.ndarray:
        return np.array([it.beta for it in self.items], dtype=float)


@dataclass(frozen=True)
class LagrangeSolution:
    budgets: tuple[float, ...]
    lam: float
    objective: float
    kkt_residual: float
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "budgets": list(self.budgets),
            "lambda": self.lam,
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
        }


@dataclass(frozen=True)
class UnimodalResult:
    beta_star: float
    f_star: float
    is_unimodal: bool
    interior_maxima: int


def utility(params: UtilityParams, budget: float) -> float:
    if not budget > 0:
        raise DomainError(f"budget must be positive, got {budget}")
    return params.alpha * (1.0 - params.c / budget**params.beta - params.aleatoric)


def objective(c, beta, budgets) -> float:
    """Epistemic remainder ``sum(c / b**beta)`` that the allocators minimise."""
    c, beta, b = (np.asarray(x, dtype=float) for x in (c, beta, budgets))
    return float(np.sum(c / b**beta))


def marginal_gains(c, beta, budgets) -> np.ndarray:
    c, beta, b = (np.asarray(x, dtype=float) for x in (c, beta, budgets))
    return c * beta * b ** (-(beta + 1.0))


def _spread(values: np.ndarray) -> float:
    hi = float(np.max(values))
    return 0.0 if hi == 0 else float((hi - np.min(values)) / hi)


def allocate_closed_form(instance: AllocationInstance) -> tuple[float, ...]:
    if len(instance.items) == 1:
        return (float(instance.total_budget),)
    c, beta = instance.c, instance.beta
    # log-space keeps (c*beta)**(1/(beta+1)) finite for extreme parameters
    log_num = np.log(c * beta) / (beta + 1.0)
    weights = np.exp(log_num - log_num.max())
    budgets = instance.total_budget * weights / weights.sum()
    return tuple(float(b) for b in budgets)


def _budgets_at(log_lam: float, log_cb: np.ndarray, inv: np.ndarray) -> np.ndarray:
    return np.exp((log_cb - log_lam) * inv)


def allocate_kkt(instance: AllocationInstance, tol: float = DEFAULT_TOL) -> LagrangeSolution:
    if not tol > 0:
        raise DomainError(f"tol must be positive, got {tol}")
    B = float(instance.total_budget)
    c, beta = instance.c, instance.beta

    if len(instance.items) == 1:
        lam = float(marginal_gains(c, beta, [B])[0])
        return LagrangeSolution((B,), lam, objective(c, beta, [B]), 0.0, 0)

    log_cb = np.log(c * beta)
    inv = 1.0 / (beta + 1.0)

    def total(log_lam):
        return float(np.sum(_budgets_at(log_lam, log_cb, inv)))

    # sum of budgets is strictly decreasing in lambda; bracket from lambda = 1
    lo = hi = 0.0
    step = math.log(2.0)
    iters = 0
    if total(0.0) > B:
        while total(hi) > B:
            lo, hi = hi, hi + step
            step *= 2
            iters += 1
            if iters > MAX_ITER:
                raise SolverError("could not bracket lambda", abs(total(hi) - B) / B)
    else:
        while total(lo) < B:
            lo, hi = lo - step, lo
            step *= 2
            iters += 1
            if iters > MAX_ITER:
                raise SolverError("could not bracket lambda", abs(total(lo) - B) / B)

    # bisect to full double precision; tol only decides success
    mid = 0.5 * (lo + hi)
    it = 0
    while it < MAX_ITER and hi - lo > 1e-15 * (1.0 + abs(mid)):
        it += 1
        mid = 0.5 * (lo + hi)
        s = total(mid)
        if s == B:
            break
        if s > B:
            lo = mid
        else:
            hi = mid
    residual = abs(total(mid) - B) / B
    if residual > tol:
        raise SolverError("lambda bisection did not converge", residual)

    budgets = _budgets_at(mid, log_cb, inv)
    gains = marginal_gains(c, beta, budgets)
    return LagrangeSolution(
        budgets=tuple(float(b) for b in budgets),
        lam=float(math.exp(mid)),
        objective=objective(c, beta, budgets),
        kkt_residual=_spread(gains),
        iterations=it,
    )


def allocation_kernel(beta, c: float):
    """``f(beta) = (beta * c) ** (1 / (beta + 1))``, the numerator of the closed form."""
    beta = np.asarray(beta, dtype=float)
    return np.exp(np.log(beta * c) / (beta + 1.0))


def kernel_log_derivative(beta: float, c: float) -> float:
    """Derivative of ``log f``; its root is the interior maximiser of ``f``."""
    return 1.0 / (beta * (beta + 1.0)) - math.log(beta * c) / (beta + 1.0) ** 2


def unimodal_argmax(c: float, beta_range: tuple[float, float], grid_step: float) -> UnimodalResult:
    lo, hi = beta_range
    if not (0 < lo < hi) or not grid_step > 0:
        raise DomainError(f"need 0 < lo < hi and positive step, got {beta_range}, {grid_step}")
    n = int(math.floor((hi - lo) / grid_step + 1e-9)) + 1
    if n < 3:
        raise DomainError("beta range holds fewer than 3 grid points")
    grid = lo + grid_step * np.arange(n)
    f = allocation_kernel(grid, c)

    signs = np.sign(np.diff(f))
    signs = signs[signs != 0]
    changes = np.flatnonzero(signs[1:] != signs[:-1])
    is_unimodal = len(changes) == 0 or (len(changes) == 1 and signs[0] > 0)

    interior = np.flatnonzero((f[1:-1] > f[:-2]) & (f[1:-1] >= f[2:])) + 1
    k = int(interior[np.argmax(f[interior])]) if len(interior) else int(np.argmax(f))
    return UnimodalResult(float(grid[k]), float(f[k]), bool(is_unimodal), len(interior))
