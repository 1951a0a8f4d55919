"""Decay-based scheduling of a query budget across ordered sub-questions.

A sub-question's share is proportional to ``w_j * rho_j``: its normalised
complexity weight times a positional decay prior that front-loads budget
toward early steps. Integer budgets come from floors plus largest-remainder
rounding, so they always sum to the query budget exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .errors import DomainError, InfeasibleError

# shares within this distance of an integer are treated as that integer
_SNAP = 1e-9


class ScheduleKind(str, Enum):
    UNIFORM = "uniform"
    WEIGHTED = "weighted"
    LINEAR = "linear"
    POLYNOMIAL = "polynomial"
    EXPONENTIAL = "exponential"
    COSINE = "cosine"


DECAY_KINDS = (ScheduleKind.LINEAR, ScheduleKind.POLYNOMIAL, ScheduleKind.EXPONENTIAL, ScheduleKind.COSINE)


@dataclass(frozen=True)
class ScheduleParams:
    kind: ScheduleKind = ScheduleKind.POLYNOMIAL
    p: float = 2.0
    gamma: float = 0.9
    epsilon: float = 0.01
    min_budget: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not 0 < self.gamma < 1:
            raise DomainError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.p > 0:
            raise DomainError(f"p must be positive, got {self.p}")
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if self.min_budget < 0:
            raise DomainError(f"min_budget must be nonnegative, got {self.min_budget}")

    @classmethod
    def from_dict(cls, data: dict) -> "ScheduleParams":
        keys = ("kind", "p", "gamma", "epsilon", "min_budget")
        return cls(**{k: data[k] for k in keys if k in data})

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "p": self.p,
            "gamma": self.gamma,
            "epsilon": self.epsilon,
            "min_budget": self.min_budget,
        }


@dataclass(frozen=True)
class BudgetAllocation:
    budgets: tuple[int, ...]
    total: int
    shares: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "budgets", tuple(self.budgets))
        object.__setattr__(self, "shares", tuple(self.shares))
        if sum(self.budgets) != self.total:
            raise DomainError(f"budgets {self.budgets} do not sum to {self.total}")

    def __len__(self):
        return len(self.budgets)

    def to_dict(self) -> dict:
        return {"total": self.total, "budgets": list(self.budgets), "shares": list(self.shares)}


def normalize_weights(scores: Sequence[float]) -> list[float]:
    scores = [float(s) for s in scores]
    if not scores:
        raise DomainError("complexity scores must be nonempty")
    if any(not s > 0 for s in scores):
        raise DomainError(f"complexity scores must be positive, got {scores}")
    total = math.fsum(scores)
    return [s / total for s in scores]


def decay_prior(params: ScheduleParams, m: int) -> list[float]:
    """Positional prior ``rho_j`` for 0-based ``j``; linear gives ``m, m-1, ..., 1``."""
    if m < 1:
        raise DomainError(f"m must be at least 1, got {m}")
    kind = params.kind
    if kind in (ScheduleKind.UNIFORM, ScheduleKind.WEIGHTED):
        return [1.0] * m
    if kind is ScheduleKind.LINEAR:
        return [float(m - j) for j in range(m)]
    if kind is ScheduleKind.POLYNOMIAL:
        return [float(m - j) ** params.p for j in range(m)]
    if kind is ScheduleKind.EXPONENTIAL:
        return [params.gamma**j for j in range(m)]
    if m == 1:
        return [1.0]
    return [0.5 * (1.0 + math.cos(math.pi * j / (m - 1))) + params.epsilon for j in range(m)]


def real_shares(total: float, weights: Sequence[float], prior: Sequence[float]) -> list[float]:
    if len(weights) != len(prior):
        raise DomainError(f"weights ({len(weights)}) and prior ({len(prior)}) differ in length")
    products = [w * r for w, r in zip(weights, prior)]
    norm = math.fsum(products)
    if not norm > 0:
        raise DomainError("weights times prior must have a positive sum")
    return [total * x / norm for x in products]


def _largest_remainder(total: int, shares: Sequence[float]) -> list[int]:
    floors = [math.floor(s + _SNAP) for s in shares]
    remainder = total - sum(floors)
    # larger fractional part first, lower index on ties
    order = sorted(range(len(shares)), key=lambda j: (-(shares[j] - floors[j]), j))
    for j in order[:remainder]:
        floors[j] += 1
    return floors


def _enforce_floor(budgets: list[int], min_budget: int) -> list[int]:
    while True:
        deficient = [j for j, b in enumerate(budgets) if b < min_budget]
        if not deficient:
            return budgets
        j = deficient[0]
        shortfall = min_budget - budgets[j]
        budgets[j] = min_budget
        while shortfall:
            donor = max(range(len(budgets)), key=lambda k: (budgets[k], -k))
            give = min(shortfall, budgets[donor] - min_budget)
            if give <= 0:
                raise InfeasibleError("cannot satisfy min_budget")
            budgets[donor] -= give
            shortfall -= give


def allocate(total: int, weights: Sequence[float], prior: Sequence[float], min_budget: int = 1) -> BudgetAllocation:
    if total < 1:
        raise DomainError(f"total budget must be a positive integer, got {total}")
    m = len(weights)
    if m * min_budget > total:
        raise InfeasibleError(f"{m} sub-questions x min_budget {min_budget} exceeds budget {total}")
    shares = real_shares(total, weights, prior)
    budgets = _enforce_floor(_largest_remainder(total, shares), min_budget)
    return BudgetAllocation(tuple(budgets), total, tuple(shares))


def schedule_and_allocate(scores: Sequence[float], params: ScheduleParams, total: int) -> BudgetAllocation:
    if params.kind is ScheduleKind.UNIFORM:
        weights = normalize_weights([1.0] * len(scores))
    else:
        weights = normalize_weights(scores)
    return allocate(total, weights, decay_prior(params, len(weights)), params.min_budget)
