"""Total / aleatoric / epistemic split for an ensemble of categorical predictions.

Offline analysis helper. The inference pipeline never samples ensembles; this
module exists to study the decomposition that motivates the budget model.

    total      = H[mean_m p_m]
    aleatoric  = mean_m H[p_m]
    epistemic  = total - aleatoric      (mutual information, >= 0)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import DomainError

NORMALIZATION_TOL = 1e-9


def _log_scale(base: str) -> float:
    if base in ("nats", "natural", "e"):
        return 1.0
    if base in ("bits", "2"):
        return 1.0 / math.log(2.0)
    raise DomainError(f"unknown log base {base!r}; use 'nats' or 'bits'")


def _check_distribution(p: np.ndarray) -> None:
    if p.ndim != 1 or p.size == 0:
        raise DomainError("distribution must be a nonempty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise DomainError("distribution has negative or non-finite entries")
    if abs(p.sum() - 1.0) > NORMALIZATION_TOL:
        raise DomainError(f"distribution sums to {p.sum():.12g}, not 1")


def _entropy_nats(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log(nz))))


def entropy(p, base: str = "nats") -> float:
    p = np.asarray(p, dtype=float)
    _check_distribution(p)
    return _entropy_nats(p) * _log_scale(base)


@dataclass(frozen=True)
class PredictiveEnsemble:
    members: np.ndarray
    base: str = "nats"

    def __post_init__(self):
        members = np.atleast_2d(np.asarray(self.members, dtype=float))
        if members.ndim != 2 or members.shape[0] < 1 or members.shape[1] < 1:
            raise DomainError("ensemble must be an (M, K) array with M, K >= 1")
        for row in members:
            _check_distribution(row)
        _log_scale(self.base)
        members.setflags(write=False)
        object.__setattr__(self, "members", members)

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def n_outcomes(self) -> int:
        return self.members.shape[1]

    @classmethod
    def from_dict(cls, data: dict) -> "PredictiveEnsemble":
        return cls(np.asarray(data["members"], dtype=float), data.get("base", "nats"))


@dataclass(frozen=True)
class UncertaintyReport:
    total: float
    aleatoric: float
    epistemic: float
    base: str = "nats"

    def to_dict(self) -> dict:
        return asdict(self)


def decompose(ensemble: PredictiveEnsemble) -> UncertaintyReport:
    scale = _log_scale(ensemble.base)
    mixture = ensemble.members.mean(axis=0)
    total = _entropy_nats(mixture) * scale
    aleatoric = float(np.mean([_entropy_nats(p) for p in ensemble.members])) * scale
    return UncertaintyReport(total, aleatoric, total - aleatoric, ensemble.base)
