"""Scoring and efficiency metrics.

``E3 = A**2 / T`` with ``A`` a percentage score and ``T`` the mean billed
completion tokens per query. ``A/T`` is reported multiplied by 100 so it sits
on the same scale as the published comparison tables.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from collections import defaultdict
from dataclasses import dataclass, asdict, fields
from fractions import Fraction
from typing import Iterable

from .errors import DomainError

REPORT_COLUMNS = (
    "method",
    "model",
    "dataset",
    "score_mean",
    "score_std",
    "tokens_mean",
    "tokens_std",
    "e3",
    "a_over_t",
    "n_runs",
)


def _check_tokens(avg_tokens: float) -> None:
    if not avg_tokens > 0:
        raise DomainError(f"average tokens must be positive, got {avg_tokens}")


def e3(accuracy_pct: float, avg_tokens: float) -> float:
    _check_tokens(avg_tokens)
    return accuracy_pct * accuracy_pct / avg_tokens


def a_over_t(accuracy_pct: float, avg_tokens: float) -> float:
    _check_tokens(avg_tokens)
    return accuracy_pct / avg_tokens * 100.0


_BOXED = re.compile(r"\\boxed\s*\{")
_WS = re.compile(r"\s+")


def extract_boxed(text: str) -> str | None:
    """Content of the innermost (last-opened) ``\\boxed{...}``, braces balanced."""
    starts = [m.end() for m in _BOXED.finditer(text)]
    if not starts:
        return None
    start = starts[-1]
    depth = 1
    for i in range(start, len(text)):
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start:i]
    return text[start:]


def normalize_answer(text: str) -> str:
    boxed = extract_boxed(text)
    if boxed is not None:
        text = boxed
    text = _WS.sub(" ", text.strip())
    return text.rstrip(".").strip()


def exact_match(prediction: str, gold: str) -> float:
    return 100.0 if normalize_answer(prediction) == normalize_answer(gold) else 0.0


def _lcs_length(a: list[str], b: list[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(prediction: str, reference: str) -> float:
    hyp = prediction.lower().split()
    ref = reference.lower().split()
    if not hyp or not ref:
        return 0.0
    lcs = _lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class RunOutcome:
    query_id: str
    run_index: int
    score: float
    completion_tokens: int
    failed: bool = False

    def __post_init__(self):
        if not 0 <= self.score <= 100:
            raise DomainError(f"score must lie in [0, 100], got {self.score}")
        if self.completion_tokens < 0:
            raise DomainError("completion tokens must be nonnegative")
        if self.run_index < 0:
            raise DomainError("run index must be nonnegative")


@dataclass(frozen=True)
class EvalReport:
    score_mean: float
    score_std: float
    tokens_mean: float
    tokens_std: float
    e3: float
    a_over_t: float
    n_runs: int
    method: str = ""
    model: str = ""
    dataset: str = ""

    def row(self) -> dict:
        data = asdict(self)
        return {k: data[k] for k in REPORT_COLUMNS}

    @classmethod
    def from_row(cls, row: dict) -> "EvalReport":
        kwargs = {}
        for f in fields(cls):
            v = row[f.name]
            if f.name == "n_runs":
                v = int(v)
            elif f.name not in ("method", "model", "dataset"):
                v = float(v)
            kwargs[f.name] = v
        return cls(**kwargs)


def _mean(values: list[Fraction]) -> Fraction:
    return sum(values, Fraction(0)) / len(values)


def _std(values: list[Fraction]) -> float:
    # a single run has no spread; report 0 rather than NaN
    if len(values) < 2:
        return 0.0
    mu = _mean(values)
    return math.sqrt(sum(((v - mu) ** 2 for v in values), Fraction(0)) / (len(values) - 1))


def aggregate(outcomes: Iterable[RunOutcome], n_runs: int | None = None, **labels) -> EvalReport:
    """Per-run means over queries, then mean and sample std over runs.

    Sums run in exact rational arithmetic and round once at the end, so the
    result does not depend on outcome order and matches a hand computation.
    """
    outcomes = sorted(outcomes, key=lambda o: (o.query_id, o.run_index))
    if not outcomes:
        raise DomainError("cannot aggregate an empty outcome set")
    by_run: dict[int, list[RunOutcome]] = defaultdict(list)
    seen = set()
    for o in outcomes:
        key = (o.query_id, o.run_index)
        if key in seen:
            raise DomainError(f"duplicate outcome for query {o.query_id!r} run {o.run_index}")
        seen.add(key)
        by_run[o.run_index].append(o)
    if n_runs is not None:
        if n_runs < 1:
            raise DomainError("n_runs must be at least 1")
        if set(by_run) - set(range(n_runs)):
            raise DomainError(f"outcomes reference run indices outside [0, {n_runs})")
    runs = sorted(by_run)
    run_scores = [_mean([Fraction(o.score) for o in by_run[r]]) for r in runs]
    run_tokens = [_mean([Fraction(o.completion_tokens) for o in by_run[r]]) for r in runs]
    score_mean = float(_mean(run_scores))
    tokens_mean = float(_mean(run_tokens))
    return EvalReport(
        score_mean=score_mean,
        score_std=_std(run_scores),
        tokens_mean=tokens_mean,
        tokens_std=_std(run_tokens),
        e3=e3(score_mean, tokens_mean) if tokens_mean > 0 else 0.0,
        a_over_t=a_over_t(score_mean, tokens_mean) if tokens_mean > 0 else 0.0,
        n_runs=len(runs),
        **labels,
    )


def reports_to_csv(reports: Iterable[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def reports_to_json(reports: Iterable[EvalReport]) -> str:
    return json.dumps([r.row() for r in reports], indent=2) + "\n"
