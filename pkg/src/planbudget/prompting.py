"""Prompt templates and planner-output parsers.

Templates live in ``templates/*.txt`` with ``<name>`` placeholders. A line
holding ``<reference>`` is dropped entirely when the query has no reference
text, so only reference-bearing datasets see that line.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .errors import DomainError, ParseError
from .scheduling import BudgetAllocation, allocate, normalize_weights

log = logging.getLogger(__name__)

PLACEHOLDERS = (
    "domain",
    "problem",
    "level",
    "query",
    "reference",
    "decomposed",
    "budget",
    "benchmarks",
    "steps",
    "instruction",
    "output_format",
)
PLACEHOLDER_RE = re.compile(r"<(%s)>" % "|".join(PLACEHOLDERS))
LOCAL_BUDGET_PHRASE = "Please only think a little, and directly solve it using up to {budget} words."
DECOMPOSITION_CUE = "Decomposed Sub-questions:"


class Method(str, Enum):
    VANILLA = "vanilla"
    GLOBAL_BUDGET = "global_budget"
    PLANNED_VANILLA = "planned_vanilla"
    PLANNED_GLOBAL = "planned_global"
    PLAN_AND_BUDGET = "plan_and_budget"

    @property
    def planned(self) -> bool:
        return self in (Method.PLANNED_VANILLA, Method.PLANNED_GLOBAL, Method.PLAN_AND_BUDGET)

    @property
    def global_budget(self) -> bool:
        return self in (Method.GLOBAL_BUDGET, Method.PLANNED_GLOBAL)


@dataclass(frozen=True)
class DatasetPreset:
    domain: str
    instruction: str
    output_format: str


DATASET_PRESETS = {
    "math": DatasetPreset(
        domain="mathematics",
        instruction="Solve the following math problem.",
        output_format="Final Answer: $\\boxed{ANSWER}$, where ANSWER is the final simplified answer.",
    ),
    "instruction": DatasetPreset(
        domain="natural language instruction following",
        instruction="Follow the task definition and respond to the given input.",
        output_format="Final Answer: followed by your response on a single line.",
    ),
    "travel": DatasetPreset(
        domain="travel planning",
        instruction="Plan a trip that satisfies every requirement in the query, using only the reference information.",
        output_format="Final Answer: followed by the day-by-day plan.",
    ),
}


@dataclass(frozen=True)
class QueryRecord:
    id: str
    question: str
    gold: str = ""
    level: int | None = 3
    reference: str | None = None
    domain: str = "mathematics"

    def __post_init__(self):
        if not self.question or not self.question.strip():
            raise DomainError(f"query {self.id!r} has an empty question")
        if self.level is not None and not 1 <= self.level <= 5:
            raise DomainError(f"query {self.id!r} level must lie in [1, 5], got {self.level}")


@dataclass(frozen=True)
class SubQuestion:
    index: int
    text: str
    hint: str = ""


@dataclass(frozen=True)
class DecompositionPlan:
    subquestions: tuple[SubQuestion, ...]
    credits: tuple[int, ...] | None = None
    evaluated_levels: tuple[int | None, ...] | None = None
    problem_level: int | None = None

    def __len__(self):
        return len(self.subquestions)

    def with_credits(self, credits, levels=None, problem_level=None) -> "DecompositionPlan":
        return DecompositionPlan(self.subquestions, tuple(credits), levels and tuple(levels), problem_level)

    def to_dict(self) -> dict:
        return {
            "subquestions": [{"index": s.index, "text": s.text, "hint": s.hint} for s in self.subquestions],
            "credits": list(self.credits) if self.credits is not None else None,
            "evaluated_levels": list(self.evaluated_levels) if self.evaluated_levels is not None else None,
            "problem_level": self.problem_level,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DecompositionPlan":
        subs = tuple(SubQuestion(int(s["index"]), s["text"], s.get("hint", "")) for s in data["subquestions"])
        credits = data.get("credits")
        levels = data.get("evaluated_levels")
        return cls(subs, tuple(credits) if credits else None, tuple(levels) if levels else None, data.get("problem_level"))


@dataclass(frozen=True)
class PromptVariant:
    kind: Method
    instruction: str = DATASET_PRESETS["math"].instruction
    output_format: str = DATASET_PRESETS["math"].output_format

    def __post_init__(self):
        object.__setattr__(self, "kind", Method(self.kind))

    @classmethod
    def for_dataset(cls, kind, preset: str | DatasetPreset = "math") -> "PromptVariant":
        if isinstance(preset, str):
            preset = DATASET_PRESETS[preset]
        return cls(kind, preset.instruction, preset.output_format)


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files("planbudget").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


def fill(template: str, values: dict[str, object]) -> str:
    """Substitute placeholders in one pass; substituted text is never rescanned."""
    lines = []
    for line in template.splitlines():
        if "<reference>" in line and values.get("reference") is None:
            continue
        lines.append(line)
    text = "\n".join(lines)

    def sub(m):
        key = m.group(1)
        if key not in values or values[key] is None:
            raise DomainError(f"missing value for placeholder <{key}>")
        return str(values[key])

    return PLACEHOLDER_RE.sub(sub, text)


def render_decomposition_prompt(record: QueryRecord) -> str:
    if record.level is None:
        raise DomainError(f"query {record.id!r} has no difficulty level")
    return fill(
        load_template("decomposition"),
        {"domain": record.domain, "problem": record.question, "level": record.level},
    )


def serialize_plan(plan: DecompositionPlan, budgets: Sequence[int] | None = None) -> str:
    blocks = []
    for k, sub in enumerate(plan.subquestions):
        lines = [f"{sub.index}. {sub.text}"]
        if budgets is not None:
            lines.append(LOCAL_BUDGET_PHRASE.format(budget=budgets[k]))
        if sub.hint:
            lines.append(f"Hint: {sub.hint}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


DEFAULT_BENCHMARKS = "No benchmark questions were supplied; rely on the level descriptions above."


def render_difficulty_prompt(record: QueryRecord, plan: DecompositionPlan, benchmarks: str = DEFAULT_BENCHMARKS) -> str:
    return fill(
        load_template("difficulty"),
        {
            "domain": record.domain,
            "benchmarks": benchmarks,
            "problem": record.question,
            "steps": "\n" + serialize_plan(plan),
        },
    )


def render_reasoning_prompt(
    variant: PromptVariant,
    record: QueryRecord,
    plan: DecompositionPlan | None = None,
    budgets: BudgetAllocation | Sequence[int] | None = None,
    global_budget: int | None = None,
) -> str:
    kind = variant.kind
    values: dict[str, object] = {
        "instruction": variant.instruction,
        "output_format": variant.output_format,
        "query": record.question,
        "reference": record.reference,
        "level": record.level,
    }
    if kind.planned:
        if plan is None:
            raise DomainError(f"{kind.value} prompt needs a decomposition plan (<decomposed>)")
        if kind is Method.PLAN_AND_BUDGET:
            if budgets is None:
                raise DomainError("plan_and_budget prompt needs per-sub-question budgets (<budget>)")
            per_item = budgets.budgets if isinstance(budgets, BudgetAllocation) else tuple(budgets)
            if len(per_item) != len(plan):
                raise DomainError(f"{len(per_item)} budgets for {len(plan)} sub-questions")
            values["decomposed"] = serialize_plan(plan, per_item)
        else:
            values["decomposed"] = serialize_plan(plan)
        if record.level is None:
            raise DomainError("planned prompts need a difficulty level (<level>)")
    if kind.global_budget:
        if global_budget is None:
            raise DomainError(f"{kind.value} prompt needs a global budget (<budget>)")
        values["budget"] = global_budget
    return fill(load_template(kind.value), values)


_ITEM = re.compile(r"^\s*(?:[-*]\s+)?(?:\*\*)?\s*(\d+)\s*[.)]\s*(?:\*\*)?\s*(.*)$")
_HINT = re.compile(r"^\s*(?:[-*]\s+)?(?:\*\*|_)?hint(?![a-z])\s*:?\s*(?:\*\*|_)?\s*:?\s*(.*)$", re.IGNORECASE)


def _clean(text: str) -> str:
    return re.sub(r"\s+", " ", text.replace("**", "")).strip()


def parse_decomposition(text: str) -> DecompositionPlan:
    items: list[list[str]] = []
    in_hint = False
    for line in text.splitlines():
        if not line.strip():
            continue
        m = _ITEM.match(line)
        if m and m.group(2).strip():
            items.append([m.group(2), ""])
            in_hint = False
            continue
        if not items:
            continue
        h = _HINT.match(line)
        if h:
            items[-1][1] = (items[-1][1] + " " + h.group(1)).strip()
            in_hint = True
        elif in_hint:
            items[-1][1] += " " + line
        else:
            items[-1][0] += " " + line
    subs = tuple(SubQuestion(k + 1, _clean(t), _clean(h)) for k, (t, h) in enumerate(items) if _clean(t))
    if not subs:
        raise ParseError("no numbered sub-questions found", raw=text)
    if not 2 <= len(subs) <= 5:
        log.warning("decomposition produced %d sub-questions (expected 2 to 5)", len(subs))
    return DecompositionPlan(subs)


def _extract_json(text: str) -> dict:
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        raise ParseError("no JSON object in planner output", raw=text)
    blob = text[start : end + 1]
    try:
        return json.loads(blob)
    except json.JSONDecodeError:
        pass
    # the prompt's own example omits the comma after the "problem" entry
    repaired = re.sub(r"\}\s*\n(\s*\")", r"},\n\1", blob)
    repaired = re.sub(r",\s*([}\]])", r"\1", repaired)
    try:
        return json.loads(repaired)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in planner output: {exc}", raw=text) from exc


def _level(entry) -> int | None:
    if not isinstance(entry, dict) or entry.get("evaluated_level") is None:
        return None
    try:
        return min(5, max(1, int(round(float(entry["evaluated_level"])))))
    except (TypeError, ValueError):
        return None


def repair_credits(credits: Sequence[float]) -> tuple[int, ...]:
    """Rescale to an integer vector summing to exactly 100 (ties go to the lower index)."""
    if len(credits) > 100:
        raise ParseError(f"cannot split 100 credits over {len(credits)} sub-questions")
    weights = normalize_weights(credits)
    return allocate(100, weights, [1.0] * len(weights), min_budget=1).budgets


def parse_credits(json_text: str, m: int) -> tuple[tuple[int, ...], tuple[int | None, ...], int | None]:
    """Returns ``(credits, per-sub-question levels, problem level)``."""
    if m < 1:
        raise DomainError(f"m must be at least 1, got {m}")
    data = _extract_json(json_text)
    if not isinstance(data, dict):
        raise ParseError("planner JSON is not an object", raw=json_text)
    raw_credits = []
    levels = []
    for j in range(1, m + 1):
        entry = data.get(str(j))
        if not isinstance(entry, dict) or "credit" not in entry:
            raise ParseError(f"missing credit entry for sub-question {j}", raw=json_text)
        try:
            credit = float(entry["credit"])
        except (TypeError, ValueError) as exc:
            raise ParseError(f"non-numeric credit for sub-question {j}", raw=json_text) from exc
        if not credit > 0:
            raise ParseError(f"nonpositive credit {credit} for sub-question {j}", raw=json_text)
        raw_credits.append(credit)
        levels.append(_level(entry))
    if raw_credits == [round(c) for c in raw_credits] and sum(raw_credits) == 100:
        credits = tuple(int(c) for c in raw_credits)
    else:
        log.info("repairing planner credits %s (sum %s)", raw_credits, sum(raw_credits))
        credits = repair_credits(raw_credits)
    return credits, tuple(levels), _level(data.get("problem"))


def residual_placeholders(text: str) -> list[str]:
    return PLACEHOLDER_RE.findall(text)
