"""Experiment runner: dataset ingestion, per-query pipelines and report output."""

from __future__ import annotations

import csv
import json
import logging
import shlex
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import yaml

from . import metrics
from .errors import DatasetError, DomainError, GatewayError, ParseError
from .gateway import DEFAULT_HARD_CUTOFF, Backend, BackendConfig, GenerationRequest, GenerationResponse
from .metrics import EvalReport, RunOutcome
from .prompting import (
    DATASET_PRESETS,
    DEFAULT_BENCHMARKS,
    DecompositionPlan,
    Method,
    PromptVariant,
    QueryRecord,
    parse_credits,
    parse_decomposition,
    render_decomposition_prompt,
    render_difficulty_prompt,
    render_reasoning_prompt,
)
from .scheduling import BudgetAllocation, ScheduleParams, schedule_and_allocate

log = logging.getLogger(__name__)

EVALUATORS = ("exact_match", "rouge_l", "external_pass_fail")
DEFAULT_LEVEL = 3


@dataclass(frozen=True)
class ExperimentConfig:
    method: Method = Method.PLAN_AND_BUDGET
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    budget_init: int = 50
    budget_per_level: int = 50
    hard_cutoff: int = DEFAULT_HARD_CUTOFF
    n_runs: int = 5
    concurrency: int = 4
    planner: BackendConfig = field(default_factory=BackendConfig)
    reasoner: BackendConfig = field(default_factory=BackendConfig)
    dataset_path: str | None = None
    dataset_name: str | None = None
    evaluator: str = "exact_match"
    external_command: str | None = None
    preset: str = "math"
    domain: str | None = None
    instruction: str | None = None
    output_format: str | None = None
    benchmarks: str = DEFAULT_BENCHMARKS
    default_level: int = DEFAULT_LEVEL
    output_dir: str | None = None
    figures: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.budget_init < 1:
            raise DomainError("budget_init must be at least 1")
        if self.budget_per_level < 0:
            raise DomainError("budget_per_level must be nonnegative")
        if self.hard_cutoff < self.budget_init:
            raise DomainError("hard_cutoff must be at least budget_init")
        if self.n_runs < 1:
            raise DomainError("n_runs must be at least 1")
        if self.concurrency < 1:
            raise DomainError("concurrency must be at least 1")
        if self.evaluator not in EVALUATORS:
            raise DomainError(f"evaluator must be one of {EVALUATORS}")
        if self.evaluator == "external_pass_fail" and not self.external_command:
            raise DomainError("external_pass_fail needs external_command")
        if self.preset not in DATASET_PRESETS:
            raise DomainError(f"unknown dataset preset {self.preset!r}")
        if not 1 <= self.default_level <= 5:
            raise DomainError("default_level must lie in [1, 5]")

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        if "schedule" in data:
            data["schedule"] = ScheduleParams.from_dict(data["schedule"] or {})
        for key in ("planner", "reasoner"):
            if key in data:
                data[key] = BackendConfig.from_dict(data[key])
        if base_dir is not None:
            for key in ("dataset_path", "output_dir"):
                if data.get(key) and not Path(data[key]).is_absolute():
                    data[key] = str(base_dir / data[key])
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data, base_dir=path.parent)

    @property
    def variant(self) -> PromptVariant:
        preset = DATASET_PRESETS[self.preset]
        return PromptVariant(
            self.method,
            self.instruction if self.instruction is not None else preset.instruction,
            self.output_format if self.output_format is not None else preset.output_format,
        )

    @property
    def method_label(self) -> str:
        if self.method is Method.PLAN_AND_BUDGET:
            return f"plan_and_budget/{self.schedule.kind.value}"
        return self.method.value


def load_dataset(path: str | Path, default_level: int = DEFAULT_LEVEL, domain: str = "mathematics") -> list[QueryRecord]:
    """Read and validate a JSONL dataset; every problem is reported before raising."""
    problems = []
    records = []
    seen = set()
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"line {lineno}: invalid JSON ({exc.msg})")
            continue
        if not isinstance(obj, dict):
            problems.append(f"line {lineno}: expected an object")
            continue
        bad = []
        if not isinstance(obj.get("id"), str) or not obj["id"]:
            bad.append("'id' must be a nonempty string")
        if not isinstance(obj.get("question"), str) or not obj["question"].strip():
            bad.append("'question' must be a nonempty string")
        if not isinstance(obj.get("answer"), str):
            bad.append("'answer' must be a string")
        level = obj.get("level", default_level)
        if isinstance(level, bool) or not isinstance(level, int) or not 1 <= level <= 5:
            bad.append("'level' must be an integer in [1, 5]")
        for key in ("reference", "domain"):
            if obj.get(key) is not None and not isinstance(obj[key], str):
                bad.append(f"'{key}' must be a string")
        if not bad and obj["id"] in seen:
            bad.append(f"duplicate id {obj['id']!r}")
        if bad:
            problems.append(f"line {lineno}: " + "; ".join(bad))
            continue
        seen.add(obj["id"])
        records.append(
            QueryRecord(
                id=obj["id"],
                question=obj["question"],
                gold=obj["answer"],
                level=level,
                reference=obj.get("reference"),
                domain=obj.get("domain") or domain,
            )
        )
    if problems:
        raise DatasetError(f"dataset {path} failed validation", problems)
    if not records:
        raise DatasetError(f"dataset {path} is empty")
    return records


def compute_query_budget(record: QueryRecord, config: ExperimentConfig) -> int:
    level = record.level if record.level is not None else config.default_level
    return config.budget_init + config.budget_per_level * level


def final_answer(text: str) -> str:
    """Drop any ``<think>`` section and keep what follows a ``Final Answer:`` marker."""
    if "</think>" in text:
        text = text.rsplit("</think>", 1)[1]
    marker = "Final Answer:"
    if marker in text:
        text = text.rsplit(marker, 1)[1]
    return text.strip()


Evaluator = Callable[[str, QueryRecord], float]


def _external_evaluator(command: str) -> Evaluator:
    argv = shlex.split(command)

    def run(prediction: str, record: QueryRecord) -> float:
        payload = json.dumps(
            {"id": record.id, "question": record.question, "prediction": prediction, "gold": record.gold, "reference": record.reference}
        )
        proc = subprocess.run(argv, input=payload, capture_output=True, text=True, timeout=300)
        if proc.returncode != 0:
            raise RuntimeError(f"evaluator exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
        verdict = proc.stdout.strip().lower()
        if verdict in ("1", "true", "pass"):
            return 100.0
        if verdict in ("0", "false", "fail"):
            return 0.0
        raise RuntimeError(f"evaluator printed {verdict!r}, expected 0 or 1")

    return run


def make_evaluator(config: ExperimentConfig) -> Evaluator:
    if config.evaluator == "exact_match":
        return lambda pred, rec: metrics.exact_match(pred, rec.gold)
    if config.evaluator == "rouge_l":
        return lambda pred, rec: 100.0 * metrics.rouge_l(final_answer(pred), rec.gold)
    return _external_evaluator(config.external_command)


@dataclass
class CallRecord:
    phase: str
    prompt: str
    response: GenerationResponse | None = None

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "prompt": self.prompt,
            "response": self.response.to_dict() if self.response else None,
        }


@dataclass
class QueryExecution:
    record: QueryRecord
    run_index: int
    method: str
    total_budget: int
    plan: DecompositionPlan | None = None
    allocation: BudgetAllocation | None = None
    calls: list[CallRecord] = field(default_factory=list)
    prediction: str = ""
    score: float = 0.0
    failed: bool = False
    error: str | None = None
    model: str = ""
    dataset: str = ""

    @property
    def completion_tokens(self) -> int:
        return sum(c.response.completion_tokens for c in self.calls if c.response is not None)

    @property
    def outcome(self) -> RunOutcome:
        return RunOutcome(self.record.id, self.run_index, self.score, self.completion_tokens, self.failed)

    def prompt_for(self, phase: str) -> str | None:
        for c in reversed(self.calls):
            if c.phase == phase:
                return c.prompt
        return None

    def to_trace(self) -> dict:
        return {
            "query_id": self.record.id,
            "run_index": self.run_index,
            "method": self.method,
            "model": self.model,
            "dataset": self.dataset,
            "level": self.record.level,
            "total_budget": self.total_budget,
            "plan": self.plan.to_dict() if self.plan else None,
            "allocation": self.allocation.to_dict() if self.allocation else None,
            "calls": [c.to_dict() for c in self.calls],
            "latency_s": {c.phase: c.response.latency_s for c in self.calls if c.response is not None},
            "prediction": self.prediction,
            "score": self.score,
            "completion_tokens": self.completion_tokens,
            "failed": self.failed,
            "error": self.error,
        }


class _Caller:
    def __init__(self, execution: QueryExecution, config: ExperimentConfig):
        self.execution = execution
        self.config = config

    def __call__(self, backend: Backend, backend_cfg: BackendConfig, phase: str, prompt: str) -> GenerationResponse:
        ex = self.execution
        call = CallRecord(phase, prompt)
        ex.calls.append(call)
        request = GenerationRequest.user(
            backend_cfg.model,
            prompt,
            max_tokens=self.config.hard_cutoff,
            temperature=backend_cfg.temperature,
            request_id=f"{ex.record.id}/run{ex.run_index}/{phase}",
        )
        call.response = backend.generate(request)
        return call.response


def _with_parse_retry(call, parse, phase: str):
    # the planner gets exactly one retry with the identical prompt
    try:
        return parse(call(phase).text)
    except ParseError as exc:
        log.warning("%s parse failed (%s); retrying once", phase, exc)
    return parse(call(phase).text)


def _plan(call: _Caller, ex: QueryExecution, config: ExperimentConfig, planner: Backend) -> DecompositionPlan:
    record = ex.record
    decomposition_prompt = render_decomposition_prompt(record)
    plan = _with_parse_retry(
        lambda phase: call(planner, config.planner, phase, decomposition_prompt), parse_decomposition, "decompose"
    )
    ex.plan = plan
    difficulty_prompt = render_difficulty_prompt(record, plan, config.benchmarks)
    credits, levels, problem_level = _with_parse_retry(
        lambda phase: call(planner, config.planner, phase, difficulty_prompt),
        lambda text: parse_credits(text, len(plan)),
        "credit",
    )
    ex.plan = plan.with_credits(credits, levels, problem_level)
    return ex.plan


def plan_query(record: QueryRecord, config: ExperimentConfig, planner: Backend) -> QueryExecution:
    """Run only the two planner calls; the returned execution holds the plan and its calls."""
    ex = QueryExecution(record, 0, "plan", compute_query_budget(record, config), model=config.planner.model)
    _plan(_Caller(ex, config), ex, config, planner)
    return ex


def execute_query(
    record: QueryRecord,
    config: ExperimentConfig,
    planner: Backend | None,
    reasoner: Backend,
    run_index: int = 0,
    evaluator: Evaluator | None = None,
) -> QueryExecution:
    method = config.method
    evaluator = evaluator or make_evaluator(config)
    if record.level is None:
        record = QueryRecord(record.id, record.question, record.gold, config.default_level, record.reference, record.domain)
    ex = QueryExecution(
        record=record,
        run_index=run_index,
        method=config.method_label,
        total_budget=compute_query_budget(record, config),
        model=config.reasoner.model,
        dataset=config.dataset_name or "",
    )
    call = _Caller(ex, config)
    try:
        plan = None
        if method.planned:
            if planner is None:
                raise DomainError(f"method {method.value} needs a planner backend")
            plan = _plan(call, ex, config, planner)
        if method is Method.PLAN_AND_BUDGET:
            ex.allocation = schedule_and_allocate(plan.credits, config.schedule, ex.total_budget)
        prompt = render_reasoning_prompt(
            config.variant,
            record,
            plan=plan,
            budgets=ex.allocation,
            global_budget=ex.total_budget if method.global_budget else None,
        )
        response = call(reasoner, config.reasoner, "reason", prompt)
        ex.prediction = response.text
        ex.score = float(evaluator(response.text, record))
    except (ParseError, GatewayError, DomainError, RuntimeError, subprocess.SubprocessError) as exc:
        log.error("query %s run %d failed: %s", record.id, run_index, exc)
        ex.failed = True
        ex.score = 0.0
        ex.error = f"{type(exc).__name__}: {exc}"
    return ex


@dataclass
class ExperimentResult:
    report: EvalReport
    executions: list[QueryExecution]

    @property
    def outcomes(self) -> list[RunOutcome]:
        return [e.outcome for e in self.executions]

    def trace_lines(self) -> list[str]:
        return [json.dumps(e.to_trace(), sort_keys=True) for e in self.executions]


def run_experiment(
    config: ExperimentConfig,
    records: Sequence[QueryRecord] | None = None,
    planner: Backend | None = None,
    reasoner: Backend | None = None,
    evaluator: Evaluator | None = None,
    output_dir: str | Path | None = None,
) -> ExperimentResult:
    if records is None:
        if not config.dataset_path:
            raise DatasetError("no dataset_path configured")
        preset_domain = config.domain or DATASET_PRESETS[config.preset].domain
        records = load_dataset(config.dataset_path, config.default_level, preset_domain)
    if not records:
        raise DatasetError("dataset is empty")
    if len({r.id for r in records}) != len(records):
        raise DatasetError("dataset query ids are not unique")
    if config.dataset_name is None and config.dataset_path:
        config = replace(config, dataset_name=Path(config.dataset_path).stem)

    own = []
    if reasoner is None:
        reasoner = config.reasoner.build()
        own.append(reasoner)
    if planner is None and config.method.planned:
        planner = config.planner.build()
        own.append(planner)
    evaluator = evaluator or make_evaluator(config)

    tasks = [(rec, r) for r in range(config.n_runs) for rec in records]
    sink: list[QueryExecution] = []
    lock = threading.Lock()

    def work(task):
        rec, r = task
        ex = execute_query(rec, config, planner, reasoner, r, evaluator)
        with lock:
            sink.append(ex)

    try:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            list(pool.map(work, tasks))
    finally:
        for b in own:
            b.close()

    executions = sorted(sink, key=lambda e: (e.record.id, e.run_index))
    report = metrics.aggregate(
        (e.outcome for e in executions),
        config.n_runs,
        method=config.method_label,
        model=config.reasoner.model,
        dataset=config.dataset_name or "",
    )
    result = ExperimentResult(report, executions)
    out = output_dir or config.output_dir
    if out:
        write_outputs(result, out, figures=config.figures)
    return result


def write_reports(reports: Sequence[EvalReport], out_dir: Path, stem: str = "report", figures: bool = True) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f"{stem}.csv", out_dir / f"{stem}.json"]
    paths[0].write_text(metrics.reports_to_csv(reports), encoding="utf-8")
    paths[1].write_text(metrics.reports_to_json(reports), encoding="utf-8")
    if figures:
        from .plotting import plot_reports

        paths.append(plot_reports(reports, out_dir / f"{stem}.png"))
    return paths


def write_outputs(result: ExperimentResult, out_dir: str | Path, figures: bool = True) -> list[Path]:
    out_dir = Path(out_dir)
    paths = write_reports([result.report], out_dir, figures=figures)
    trace = out_dir / "trace.jsonl"
    trace.write_text("".join(line + "\n" for line in result.trace_lines()), encoding="utf-8")
    paths.append(trace)
    if figures:
        from .plotting import plot_runs

        paths.append(plot_runs(result.executions, out_dir / "runs.png"))
    return paths


def load_traces(paths: Iterable[str | Path]) -> list[dict]:
    rows = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        rows.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise DatasetError(f"{path}:{lineno}: invalid trace line ({exc.msg})") from exc
    return rows


def reaggregate(trace_rows: Iterable[dict]) -> list[EvalReport]:
    """One report per (method, model, dataset) group found in the traces."""
    groups: dict[tuple[str, str, str], list[RunOutcome]] = {}
    for row in trace_rows:
        key = (row.get("method", ""), row.get("model", ""), row.get("dataset", ""))
        groups.setdefault(key, []).append(
            RunOutcome(row["query_id"], int(row["run_index"]), float(row["score"]), int(row["completion_tokens"]), bool(row.get("failed")))
        )
    return [
        metrics.aggregate(outs, method=m, model=mo, dataset=d)
        for (m, mo, d), outs in sorted(groups.items())
    ]


TABLE_TOLERANCE = 0.02


@dataclass(frozen=True)
class TableCheck:
    label: str
    score: float
    tokens: float
    printed_e3: float
    computed_e3: float
    printed_a_over_t: float | None
    computed_a_over_t: float
    e3_deviation: float
    a_over_t_deviation: float | None
    passed: bool


def _decimals(text: str) -> int:
    return len(text.split(".", 1)[1]) if "." in text else 0


def check_table_row(score: str, tokens: str, printed_e3: str, printed_a_over_t: str | None = None, label: str = "", tol: float = TABLE_TOLERANCE) -> TableCheck:
    a, t = float(score), float(tokens)
    e = metrics.e3(a, t)
    at = metrics.a_over_t(a, t)
    e_dev = abs(round(e, _decimals(printed_e3)) - float(printed_e3))
    at_dev = None
    if printed_a_over_t:
        at_dev = abs(round(at, _decimals(printed_a_over_t)) - float(printed_a_over_t))
    passed = e_dev <= tol + 1e-9 and (at_dev is None or at_dev <= tol + 1e-9)
    return TableCheck(
        label, a, t, float(printed_e3), e, float(printed_a_over_t) if printed_a_over_t else None, at, e_dev, at_dev, passed
    )


def default_fixture() -> Path:
    from importlib import resources

    return Path(str(resources.files("planbudget").joinpath("data", "published_tables.csv")))


def verify_tables(fixture_path: str | Path | None = None, tol: float = TABLE_TOLERANCE) -> list[TableCheck]:
    path = Path(fixture_path) if fixture_path else default_fixture()
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DatasetError(f"cannot read fixture {path}: {exc}") from exc
    checks = []
    for k, row in enumerate(rows, 2):
        try:
            label = " / ".join(row[c] for c in ("dataset", "model", "method") if row.get(c)) or f"row {k}"
            checks.append(
                check_table_row(row["score"], row["tokens"], row["printed_e3"], row.get("printed_a_over_t") or None, label, tol)
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"{path}: malformed fixture row {k}: {exc}") from exc
    return checks
