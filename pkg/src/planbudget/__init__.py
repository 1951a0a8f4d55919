"""Plan-and-budget reasoning calibration: sub-question planning, token budget
allocation, budget-constrained generation and efficiency metrics."""

from .bam import AllocationInstance, UtilityParams, allocate_closed_form, allocate_kkt, unimodal_argmax, utility
from .metrics import EvalReport, RunOutcome, a_over_t, aggregate, e3, exact_match, rouge_l
from .scheduling import BudgetAllocation, ScheduleKind, ScheduleParams, schedule_and_allocate
from .uncertainty import PredictiveEnsemble, decompose, entropy

__version__ = "0.1.0"
