"""Per-question orchestration: interpret, explore, adjudicate, answer.

The three ablation switches reduce the pipeline exactly as the role-wise
removal analysis defines them: without the interpreter the raw stem seeds
retrieval; without the explorer the loop runs a single round; without the
arbiter's adjudication phase the answerer reads the rendered evidence in
place of a report.
"""

from __future__ import annotations

import logging
import time
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from . import arbiter, explorer, interpreter
from .corpus import Embedder, VectorIndex
from .domain import (
    ClinicalSchema,
    CostCounters,
    EvidenceReport,
    Question,
    RetrievalTrajectory,
    RunConfig,
    degraded_schema,
)
from .gateway import CostMeter, LLMGateway

logger = logging.getLogger(__name__)


class QuestionRecord(BaseModel):
    """Everything one question produced, persisted one JSONL line each."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    id: str
    task_kind: str
    prediction: Optional[str] = None
    answer_key: Optional[str] = None
    correct: bool = False
    abstained: bool = False
    error: Optional[str] = None
    flags: tuple[str, ...] = ()
    # "schema" collides with a BaseModel attribute, hence the alias
    schema_: Optional[ClinicalSchema] = Field(default=None, alias="schema")
    trajectory: Optional[RetrievalTrajectory] = None
    report: Optional[EvidenceReport] = None
    counters: CostCounters = CostCounters()
    time_s: float = 0.0


def answer_question(
    question: Question,
    index: VectorIndex,
    embedder: Embedder,
    gateway: LLMGateway,
    config: RunConfig,
) -> QuestionRecord:
    """Run every stage, always returning a record.

    Failures mid-pipeline (budget ceilings, backend outages) keep whatever
    stages completed: a question aborted during adjudication still carries
    its schema and partial trajectory, flagged and scored incorrect.
    """
    meter = CostMeter()
    started = time.perf_counter()
    schema: Optional[ClinicalSchema] = None
    trajectory: Optional[RetrievalTrajectory] = None
    report: Optional[EvidenceReport] = None
    prediction: Optional[str] = None
    error: Optional[str] = None

    try:
        if config.skip_interpreter:
            schema = degraded_schema(question.stem)
            initial_query = question.stem
        else:
            schema = interpreter.interpret(question, gateway, config, meter)
            initial_query = interpreter.linearize(schema)

        evidence, trajectory = explorer.run_loop(
            schema, initial_query, index, embedder, gateway, config, meter
        )

        schema_text = explorer.render_schema(schema)
        query_list_text = explorer.render_query_list(explorer.issued_queries(trajectory))
        summaries = explorer.render_summaries(evidence, config.evidence_char_limit)

        if config.skip_adjudication:
            report_binding: EvidenceReport | str = summaries
        else:
            report = arbiter.adjudicate(
                question, schema_text, query_list_text, evidence, summaries, gateway, config, meter
            )
            report_binding = report

        label = arbiter.answer(question, report_binding, gateway, config, meter)
        prediction = label.label if label is not None else None
    except Exception as exc:  # noqa: BLE001 - one question must never take down a batch
        logger.error("question %s failed: %s: %s", question.id, type(exc).__name__, exc)
        error = f"{type(exc).__name__}: {exc}"
        meter.add_flag("aborted")

    elapsed = 0.0 if config.deterministic_timing else time.perf_counter() - started
    return QuestionRecord(
        id=question.id,
        task_kind=question.task_kind,
        prediction=prediction,
        answer_key=question.answer_key,
        correct=prediction is not None and prediction == question.answer_key,
        abstained=prediction is None,
        error=error,
        flags=tuple(meter.flags),
        schema_=schema,
        trajectory=trajectory,
        report=report,
        counters=meter.counters(wall_ms=int(elapsed * 1000)),
        time_s=elapsed,
    )
