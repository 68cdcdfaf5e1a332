"""Dataset loading, batch evaluation, metrics, and persistence.

Metrics follow the cost-analysis convention: accuracy plus per-question
means of LLM calls, retrieval operations, wall time, and tokens. Token
accounting is reported in both directions and as their sum, since provider
conventions differ.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field

from .corpus import Embedder, VectorIndex
from .domain import Question, QuestionValidationError, RunConfig, validate_question
from .gateway import LLMGateway
from .pipeline import QuestionRecord, answer_question

logger = logging.getLogger(__name__)


class DatasetError(Exception):
    pass


class RunMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    accuracy: float = Field(ge=0.0, le=1.0)
    calls_per_q: float = Field(ge=0.0)
    retr_per_q: float = Field(ge=0.0)
    time_per_q: float = Field(ge=0.0)
    tokens_per_q: float = Field(ge=0.0)
    tokens_in_per_q: float = Field(ge=0.0)
    tokens_out_per_q: float = Field(ge=0.0)
    n_questions: int = Field(ge=0)


def load_dataset(
    path: str | Path, task_kind: str
) -> tuple[list[Question], list[str]]:
    """Load and validate a JSONL dataset.

    Malformed lines are rejected individually and reported as
    "line N: reason" strings; an empty result is an error. Duplicate
    option labels inside one JSON object are caught before the dict parse
    collapses them.
    """
    questions: list[Question] = []
    errors: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw, object_pairs_hook=_pairs_aware)
            except json.JSONDecodeError as exc:
                errors.append(f"line {line_no}: invalid JSON: {exc}")
                continue
            if not isinstance(record, dict):
                errors.append(f"line {line_no}: record is not an object with unique keys")
                continue
            try:
                questions.append(validate_question(record, task_kind))
            except (QuestionValidationError, ValueError, TypeError) as exc:
                errors.append(f"line {line_no}: {exc}")
    for message in errors:
        logger.warning("%s: %s", path, message)
    if not questions:
        raise DatasetError(f"{path}: no valid questions loaded ({len(errors)} rejected)")
    logger.info("%s: loaded %d questions, rejected %d lines", path, len(questions), len(errors))
    return questions, errors


def _pairs_aware(pairs):
    # options keep their raw pair list so duplicate labels stay visible
    keys = [k for k, _ in pairs]
    if len(keys) != len(set(keys)):
        return list(pairs)
    return dict(pairs)


class BenchmarkResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    metrics: RunMetrics
    records: tuple[QuestionRecord, ...]


def run_benchmark(
    dataset: Sequence[Question],
    config: RunConfig,
    index: VectorIndex,
    embedder: Embedder,
    gateway: LLMGateway,
) -> BenchmarkResult:
    """Run the full pipeline over every question.

    Questions fan out to a bounded worker pool; per-question failures are
    recorded, never raised. Records come back in dataset order. Scripted
    mock runs that depend on response ordering should use workers=1.
    """

    def run_one(question: Question) -> QuestionRecord:
        try:
            return answer_question(question, index, embedder, gateway, config)
        except Exception as exc:  # noqa: BLE001 - last resort; stages already degrade internally
            logger.error("question %s failed outside the pipeline: %s", question.id, exc)
            return QuestionRecord(
                id=question.id,
                task_kind=question.task_kind,
                answer_key=question.answer_key,
                abstained=True,
                error=f"{type(exc).__name__}: {exc}",
            )

    if config.workers == 1:
        records = [run_one(q) for q in dataset]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            records = list(pool.map(run_one, dataset))
    return BenchmarkResult(metrics=compute_metrics(records), records=tuple(records))


def compute_metrics(records: Sequence[QuestionRecord]) -> RunMetrics:
    n = len(records)
    if n == 0:
        return RunMetrics(
            accuracy=0.0,
            calls_per_q=0.0,
            retr_per_q=0.0,
            time_per_q=0.0,
            tokens_per_q=0.0,
            tokens_in_per_q=0.0,
            tokens_out_per_q=0.0,
            n_questions=0,
        )
    tokens_in = sum(r.counters.tokens_in for r in records)
    tokens_out = sum(r.counters.tokens_out for r in records)
    return RunMetrics(
        accuracy=sum(1 for r in records if r.correct) / n,
        calls_per_q=sum(r.counters.llm_calls for r in records) / n,
        retr_per_q=sum(r.counters.retrieval_ops for r in records) / n,
        time_per_q=sum(r.time_s for r in records) / n,
        tokens_per_q=(tokens_in + tokens_out) / n,
        tokens_in_per_q=tokens_in / n,
        tokens_out_per_q=tokens_out / n,
        n_questions=n,
    )


def record_to_json(record: QuestionRecord) -> str:
    return json.dumps(record.model_dump(mode="json", by_alias=True), ensure_ascii=False, sort_keys=True)


def write_records(records: Sequence[QuestionRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record_to_json(record) + "\n")


def read_records(path: str | Path) -> list[QuestionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(QuestionRecord.model_validate_json(line))
    return records


def summary_text(metrics: RunMetrics) -> str:
    rows = [
        ("questions", f"{metrics.n_questions}"),
        ("accuracy", f"{metrics.accuracy:.4f}"),
        ("calls/q", f"{metrics.calls_per_q:.2f}"),
        ("retrieval/q", f"{metrics.retr_per_q:.2f}"),
        ("time/q (s)", f"{metrics.time_per_q:.3f}"),
        ("tokens/q", f"{metrics.tokens_per_q:.1f}"),
        ("tokens in/q", f"{metrics.tokens_in_per_q:.1f}"),
        ("tokens out/q", f"{metrics.tokens_out_per_q:.1f}"),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


def write_report(
    out_dir: str | Path,
    metrics: RunMetrics,
    records: Optional[Sequence[QuestionRecord]] = None,
) -> dict[str, Path]:
    """Emit summary.json, summary.txt, and (when given) records.jsonl."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "summary_json": out_dir / "summary.json",
        "summary_txt": out_dir / "summary.txt",
    }
    paths["summary_json"].write_text(
        json.dumps(metrics.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    paths["summary_txt"].write_text(summary_text(metrics) + "\n", encoding="utf-8")
    if records is not None:
        paths["records"] = out_dir / "records.jsonl"
        write_records(records, paths["records"])
    return paths


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Config file (JSON) plus explicit overrides; secrets come only from
    the environment variable the config names, never from the file."""
    data: dict = {}
    if path is not None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise DatasetError(f"{path}: config must be a JSON object")
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.model_validate(data)
