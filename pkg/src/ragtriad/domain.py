"""Shared domain types for the retrieval QA pipeline.

Every stage of the pipeline exchanges the immutable types defined here:
questions, clinical schemas, evidence documents and sets, sufficiency
verdicts, retrieval trajectories, adjudication reports, answers, and the
run configuration. All models are frozen after construction and safe to
share across worker threads.
"""

from __future__ import annotations

import hashlib
from typing import Literal, Mapping, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

TaskKind = Literal["mcq4", "yn", "ynm"]

# Canonical label sets per task kind. Inputs are canonicalized
# case-insensitively onto these forms.
LABEL_SETS: dict[str, tuple[str, ...]] = {
    "mcq4": ("A", "B", "C", "D"),
    "yn": ("yes", "no"),
    "ynm": ("yes", "no", "maybe"),
}

Termination = Literal["sufficient", "max_rounds", "stagnation"]

DOC_ID_HEX_WIDTH = 16


class QuestionValidationError(ValueError):
    """Raised when a raw question record violates an invariant."""

    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f"{field}: {message}")


class EmptyOptions(QuestionValidationError):
    pass


class DuplicateLabel(QuestionValidationError):
    pass


class LabelSetMismatch(QuestionValidationError):
    pass


def derive_doc_id(source_corpus: str, title: str, text: str) -> str:
    """Deterministic document identifier: content hash as fixed-width hex.

    Equal (source, title, text) always hash to the same id, so rebuilt
    indices and replayed trajectories agree without a registry.
    """
    h = hashlib.sha256()
    for part in (source_corpus, title, text):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:DOC_ID_HEX_WIDTH]


class Question(BaseModel):
    """A discrete-choice question with a canonical label set."""

    model_config = ConfigDict(frozen=True)

    id: str
    stem: str
    options: dict[str, str]
    task_kind: TaskKind
    answer_key: Optional[str] = None

    @model_validator(mode="after")
    def _check_labels(self) -> "Question":
        expected = LABEL_SETS[self.task_kind]
        if not self.options:
            raise ValueError("options must be non-empty")
        if set(self.options) != set(expected):
            raise ValueError(
                f"label set {sorted(self.options)} does not match task kind "
                f"{self.task_kind} (expected {sorted(expected)})"
            )
        if self.answer_key is not None and self.answer_key not in self.options:
            raise ValueError(f"answer_key {self.answer_key!r} not in label set")
        return self

    @property
    def labels(self) -> tuple[str, ...]:
        return LABEL_SETS[self.task_kind]


def canonical_label(raw: str, task_kind: str) -> Optional[str]:
    """Map a raw label onto its canonical form, or None if unknown."""
    lowered = raw.strip().lower()
    for label in LABEL_SETS[task_kind]:
        if lowered == label.lower():
            return label
    return None


def validate_question(
    record: Mapping[str, object] | Question,
    task_kind: Optional[str] = None,
) -> Question:
    """Validate a raw parsed record (or re-validate a Question).

    Raises EmptyOptions, DuplicateLabel, or LabelSetMismatch naming the
    offending field. Options may be given as a mapping or as a sequence of
    (label, text) pairs; the pair form surfaces textual duplicates that a
    dict parse would silently collapse.
    """
    if isinstance(record, Question):
        record = {
            "id": record.id,
            "question": record.stem,
            "options": dict(record.options),
            "answer": record.answer_key,
            "task_kind": record.task_kind,
        }
    kind = task_kind or record.get("task_kind")
    if kind not in LABEL_SETS:
        raise LabelSetMismatch("task_kind", f"unknown task kind {kind!r}")

    raw_options = record.get("options")
    if isinstance(raw_options, Mapping):
        pairs = list(raw_options.items())
    elif isinstance(raw_options, Sequence) and not isinstance(raw_options, (str, bytes)):
        pairs = [(str(k), str(v)) for k, v in raw_options]
    else:
        raise EmptyOptions("options", "missing or not a label->text mapping")
    if not pairs:
        raise EmptyOptions("options", "must be non-empty")

    options: dict[str, str] = {}
    for raw_label, text in pairs:
        label = canonical_label(str(raw_label), kind)
        if label is None:
            raise LabelSetMismatch(
                "options", f"label {raw_label!r} not in {kind} label set"
            )
        if label in options:
            raise DuplicateLabel("options", f"label {label!r} appears twice")
        options[label] = str(text)
    if set(options) != set(LABEL_SETS[kind]):
        raise LabelSetMismatch(
            "options",
            f"labels {sorted(options)} do not cover the {kind} label set",
        )

    answer_key = None
    raw_answer = record.get("answer", record.get("answer_key"))
    if raw_answer is not None:
        answer_key = canonical_label(str(raw_answer), kind)
        if answer_key is None:
            raise LabelSetMismatch("answer", f"answer {raw_answer!r} not in label set")

    stem = str(record.get("question", record.get("stem", ""))).strip()
    if not stem:
        raise QuestionValidationError("question", "stem must be non-empty")

    return Question(
        id=str(record.get("id", "")) or "unidentified",
        stem=stem,
        options=options,
        task_kind=kind,
        answer_key=answer_key,
    )


class ClinicalSchema(BaseModel):
    """Structured interpretation of a question: intent, entities,
    constraints, and a concise initial retrieval query."""

    model_config = ConfigDict(frozen=True)

    intent: str
    entities: tuple[str, ...] = ()
    constraints: tuple[str, ...] = ()
    q_init: str

    @field_validator("intent", "q_init")
    @classmethod
    def _strip(cls, v: str) -> str:
        return v.strip()

    @field_validator("entities", "constraints")
    @classmethod
    def _no_empty_items(cls, v: tuple[str, ...]) -> tuple[str, ...]:
        items = tuple(item.strip() for item in v)
        if any(not item for item in items):
            raise ValueError("list fields must not contain empty strings")
        return items

    @model_validator(mode="after")
    def _q_init_nonempty(self) -> "ClinicalSchema":
        if not self.q_init:
            raise ValueError("q_init must be non-empty after trimming")
        return self


def degraded_schema(stem: str) -> ClinicalSchema:
    """Fallback schema used when interpretation is skipped or unparseable."""
    return ClinicalSchema(intent="unknown", entities=(), constraints=(), q_init=stem)


class EvidenceDoc(BaseModel):
    """One retrieved passage with a stable content-derived identifier."""

    model_config = ConfigDict(frozen=True)

    doc_id: str
    source_corpus: str
    title: str
    text: str
    embedding: Optional[tuple[float, ...]] = None

    @classmethod
    def from_content(
        cls,
        source_corpus: str,
        title: str,
        text: str,
        embedding: Optional[Sequence[float]] = None,
    ) -> "EvidenceDoc":
        return cls(
            doc_id=derive_doc_id(source_corpus, title, text),
            source_corpus=source_corpus,
            title=title,
            text=text,
            embedding=tuple(embedding) if embedding is not None else None,
        )


class EvidenceSet(BaseModel):
    """Ordered, duplicate-free accumulation of evidence documents.

    Merging preserves first-seen insertion order: documents already present
    keep their position and only unseen doc_ids are appended.
    """

    model_config = ConfigDict(frozen=True)

    docs: tuple[EvidenceDoc, ...] = ()

    @model_validator(mode="after")
    def _unique_ids(self) -> "EvidenceSet":
        ids = [d.doc_id for d in self.docs]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate doc_id in evidence set")
        return self

    @property
    def id_set(self) -> frozenset[str]:
        return frozenset(d.doc_id for d in self.docs)

    def __len__(self) -> int:
        return len(self.docs)

    def __iter__(self):
        return iter(self.docs)

    def merged(self, new_docs: Sequence[EvidenceDoc]) -> "EvidenceSet":
        seen = set(self.id_set)
        appended = list(self.docs)
        for doc in new_docs:
            if doc.doc_id not in seen:
                appended.append(doc)
                seen.add(doc.doc_id)
        return EvidenceSet(docs=tuple(appended))


class SufficiencyVerdict(BaseModel):
    """Audit outcome for one retrieval round: a binary sufficiency flag,
    a gap description, and follow-up queries targeting the gap."""

    model_config = ConfigDict(frozen=True)

    sufficiency: int
    gap: str
    next_queries: tuple[str, ...] = ()

    @field_validator("sufficiency")
    @classmethod
    def _binary(cls, v: int) -> int:
        if v not in (0, 1):
            raise ValueError("sufficiency must be 0 or 1")
        return v

    @field_validator("next_queries")
    @classmethod
    def _nonempty_queries(cls, v: tuple[str, ...]) -> tuple[str, ...]:
        items = tuple(q.strip() for q in v)
        if any(not q for q in items):
            raise ValueError("queries must be non-empty after trimming")
        return items

    @model_validator(mode="after")
    def _sufficient_is_terminal(self) -> "SufficiencyVerdict":
        if self.sufficiency == 1:
            if self.next_queries:
                raise ValueError("sufficient verdicts must carry no follow-up queries")
            if self.gap != "N/A":
                raise ValueError('sufficient verdicts must set gap to "N/A"')
        return self


class RoundLog(BaseModel):
    """Per-round trajectory entry."""

    model_config = ConfigDict(frozen=True)

    round_index: int = Field(ge=1)
    queries: tuple[str, ...]
    newly_added: tuple[str, ...]
    evidence_size: int = Field(ge=0)
    verdict: SufficiencyVerdict


class CostCounters(BaseModel):
    """Per-question resource counters."""

    model_config = ConfigDict(frozen=True)

    llm_calls: int = Field(default=0, ge=0)
    retrieval_ops: int = Field(default=0, ge=0)
    tokens_in: int = Field(default=0, ge=0)
    tokens_out: int = Field(default=0, ge=0)
    wall_ms: int = Field(default=0, ge=0)


class RetrievalTrajectory(BaseModel):
    """Complete log of the retrieval loop for one question."""

    model_config = ConfigDict(frozen=True)

    rounds: tuple[RoundLog, ...]
    rounds_executed: int = Field(ge=1)
    termination: Termination
    counters: CostCounters

    @model_validator(mode="after")
    def _consistent(self) -> "RetrievalTrajectory":
        if len(self.rounds) != self.rounds_executed:
            raise ValueError("rounds_executed must equal the number of round logs")
        sizes = [r.evidence_size for r in self.rounds]
        if any(b < a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("evidence_size must be non-decreasing across rounds")
        for position, r in enumerate(self.rounds, start=1):
            if r.round_index != position:
                raise ValueError("round_index must be sequential from 1")
        last_sufficient = self.rounds[-1].verdict.sufficiency == 1
        if (self.termination == "sufficient") != last_sufficient:
            raise ValueError("termination must match the final verdict")
        return self


class ReportClaim(BaseModel):
    """One adjudicated claim with its supporting source ids."""

    model_config = ConfigDict(frozen=True)

    claim: str
    source_ids: tuple[str, ...] = ()


class EvidenceReport(BaseModel):
    """Traceable adjudication of the converged evidence set."""

    model_config = ConfigDict(frozen=True)

    question_focus: str
    supporting: tuple[ReportClaim, ...] = ()
    conflicting: tuple[ReportClaim, ...] = ()
    synthesis: str = ""

    def cited_ids(self) -> frozenset[str]:
        cited: set[str] = set()
        for claim in self.supporting + self.conflicting:
            cited.update(claim.source_ids)
        return frozenset(cited)

    def is_traceable(self, id_set: frozenset[str]) -> bool:
        """True iff every cited source id resolves into the evidence set."""
        return self.cited_ids() <= id_set


class AnswerLabel(BaseModel):
    """Final discrete answer; always a member of the question's label set."""

    model_config = ConfigDict(frozen=True)

    label: str

    @field_validator("label")
    @classmethod
    def _nonempty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("label must be non-empty")
        return v


class RunConfig(BaseModel):
    """Knobs for a pipeline run.

    Defaults follow the evaluated setting: two loop rounds, sixteen
    candidates per query, at most three follow-up queries per round,
    temperature 1.0 for the interpreter/explorer and 0.0 for the arbiter.
    """

    model_config = ConfigDict(frozen=True)

    t_max: int = Field(default=2, ge=1)
    k: int = Field(default=16, ge=1)
    m: int = Field(default=3, ge=1)
    temp_interpreter_explorer: float = Field(default=1.0, ge=0.0)
    temp_arbiter: float = Field(default=0.0, ge=0.0)

    # backend selection and endpoint settings
    backend: Literal["mock", "http"] = "mock"
    base_url: str = "http://localhost:8080"
    chat_path: str = "/v1/chat/completions"
    model: str = "default"
    auth_env: str = "RAGTRIAD_API_KEY"
    request_timeout_s: float = 60.0
    mock_script: Optional[str] = None
    on_script_exhausted: Literal["error", "repeat_last"] = "error"

    # caching
    cache_enabled: bool = False
    cache_dir: str = ".ragtriad_cache"

    # resilience and budget
    max_retries: int = Field(default=3, ge=0)
    retry_base_delay_s: float = Field(default=0.1, ge=0.0)
    max_parse_retries: int = Field(default=1, ge=0)
    max_calls_per_question: int = Field(default=64, ge=1)
    max_tokens_per_question: int = Field(default=200_000, ge=1)
    max_inflight: int = Field(default=8, ge=1)

    # prompt construction
    evidence_char_limit: int = Field(default=800, ge=1)
    cumulative_queries: bool = True
    include_options_in_topic: bool = True
    strict_json: bool = False

    # ablation switches
    skip_interpreter: bool = False
    single_round: bool = False
    skip_adjudication: bool = False

    # harness
    workers: int = Field(default=4, ge=1)
    seed: int = 0
    deterministic_timing: bool = False
