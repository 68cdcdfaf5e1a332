"""Evidence adjudication and final answer selection.

The arbiter first condenses the converged evidence set into a traceable
report (claims with source ids), then commits to one discrete answer
grounded in that report. Source ids citing documents outside the evidence
set are filtered before the report is emitted; answers that cannot be
parsed become explicit abstentions, never silent guesses.
"""

from __future__ import annotations

import json
import logging
import re
from typing import Optional, Sequence

from .domain import (
    AnswerLabel,
    EvidenceReport,
    EvidenceSet,
    Question,
    ReportClaim,
    RunConfig,
)
from .gateway import (
    CostMeter,
    JSONExtractionError,
    LLMGateway,
    extract_json_object,
    render,
    role_prompt,
)
from .interpreter import research_topic

logger = logging.getLogger(__name__)

FALLBACK_CLAIM_DOCS = 3


class ReportParseFailure(Exception):
    def __init__(self, raw_text: str, reason: str) -> None:
        self.raw_text = raw_text
        super().__init__(reason)


class AnswerParseError(Exception):
    pass


class NoLabelFound(AnswerParseError):
    pass


class AmbiguousLabel(AnswerParseError):
    pass


def fallback_report(question: Question, evidence: EvidenceSet, char_limit: int) -> EvidenceReport:
    """Degraded report: one verbatim-truncated claim per leading document."""
    supporting = tuple(
        ReportClaim(claim=doc.text[:char_limit], source_ids=(doc.doc_id,))
        for doc in evidence.docs[:FALLBACK_CLAIM_DOCS]
    )
    return EvidenceReport(
        question_focus=question.stem,
        supporting=supporting,
        conflicting=(),
        synthesis="fallback",
    )


def _claims_from(raw, key: str) -> list[ReportClaim]:
    claims = []
    for item in raw.get(key, []) or []:
        if not isinstance(item, dict):
            continue
        text = str(item.get("claim", "")).strip()
        if not text:
            continue
        ids = item.get("source_ids", []) or []
        claims.append(
            ReportClaim(
                claim=text,
                source_ids=tuple(str(i) for i in ids if str(i).strip()),
            )
        )
    return claims


def _parse_report(text: str, strict: bool) -> EvidenceReport:
    try:
        obj = extract_json_object(text, strict=strict)
    except JSONExtractionError as exc:
        raise ReportParseFailure(text, str(exc)) from exc
    focus = str(obj.get("question_focus", "")).strip()
    if not focus:
        raise ReportParseFailure(text, "missing question_focus")
    return EvidenceReport(
        question_focus=focus,
        supporting=tuple(_claims_from(obj, "key_supporting_evidence")),
        conflicting=tuple(_claims_from(obj, "key_conflicting_or_limiting_evidence")),
        synthesis=str(obj.get("evidence_synthesis", "")).strip(),
    )


def filter_report_sources(
    report: EvidenceReport,
    evidence: EvidenceSet,
    meter: CostMeter,
) -> EvidenceReport:
    """Enforce traceability closure: drop cited ids that do not resolve
    into the evidence set; drop claims whose citations all vanished."""
    id_set = evidence.id_set
    dropped: set[str] = set()

    def _filter(claims: Sequence[ReportClaim]) -> tuple[ReportClaim, ...]:
        kept = []
        for claim in claims:
            valid = tuple(i for i in claim.source_ids if i in id_set)
            dropped.update(set(claim.source_ids) - set(valid))
            if valid or not claim.source_ids:
                kept.append(ReportClaim(claim=claim.claim, source_ids=valid))
        return tuple(kept)

    supporting = _filter(report.supporting)
    conflicting = _filter(report.conflicting)
    if dropped:
        logger.warning("filtered %d untraceable source id(s): %s", len(dropped), sorted(dropped))
        meter.add_flag("report_ids_filtered")
    if supporting != report.supporting or conflicting != report.conflicting:
        report = EvidenceReport(
            question_focus=report.question_focus,
            supporting=supporting,
            conflicting=conflicting,
            synthesis=report.synthesis,
        )
    return report


def adjudicate(
    question: Question,
    schema_text: str,
    query_list_text: str,
    evidence: EvidenceSet,
    summaries: str,
    gateway: LLMGateway,
    config: RunConfig,
    meter: CostMeter,
) -> EvidenceReport:
    """Produce a traceable report over the evidence set. Unparseable model
    output falls back to verbatim-truncated claims from the leading
    documents, flagged in the run record."""
    prompt = render(
        role_prompt("adjudicator"),
        {
            "research_topic": research_topic(question, config.include_options_in_topic),
            "clinical_schema": schema_text,
            "query_list": query_list_text,
            "summaries": summaries,
        },
    )
    report: Optional[EvidenceReport] = None
    last_failure: ReportParseFailure | None = None
    for _ in range(config.max_parse_retries + 1):
        completion = gateway.complete("adjudicator", prompt, config.temp_arbiter, meter)
        try:
            report = _parse_report(completion.text, config.strict_json)
            break
        except ReportParseFailure as exc:
            last_failure = exc
    if report is None:
        logger.warning(
            "adjudicator output unparseable after %d attempt(s); raw text: %r",
            config.max_parse_retries + 1,
            last_failure.raw_text if last_failure else "",
        )
        meter.add_flag("report_fallback")
        return fallback_report(question, evidence, config.evidence_char_limit)

    report = filter_report_sources(report, evidence, meter)
    if not report.supporting and len(evidence) > 0:
        # a non-empty evidence set must yield at least one supported claim
        meter.add_flag("report_supporting_backfilled")
        fallback = fallback_report(question, evidence, config.evidence_char_limit)
        report = EvidenceReport(
            question_focus=report.question_focus,
            supporting=fallback.supporting,
            conflicting=report.conflicting,
            synthesis=report.synthesis,
        )
    return report


def render_report(report: EvidenceReport) -> str:
    """The {adjudication_report} binding."""
    return json.dumps(
        {
            "question_focus": report.question_focus,
            "key_supporting_evidence": [
                {"claim": c.claim, "source_ids": list(c.source_ids)} for c in report.supporting
            ],
            "key_conflicting_or_limiting_evidence": [
                {"claim": c.claim, "source_ids": list(c.source_ids)} for c in report.conflicting
            ],
            "evidence_synthesis": report.synthesis,
        },
        ensure_ascii=False,
        indent=2,
    )


_MARKER_RE = re.compile(r"final\s*answer\s*[:\-]?", re.IGNORECASE)


def _labels_in_tail(tail: str, allowed: Sequence[str]) -> list[str]:
    """Allowed labels appearing in the text after a final-answer marker.

    Single-letter labels match standalone in their canonical (upper) case,
    or case-insensitively when the tail is nothing but the label with
    optional brackets/punctuation; word labels (yes/no/maybe) match on
    word boundaries case-insensitively. Order of appearance is preserved.
    """
    found: list[tuple[int, str]] = []
    bare = tail.strip().strip("[]().:*'\"` \t").strip()
    for label in allowed:
        if len(label) == 1:
            for match in re.finditer(
                rf"(?<![A-Za-z0-9]){re.escape(label)}(?![A-Za-z0-9])", tail
            ):
                found.append((match.start(), label))
            if not any(lab == label for _, lab in found) and bare.lower() == label.lower():
                found.append((0, label))
        else:
            for match in re.finditer(rf"\b{re.escape(label)}\b", tail, re.IGNORECASE):
                found.append((match.start(), label))
    found.sort(key=lambda pair: pair[0])
    ordered: list[str] = []
    for _, label in found:
        if label not in ordered:
            ordered.append(label)
    return ordered


def parse_answer(text: str, allowed_labels: Sequence[str]) -> str:
    """Extract the committed label from model text.

    The last "Final Answer:" marker followed by an allowed label wins;
    two different labels at that position are ambiguous. Text consisting
    of nothing but an allowed label (optionally bracketed) also parses.
    """
    occurrences: list[list[str]] = []
    for match in _MARKER_RE.finditer(text):
        tail = text[match.end() :].split("\n", 1)[0]
        labels = _labels_in_tail(tail, allowed_labels)
        if labels:
            occurrences.append(labels)
    if occurrences:
        last = occurrences[-1]
        if len(last) > 1:
            raise AmbiguousLabel(f"multiple labels in final answer position: {last}")
        return last[0]

    bare = text.strip().strip("[]().:*'\"` \t").strip()
    for label in allowed_labels:
        if bare.lower() == label.lower():
            return label
    raise NoLabelFound(f"no allowed label found in {text[:120]!r}")


def answer(
    question: Question,
    report: EvidenceReport | str,
    gateway: LLMGateway,
    config: RunConfig,
    meter: CostMeter,
) -> Optional[AnswerLabel]:
    """Final discrete selection at the arbiter temperature.

    The report binding is normally the adjudicated EvidenceReport; the
    no-adjudication ablation passes the rendered evidence block instead.
    Returns None (abstention) when no parseable label emerges after
    retries; scoring treats abstentions as incorrect.
    """
    report_text = render_report(report) if isinstance(report, EvidenceReport) else report
    prompt = render(
        role_prompt("answerer", question.task_kind),
        {
            "research_topic": research_topic(question, config.include_options_in_topic),
            "adjudication_report": report_text,
        },
    )
    allowed = question.labels
    last_error: AnswerParseError | None = None
    for _ in range(config.max_parse_retries + 1):
        completion = gateway.complete("answerer", prompt, config.temp_arbiter, meter)
        try:
            return AnswerLabel(label=parse_answer(completion.text, allowed))
        except AnswerParseError as exc:
            last_error = exc
    logger.warning("answer unparseable for %s after retries: %s", question.id, last_error)
    meter.add_flag("answer_abstained")
    return None
