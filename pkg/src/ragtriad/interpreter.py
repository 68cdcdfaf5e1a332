"""Question interpretation: question -> clinical schema -> initial query.

The interpreter asks the model for a structured reading of the question
(intent, entities, constraints, concise initial query) and flattens it
into the single retrieval string that seeds the exploration loop. Parsing
failures degrade to a stem-only schema instead of aborting the question.
"""

from __future__ import annotations

import logging

from .domain import ClinicalSchema, Question, RunConfig, degraded_schema
from .gateway import (
    CostMeter,
    JSONExtractionError,
    LLMGateway,
    extract_json_object,
    render,
    role_prompt,
)

logger = logging.getLogger(__name__)


class SchemaParseFailure(Exception):
    """Model output could not be read as a clinical schema; carries the
    raw text for audit."""

    def __init__(self, raw_text: str, reason: str) -> None:
        self.raw_text = raw_text
        super().__init__(reason)


def research_topic(question: Question, include_options: bool = True) -> str:
    """The question text bound into {research_topic}: stem plus the
    candidate options, which the prompts may use for discrimination."""
    if not include_options:
        return question.stem
    lines = [question.stem, "Options:"]
    lines.extend(f"{label}. {text}" for label, text in question.options.items())
    return "\n".join(lines)


def _parse_schema(text: str, strict: bool) -> ClinicalSchema:
    try:
        obj = extract_json_object(text, strict=strict)
    except JSONExtractionError as exc:
        raise SchemaParseFailure(text, str(exc)) from exc
    try:
        return ClinicalSchema(
            intent=str(obj.get("intent", "")),
            entities=tuple(str(e) for e in obj.get("entities", []) if str(e).strip()),
            constraints=tuple(str(c) for c in obj.get("constraints", []) if str(c).strip()),
            q_init=str(obj.get("q_init", "")),
        )
    except ValueError as exc:
        raise SchemaParseFailure(text, f"schema invariant violated: {exc}") from exc


def interpret(
    question: Question,
    gateway: LLMGateway,
    config: RunConfig,
    meter: CostMeter,
) -> ClinicalSchema:
    """One counted LLM call in the fault-free case; on persistent parse
    failure returns the degraded stem-only schema and flags the run."""
    prompt = render(
        role_prompt("interpreter"),
        {"research_topic": research_topic(question, config.include_options_in_topic)},
    )
    last_failure: SchemaParseFailure | None = None
    for _ in range(config.max_parse_retries + 1):
        completion = gateway.complete(
            "interpreter", prompt, config.temp_interpreter_explorer, meter
        )
        try:
            return _parse_schema(completion.text, config.strict_json)
        except SchemaParseFailure as exc:
            last_failure = exc
    logger.warning(
        "interpreter output unparseable for %s after %d attempt(s); raw text: %r",
        question.id,
        config.max_parse_retries + 1,
        last_failure.raw_text if last_failure else "",
    )
    meter.add_flag("interpreter_degraded")
    return degraded_schema(question.stem)


def linearize(schema: ClinicalSchema) -> str:
    """Flatten the schema into one retrieval query.

    The initial query leads; intent, entities, and constraints follow,
    fields joined by "; " and list items by ", ". Empty fields are omitted
    together with their separator.
    """
    segments = [
        schema.q_init,
        schema.intent,
        ", ".join(schema.entities),
        ", ".join(schema.constraints),
    ]
    return "; ".join(segment for segment in segments if segment)
