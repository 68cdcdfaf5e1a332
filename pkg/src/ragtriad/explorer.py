"""The sufficiency-driven retrieval loop.

Each round issues every pending query against the index, folds the new
candidates into the accumulating evidence set by document id, and asks the
model to audit sufficiency. The loop exits on a sufficient verdict, on the
round budget, or on stagnation (no follow-up queries), and records a full
trajectory with per-round query sets, newly added documents, and cost
counters.
"""

from __future__ import annotations

import json
import logging
import time
from typing import Sequence

from .corpus import Embedder, VectorIndex
from .domain import (
    ClinicalSchema,
    EvidenceDoc,
    EvidenceSet,
    RetrievalTrajectory,
    RoundLog,
    RunConfig,
    SufficiencyVerdict,
)
from .gateway import (
    BudgetExceeded,
    CostMeter,
    JSONExtractionError,
    LLMGateway,
    counters_delta,
    extract_json_object,
    render,
    role_prompt,
)

logger = logging.getLogger(__name__)


class VerdictParseFailure(Exception):
    def __init__(self, raw_text: str, reason: str) -> None:
        self.raw_text = raw_text
        super().__init__(reason)


def render_summaries(evidence: EvidenceSet, char_limit: int) -> str:
    """Evidence block bound into {summaries}: one line per document as
    "[doc_id] title: truncated text"."""
    lines = []
    for doc in evidence:
        text = " ".join(doc.text.split())[:char_limit]
        lines.append(f"[{doc.doc_id}] {doc.title}: {text}")
    return "\n".join(lines) if lines else "(no evidence retrieved)"


def render_schema(schema: ClinicalSchema) -> str:
    return json.dumps(
        {
            "intent": schema.intent,
            "entities": list(schema.entities),
            "constraints": list(schema.constraints),
            "q_init": schema.q_init,
        },
        ensure_ascii=False,
    )


def render_query_list(queries: Sequence[str]) -> str:
    return json.dumps(list(queries), ensure_ascii=False)


def retrieve_round(
    queries: Sequence[str],
    index: VectorIndex,
    k: int,
    embedder: Embedder,
    meter: CostMeter,
) -> list[tuple[EvidenceDoc, float]]:
    """Union of per-query top-k hits; within-round duplicates collapse to
    their best score, ranked by best score then doc_id."""
    if not queries:
        raise ValueError("retrieve_round requires at least one query")
    best: dict[str, tuple[EvidenceDoc, float]] = {}
    for query in queries:
        for doc, score in index.topk(query, k, embedder):
            held = best.get(doc.doc_id)
            if held is None or score > held[1]:
                best[doc.doc_id] = (doc, score)
    meter.retrieval_ops += len(queries)
    return sorted(best.values(), key=lambda pair: (-pair[1], pair[0].doc_id))


def merge(prev: EvidenceSet, new_docs: Sequence[EvidenceDoc]) -> EvidenceSet:
    """Accumulate unseen documents in candidate-rank order; documents
    already present keep their position."""
    return prev.merged(new_docs)


def _parse_verdict(text: str, m: int, strict: bool) -> SufficiencyVerdict:
    try:
        obj = extract_json_object(text, strict=strict)
    except JSONExtractionError as exc:
        raise VerdictParseFailure(text, str(exc)) from exc

    raw_flag = obj.get("sufficiency")
    if isinstance(raw_flag, bool):
        sufficiency = int(raw_flag)
    elif isinstance(raw_flag, (int, float)) and raw_flag in (0, 1):
        sufficiency = int(raw_flag)
    elif isinstance(raw_flag, str) and raw_flag.strip() in ("0", "1"):
        sufficiency = int(raw_flag.strip())
    else:
        raise VerdictParseFailure(text, f"sufficiency flag unreadable: {raw_flag!r}")

    if sufficiency == 1:
        return SufficiencyVerdict(sufficiency=1, gap="N/A", next_queries=())

    raw_queries = obj.get("queries", obj.get("next_queries", []))
    if not isinstance(raw_queries, list):
        raise VerdictParseFailure(text, "queries must be a list")
    queries = tuple(str(q).strip() for q in raw_queries if str(q).strip())[:m]
    gap = str(obj.get("gap", "")).strip() or "unspecified gap"
    return SufficiencyVerdict(sufficiency=0, gap=gap, next_queries=queries)


def audit(
    schema: ClinicalSchema,
    current_queries: Sequence[str],
    evidence: EvidenceSet,
    gateway: LLMGateway,
    config: RunConfig,
    meter: CostMeter,
) -> SufficiencyVerdict:
    """One sufficiency audit. Sufficient verdicts are canonicalized to an
    empty query set and "N/A" gap; follow-up queries are capped at m. A
    persistently unparseable audit becomes an insufficient verdict with no
    queries, which terminates the loop as stagnation."""
    prompt = render(
        role_prompt("explorer"),
        {
            "clinical_schema": render_schema(schema),
            "query_list": render_query_list(current_queries),
            "summaries": render_summaries(evidence, config.evidence_char_limit),
        },
    )
    last_failure: VerdictParseFailure | None = None
    for _ in range(config.max_parse_retries + 1):
        completion = gateway.complete(
            "explorer", prompt, config.temp_interpreter_explorer, meter
        )
        try:
            return _parse_verdict(completion.text, config.m, config.strict_json)
        except VerdictParseFailure as exc:
            last_failure = exc
    logger.warning(
        "audit output unparseable after %d attempt(s); raw text: %r",
        config.max_parse_retries + 1,
        last_failure.raw_text if last_failure else "",
    )
    meter.add_flag("audit_parse_failure")
    return SufficiencyVerdict(sufficiency=0, gap="parse failure", next_queries=())


def run_loop(
    schema: ClinicalSchema,
    initial_query: str,
    index: VectorIndex,
    embedder: Embedder,
    gateway: LLMGateway,
    config: RunConfig,
    meter: CostMeter,
) -> tuple[EvidenceSet, RetrievalTrajectory]:
    """Run at most t_max retrieve/merge/audit rounds starting from the
    initial query and return the converged evidence set with its full
    trajectory."""
    started = time.perf_counter()
    before = meter.counters()
    t_max = 1 if config.single_round else config.t_max

    evidence = EvidenceSet()
    queries: tuple[str, ...] = (initial_query,)
    issued: list[str] = []
    rounds: list[RoundLog] = []
    termination = "max_rounds"

    for round_index in range(1, t_max + 1):
        candidates = retrieve_round(queries, index, config.k, embedder, meter)
        new_docs = [doc for doc, _ in candidates]
        grown = merge(evidence, new_docs)
        newly_added = tuple(doc.doc_id for doc in grown.docs[len(evidence) :])
        evidence = grown
        issued.extend(queries)

        audit_queries = tuple(issued) if config.cumulative_queries else queries
        try:
            verdict = audit(schema, audit_queries, evidence, gateway, config, meter)
        except BudgetExceeded as exc:
            # keep the partial trajectory: close this round with a terminal
            # verdict instead of discarding the rounds already executed
            logger.warning("budget exhausted during audit: %s", exc)
            meter.add_flag("budget_exceeded")
            verdict = SufficiencyVerdict(
                sufficiency=0, gap="budget exhausted", next_queries=()
            )
        rounds.append(
            RoundLog(
                round_index=round_index,
                queries=queries,
                newly_added=newly_added,
                evidence_size=len(evidence),
                verdict=verdict,
            )
        )
        if verdict.sufficiency == 1:
            termination = "sufficient"
            break
        if not verdict.next_queries:
            termination = "stagnation"
            break
        queries = verdict.next_queries

    wall_ms = 0 if config.deterministic_timing else int((time.perf_counter() - started) * 1000)
    trajectory = RetrievalTrajectory(
        rounds=tuple(rounds),
        rounds_executed=len(rounds),
        termination=termination,
        counters=counters_delta(before, meter.counters(), wall_ms=wall_ms),
    )
    return evidence, trajectory


def issued_queries(trajectory: RetrievalTrajectory) -> list[str]:
    """Every query the loop issued, in order."""
    queries: list[str] = []
    for round_log in trajectory.rounds:
        queries.extend(round_log.queries)
    return queries
