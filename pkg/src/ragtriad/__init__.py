"""ragtriad: a multi-round retrieval QA engine.

Three role-specialized agents share one language model: an interpreter
that structures the question into a clinical schema, an explorer that runs
a sufficiency-driven retrieval loop, and an arbiter that adjudicates the
converged evidence into a traceable report and selects the final answer.
"""

__version__ = "0.1.0"

from .domain import (
    AnswerLabel,
    ClinicalSchema,
    CostCounters,
    EvidenceDoc,
    EvidenceReport,
    EvidenceSet,
    Question,
    ReportClaim,
    RetrievalTrajectory,
    RoundLog,
    RunConfig,
    SufficiencyVerdict,
    validate_question,
)

__all__ = [
    "AnswerLabel",
    "ClinicalSchema",
    "CostCounters",
    "EvidenceDoc",
    "EvidenceReport",
    "EvidenceSet",
    "Question",
    "ReportClaim",
    "RetrievalTrajectory",
    "RoundLog",
    "RunConfig",
    "SufficiencyVerdict",
    "validate_question",
    "__version__",
]
