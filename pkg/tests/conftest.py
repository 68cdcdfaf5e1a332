import json
from pathlib import Path

import pytest

from ragtriad.corpus import ChunkingConfig, HashedNgramEmbedder, ingest
from ragtriad.domain import Question, RunConfig

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
GOLDENS = Path(__file__).resolve().parent / "goldens"


def pytest_runtest_logreport(report):
    # acceptance tests print their own PASS line; mirror failures the same way
    if report.when == "call" and report.failed and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        print(f"\n[acceptance] {name}: FAIL")


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def goldens_dir() -> Path:
    return GOLDENS


@pytest.fixture(scope="session")
def mock_embedder() -> HashedNgramEmbedder:
    return HashedNgramEmbedder(dimension=64, seed=0)


@pytest.fixture(scope="session")
def toy_index(mock_embedder):
    return ingest([FIXTURES / "toy_corpus.jsonl"], ChunkingConfig(), mock_embedder)


@pytest.fixture
def mcq_question() -> Question:
    return Question(
        id="q1",
        stem="Which option is correct?",
        options={"A": "first", "B": "second", "C": "third", "D": "fourth"},
        task_kind="mcq4",
        answer_key="A",
    )


@pytest.fixture
def base_config() -> RunConfig:
    # fast, deterministic defaults for scripted tests
    return RunConfig(
        workers=1,
        deterministic_timing=True,
        retry_base_delay_s=0.0,
        on_script_exhausted="repeat_last",
    )


def script_lines(responses: dict[str, list[str]]) -> list[dict]:
    return [
        {"role": role, "turn": turn, "response": response}
        for role, seq in responses.items()
        for turn, response in enumerate(seq)
    ]


def never_sufficient_responses(m: int, *, answer: str = "Final Answer: A") -> dict[str, list[str]]:
    """Scripts that always report a gap with exactly m follow-up queries."""
    verdict = json.dumps(
        {
            "sufficiency": 0,
            "gap": "needs more evidence",
            "queries": [f"follow-up query {i}" for i in range(m)],
        }
    )
    schema = json.dumps(
        {
            "intent": "test intent",
            "entities": ["entity one"],
            "constraints": ["constraint one"],
            "q_init": "seed query",
        }
    )
    report = json.dumps(
        {
            "question_focus": "what is asked",
            "key_supporting_evidence": [{"claim": "a supported claim", "source_ids": []}],
            "key_conflicting_or_limiting_evidence": [],
            "evidence_synthesis": "synthesis",
        }
    )
    return {
        "interpreter": [schema],
        "explorer": [verdict],
        "adjudicator": [report],
        "answerer": [answer],
    }
