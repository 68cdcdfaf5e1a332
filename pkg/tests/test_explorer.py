import json
import random

import numpy as np
import pytest

from ragtriad.corpus import VectorIndex
from ragtriad.domain import (
    ClinicalSchema,
    EvidenceDoc,
    EvidenceSet,
    RunConfig,
    SufficiencyVerdict,
)
from ragtriad.explorer import (
    audit,
    issued_queries,
    merge,
    render_summaries,
    retrieve_round,
    run_loop,
)
from ragtriad.gateway import CostMeter, LLMGateway, MockScriptBackend

SCHEMA = ClinicalSchema(intent="test intent", entities=("e1",), constraints=("c1",), q_init="seed")


def gateway_for(responses, config, on_exhausted="error"):
    backend = MockScriptBackend.from_responses(responses, on_exhausted=on_exhausted)
    return LLMGateway(backend, config)


def verdict_json(sufficiency, gap="needs more", queries=()):
    payload = {"sufficiency": sufficiency, "gap": gap, "queries": list(queries)}
    if sufficiency == 1:
        payload.update({"gap": "N/A", "queries": []})
    return json.dumps(payload)


class KeyedEmbedder:
    """Queries select a basis direction by trailing integer, docs by their
    text's trailing integer; retrieval then has known exact answers."""

    def __init__(self, dimension=16):
        self.dimension = dimension
        self.tag = f"keyed/dim={dimension}"

    def _basis(self, text):
        v = np.zeros(self.dimension)
        v[int(text.split()[-1]) % self.dimension] = 1.0
        return v

    embed_query = _basis
    embed_doc = _basis


def keyed_index(n_docs, dimension=16):
    embedder = KeyedEmbedder(dimension)
    docs = [EvidenceDoc.from_content("s", f"t{i}", f"doc {i % dimension}") for i in range(n_docs)]
    matrix = np.stack([embedder.embed_doc(d.text) for d in docs])
    return VectorIndex(docs, matrix, embedder.tag), embedder


class TestRetrieveRound:
    def test_disjoint_queries_union(self):
        # 32 docs over 16 basis directions: each query's top-2 is exactly
        # the two docs sharing its direction
        index, embedder = keyed_index(32)
        meter = CostMeter()
        hits = retrieve_round(["query 0", "query 1"], index, 2, embedder, meter)
        assert len(hits) == 4  # two disjoint top-2 sets
        assert {d.text for d, _ in hits} == {"doc 0", "doc 1"}
        assert meter.retrieval_ops == 2

    def test_identical_queries_collapse(self):
        index, embedder = keyed_index(16)
        meter = CostMeter()
        single = retrieve_round(["query 3"], index, 2, embedder, CostMeter())
        double = retrieve_round(["query 3", "query 3"], index, 2, embedder, meter)
        assert [(d.doc_id, s) for d, s in double] == [(d.doc_id, s) for d, s in single]
        assert meter.retrieval_ops == 2  # ops count queries, not unique docs

    def test_union_size_matches_exhaustive_oracle(self, mock_embedder):
        # 50-doc fixture: per-query exhaustive scan, then set union
        docs = [
            EvidenceDoc.from_content("s", f"t{i}", f"condition {i} treatment option {i % 7}")
            for i in range(50)
        ]
        matrix = np.stack([mock_embedder.embed_doc(d.text) for d in docs])
        index = VectorIndex(docs, matrix, mock_embedder.tag)
        queries = ["condition 3 treatment", "treatment option 5", "unrelated physics topic"]
        k = 5
        oracle_union = set()
        for q in queries:
            scores = matrix @ mock_embedder.embed_query(q)
            ranked = sorted(range(len(docs)), key=lambda i: (-scores[i], docs[i].doc_id))
            oracle_union.update(docs[i].doc_id for i in ranked[:k])
        hits = retrieve_round(queries, index, k, mock_embedder, CostMeter())
        assert {d.doc_id for d, _ in hits} == oracle_union
        assert len(hits) == len(oracle_union)

    def test_candidates_ranked_by_best_score_then_id(self, toy_index, mock_embedder):
        hits = retrieve_round(["pneumonia pathogens"], toy_index, 10, mock_embedder, CostMeter())
        keys = [(-score, doc.doc_id) for doc, score in hits]
        assert keys == sorted(keys)

    def test_empty_query_list_rejected(self, toy_index, mock_embedder):
        with pytest.raises(ValueError):
            retrieve_round([], toy_index, 3, mock_embedder, CostMeter())


class TestMerge:
    def _docs(self, *indices):
        return [EvidenceDoc.from_content("s", f"t{i}", f"body {i}") for i in indices]

    def test_merge_into_empty(self):
        d1, d2 = self._docs(1, 2)
        merged = merge(EvidenceSet(), [d1, d2])
        assert [d.doc_id for d in merged.docs] == [d1.doc_id, d2.doc_id]

    def test_existing_doc_not_duplicated(self):
        d1, d2 = self._docs(1, 2)
        merged = merge(EvidenceSet(docs=(d1,)), [d1, d2])
        assert [d.doc_id for d in merged.docs] == [d1.doc_id, d2.doc_id]

    def test_self_merge_is_identity_sweep(self):
        rng = random.Random(3)
        pool = self._docs(*range(30))
        for _ in range(200):
            sample = rng.sample(pool, rng.randint(0, 15))
            base = merge(EvidenceSet(), sample)
            assert merge(base, sample) == base


class TestAudit:
    def test_sufficient_verdict_canonicalized(self, base_config):
        gateway = gateway_for({"explorer": [verdict_json(1)]}, base_config)
        verdict = audit(SCHEMA, ["q"], EvidenceSet(), gateway, base_config, CostMeter())
        assert verdict == SufficiencyVerdict(sufficiency=1, gap="N/A", next_queries=())

    def test_sufficient_with_stray_queries_forced_empty(self, base_config):
        raw = json.dumps({"sufficiency": 1, "gap": "left over", "queries": ["extra"]})
        gateway = gateway_for({"explorer": [raw]}, base_config)
        verdict = audit(SCHEMA, ["q"], EvidenceSet(), gateway, base_config, CostMeter())
        assert verdict.next_queries == () and verdict.gap == "N/A"

    def test_queries_truncated_to_m(self, base_config):
        raw = verdict_json(0, queries=[f"q{i}" for i in range(5)])
        gateway = gateway_for({"explorer": [raw]}, base_config)
        verdict = audit(SCHEMA, ["q"], EvidenceSet(), gateway, base_config, CostMeter())
        assert verdict.next_queries == ("q0", "q1", "q2")  # m defaults to 3

    def test_boolean_flag_accepted(self, base_config):
        raw = json.dumps({"sufficiency": True, "gap": "N/A", "queries": []})
        gateway = gateway_for({"explorer": [raw]}, base_config)
        verdict = audit(SCHEMA, ["q"], EvidenceSet(), gateway, base_config, CostMeter())
        assert verdict.sufficiency == 1

    def test_parse_failure_becomes_stagnating_verdict(self, base_config):
        gateway = gateway_for({"explorer": ["prose", "more prose"]}, base_config)
        meter = CostMeter()
        verdict = audit(SCHEMA, ["q"], EvidenceSet(), gateway, base_config, meter)
        assert verdict == SufficiencyVerdict(sufficiency=0, gap="parse failure", next_queries=())
        assert meter.llm_calls == 2
        assert "audit_parse_failure" in meter.flags

    def test_gap_example_carries_follow_up(self, base_config):
        gap = "Evidence does not distinguish pathogens based on hospitalization duration"
        follow = "most likely pathogen hospital-acquired pneumonia vs community-acquired"
        gateway = gateway_for({"explorer": [verdict_json(0, gap, [follow])]}, base_config)
        verdict = audit(SCHEMA, ["q"], EvidenceSet(), gateway, base_config, CostMeter())
        assert verdict.sufficiency == 0
        assert verdict.gap == gap
        assert verdict.next_queries == (follow,)


def test_render_summaries_truncates_and_tags():
    doc = EvidenceDoc.from_content("s", "Some Title", "word " * 400)
    text = render_summaries(EvidenceSet(docs=(doc,)), char_limit=50)
    assert text.startswith(f"[{doc.doc_id}] Some Title: ")
    assert len(text.split(": ", 1)[1]) <= 50
    assert render_summaries(EvidenceSet(), 800) == "(no evidence retrieved)"


class TestRunLoop:
    def _run(self, responses, config, n_docs=40):
        index, embedder = keyed_index(n_docs)
        gateway = gateway_for(responses, config, on_exhausted="repeat_last")
        meter = CostMeter()
        evidence, trajectory = run_loop(
            SCHEMA, "seed 0", index, embedder, gateway, config, meter
        )
        return evidence, trajectory, meter

    def test_two_round_sufficient_trace(self, base_config):
        responses = {
            "explorer": [
                verdict_json(0, queries=["follow 1", "follow 2", "follow 3"]),
                verdict_json(1),
            ]
        }
        _, trajectory, meter = self._run(responses, base_config)
        assert trajectory.rounds_executed == 2
        assert trajectory.termination == "sufficient"
        assert meter.retrieval_ops == 1 + 3
        assert trajectory.counters.llm_calls == 2  # both audits
        assert [len(r.queries) for r in trajectory.rounds] == [1, 3]

    def test_immediate_sufficiency(self, base_config):
        _, trajectory, meter = self._run({"explorer": [verdict_json(1)]}, base_config)
        assert trajectory.rounds_executed == 1
        assert trajectory.termination == "sufficient"
        assert meter.retrieval_ops == 1

    def test_max_rounds_exit(self, base_config):
        responses = {"explorer": [verdict_json(0, queries=["f 1", "f 2", "f 3"])]}
        _, trajectory, _ = self._run(responses, base_config)
        assert trajectory.rounds_executed == base_config.t_max == 2
        assert trajectory.termination == "max_rounds"

    def test_stagnation_exit_at_round_one(self, base_config):
        _, trajectory, _ = self._run({"explorer": [verdict_json(0, queries=[])]}, base_config)
        assert trajectory.rounds_executed == 1
        assert trajectory.termination == "stagnation"

    def test_evidence_monotone_and_duplicate_free(self, base_config):
        config = base_config.model_copy(update={"t_max": 4})
        responses = {
            "explorer": [
                verdict_json(0, queries=["next 1", "next 2"]),
                verdict_json(0, queries=["next 2", "next 3"]),
                verdict_json(0, queries=["next 1"]),
                verdict_json(1),
            ]
        }
        evidence, trajectory, _ = self._run(responses, config)
        sizes = [r.evidence_size for r in trajectory.rounds]
        assert sizes == sorted(sizes)
        ids = [d.doc_id for d in evidence.docs]
        assert len(ids) == len(set(ids))

    def test_retrieval_ops_equal_sum_of_round_query_counts(self, base_config):
        config = base_config.model_copy(update={"t_max": 3})
        responses = {
            "explorer": [
                verdict_json(0, queries=["a 1", "a 2"]),
                verdict_json(0, queries=["b 1", "b 2", "b 3"]),
                verdict_json(1),
            ]
        }
        _, trajectory, meter = self._run(responses, config)
        assert trajectory.counters.retrieval_ops == sum(
            len(r.queries) for r in trajectory.rounds
        )
        assert meter.retrieval_ops == 1 + 2 + 3

    def test_audit_calls_equal_rounds(self, base_config):
        for t_max in (1, 2, 3, 5):
            config = base_config.model_copy(update={"t_max": t_max})
            responses = {"explorer": [verdict_json(0, queries=["f 1", "f 2", "f 3"])]}
            _, trajectory, _ = self._run(responses, config)
            assert trajectory.counters.llm_calls == trajectory.rounds_executed == t_max

    def test_single_round_switch_forces_one_round(self, base_config):
        config = base_config.model_copy(update={"single_round": True, "t_max": 5})
        responses = {"explorer": [verdict_json(0, queries=["f 1"])]}
        _, trajectory, _ = self._run(responses, config)
        assert trajectory.rounds_executed == 1
        assert trajectory.termination == "max_rounds"

    def test_trajectory_replay_reproduces_added_ids(self, base_config):
        responses = {
            "explorer": [verdict_json(0, queries=["replay 1", "replay 2"]), verdict_json(1)]
        }
        index, embedder = keyed_index(40)
        gateway = gateway_for(responses, base_config, on_exhausted="repeat_last")
        evidence, trajectory = run_loop(
            SCHEMA, "seed 0", index, embedder, gateway, base_config, CostMeter()
        )
        replayed = EvidenceSet()
        for round_log in trajectory.rounds:
            hits = retrieve_round(
                list(round_log.queries), index, base_config.k, embedder, CostMeter()
            )
            grown = merge(replayed, [d for d, _ in hits])
            newly = tuple(d.doc_id for d in grown.docs[len(replayed):])
            assert newly == round_log.newly_added
            assert len(grown) == round_log.evidence_size
            replayed = grown
        assert replayed.id_set == evidence.id_set

    def test_issued_queries_collects_in_order(self, base_config):
        responses = {
            "explorer": [verdict_json(0, queries=["second 5"]), verdict_json(1)]
        }
        _, trajectory, _ = self._run(responses, base_config)
        assert issued_queries(trajectory) == ["seed 0", "second 5"]
