from __future__ import annotations

import json

import pytest
from hypothesis import given, settings, strategies as st

from benchforge.gateway import TransportError, trigram_embed
from benchforge.qa import QAPair, QuestionType
from benchforge.qc import (
    STAGES,
    check_answerability,
    check_clarity,
    check_context_independence,
    deduplicate,
    normalize_answer,
    normalize_pair,
    normalize_question,
    run_qc,
)

from builders import day, mock_gateway

BLOCKED = [
    "In this paper, which method is used?",
    "What dataset is used in this work?",
    "Which metric does this study report?",
    "What do the authors propose for retrieval?",
    "Which model appears in Table 3?",
    "What does Figure 2 show about recall?",
    "Which bound does Theorem 1 establish?",
    "What follows from Eq. (4) for the loss?",
    "Which result is stated in Section 5?",
    "What does Lemma~2 imply here?",
]
ALLOWED = [
    "Which method does GraphNet use?",
    "Which table-tennis dataset is used by PingNet?",
    "What section of the field does BERT address?",
]


def qa(qa_id: str, question: str, answer: str = "GraphNet", qtype=QuestionType.SingleHop) -> QAPair:
    return QAPair(qa_id, "dom", qtype, question, answer, day(1), "P000001", ())


@pytest.mark.parametrize("question", BLOCKED)
def test_blocklist_rejects(question):
    v = check_context_independence(qa("Q000001", question))
    assert not v.passed and v.stage == "independence"


@pytest.mark.parametrize("question", ALLOWED)
def test_blocklist_allows(question):
    assert check_context_independence(qa("Q000001", question)).passed


def test_normalization_examples():
    assert normalize_question("  Which  “method” is used ?? ") == 'which "method" is used?'
    assert normalize_question("Is it X.") == "is it x?"
    assert normalize_answer("Graph—Net!!") == "graph-net!"
    assert normalize_answer("  A B  ") == "a b"


@given(st.text(max_size=80))
def test_normalization_idempotent(text):
    assert normalize_question(normalize_question(text)) == normalize_question(text)
    assert normalize_answer(normalize_answer(text)) == normalize_answer(text)


@given(st.text(min_size=1, max_size=60), st.text(min_size=1, max_size=30))
def test_normalize_pair_idempotent(q, a):
    once = normalize_pair(qa("Q000001", q, a))
    assert normalize_pair(once) == once


def test_clarity_rule():
    assert not check_clarity(qa("Q1", "which one?")).passed
    assert check_clarity(qa("Q1", "which one is it?")).passed
    assert not check_clarity(qa("Q1", "which one is it?", answer=" ?. ")).passed


def judge_script(qa_id, answerable=True, faithful=True):
    return {f"qc:answerability:{qa_id}": json.dumps({"answerable": answerable, "faithful": faithful})}


def test_answerability_outcomes():
    pair = qa("Q000001", "Which method does X use?")
    assert check_answerability(pair, "ctx", mock_gateway(judge_script("Q000001"))).passed
    v = check_answerability(pair, "ctx", mock_gateway(judge_script("Q000001", faithful=False)))
    assert not v.passed and v.reason == "not faithful"
    v = check_answerability(pair, "ctx", mock_gateway({"qc:answerability:Q000001": "maybe"}))
    assert not v.passed and v.reason == "judge-unparseable"
    v = check_answerability(pair, "ctx", mock_gateway({"qc:answerability:Q000001": '{"answerable": "yes", '
                                                                                     '"faithful": true}'}))
    assert v.reason == "judge-unparseable"


def test_answerability_fails_closed_on_transport():
    class Down:
        name, max_attempts, backoff_base = "down", 2, 0.0

        def chat(self, request):
            raise TransportError("offline")

    from benchforge.gateway import Gateway

    v = check_answerability(qa("Q000001", "Which method?"), "ctx", Gateway(Down(), sleep=lambda s: None))
    assert not v.passed and v.reason == "judge-unavailable"


# clusters: {1,2,3} near-identical, {4,5} near-identical, {6} alone
CLUSTERS = [
    ("Q000001", "Which method does GraphNet use for training?"),
    ("Q000002", "Which method does GraphNet use for training ?"),
    ("Q000003", "which method does graphnet use for training?"),
    ("Q000004", "What dataset is TextNet evaluated on?"),
    ("Q000005", "What dataset is TextNet evaluated on ?"),
    ("Q000006", "Which metric measures summarization quality in news?"),
]


@settings(max_examples=30, deadline=None)
@given(st.permutations(CLUSTERS))
def test_dedup_keeps_one_per_cluster_any_order(perm):
    pairs = [qa(i, q) for i, q in perm]
    kept, verdicts = deduplicate(pairs, trigram_embed, 0.92)
    assert [p.qa_id for p in kept] == ["Q000001", "Q000004", "Q000006"]
    assert len(verdicts) == 6
    rejected = {v.qa_id: v.reason for v in verdicts if not v.passed}
    assert set(rejected) == {"Q000002", "Q000003", "Q000005"}
    assert rejected["Q000005"].startswith("duplicate of Q000004")


def test_dedup_empty():
    assert deduplicate([], trigram_embed) == ([], [])


def test_run_qc_stage_order_and_first_rejection():
    pairs = [
        qa("Q000001", "Which method does GraphNet use for training?"),
        qa("Q000002", "In this paper, which method is used?"),
        qa("Q000003", "Which dataset does TextNet use here?"),
        qa("Q000004", "Which?"),
        qa("Q000005", "Which method does GraphNet use for training ?"),
    ]
    script = {}
    for p in pairs:
        script.update(judge_script(p.qa_id, answerable=p.qa_id != "Q000003"))
    result = run_qc(reversed(pairs), {p.qa_id: "ctx" for p in pairs}, mock_gateway(script))
    assert [p.qa_id for p in result.kept] == ["Q000001"]
    assert result.kept[0].question == "which method does graphnet use for training?"
    rejected = result.rejected()
    assert rejected["Q000002"].stage == "independence"
    assert rejected["Q000003"].stage == "answerability"
    assert rejected["Q000004"].stage == "clarity"
    assert rejected["Q000005"].stage == "dedup"
    rows = result.report_rows()
    q1 = [r["stage"] for r in rows if r["qa_id"] == "Q000001"]
    assert q1 == list(STAGES)
    # a rejected pair never reaches later stages
    assert [r["stage"] for r in rows if r["qa_id"] == "Q000002"] == ["independence"]


def test_run_qc_parallel_matches_serial():
    pairs = [qa(f"Q{i:06d}", f"Which method number {i} does Model{i} use?") for i in range(1, 9)]
    script = {}
    for p in pairs:
        script.update(judge_script(p.qa_id))
    ctx = {p.qa_id: "ctx" for p in pairs}
    a = run_qc(pairs, ctx, mock_gateway(script), workers=1)
    b = run_qc(pairs, ctx, mock_gateway(script), workers=4)
    assert a.report_rows() == b.report_rows() and a.kept == b.kept
