"""Quality control for generated pairs.

Stages run in this order, and a pair leaves the pipeline at its first
rejection: ``independence`` (blocklist scan), ``answerability`` (one judge
call, fails closed), ``clarity`` (normalization plus a minimal length rule)
and ``dedup`` (embedding-cosine clustering over the survivors).
"""

from __future__ import annotations

import logging
import re
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import prompts
from .gateway import ChatRequest, Gateway, Message, TransportError, parse_json_reply
from .graph import id_number
from .qa import QAPair

logger = logging.getLogger(__name__)

STAGES = ("independence", "answerability", "clarity", "dedup")
DEDUP_THRESHOLD = 0.92
MIN_QUESTION_WORDS = 3

BLOCKLIST = (
    ("in this paper", re.compile(r"\bin this paper\b", re.I)),
    ("in this work", re.compile(r"\bin this work\b", re.I)),
    ("this study", re.compile(r"\bthis study\b", re.I)),
    ("the authors", re.compile(r"\bthe authors\b", re.I)),
    ("numbered reference", re.compile(r"\b(theorem|lemma|figure|fig\.|table|section|sec\.|equation|eq\.)\s*~?\s*\(?\d+",
                                      re.I)),
)


@dataclass(frozen=True)
class QCVerdict:
    qa_id: str
    stage: str
    outcome: str  # "pass" or "reject"
    reason: str = ""
    trace: str = ""

    @property
    def passed(self) -> bool:
        return self.outcome == "pass"

    def to_json(self) -> dict:
        out = {"qa_id": self.qa_id, "stage": self.stage, "outcome": self.outcome}
        if self.reason:
            out["reason"] = self.reason
        if self.trace:
            out["trace"] = self.trace
        return out


def _pass(qa_id: str, stage: str, trace: str = "") -> QCVerdict:
    return QCVerdict(qa_id, stage, "pass", "", trace)


def _reject(qa_id: str, stage: str, reason: str, trace: str = "") -> QCVerdict:
    return QCVerdict(qa_id, stage, "reject", reason, trace)


def check_context_independence(qa: QAPair) -> QCVerdict:
    for label, pattern in BLOCKLIST:
        m = pattern.search(qa.question)
        if m:
            return _reject(qa.qa_id, "independence", f"document-local reference ({label}): {m.group(0)!r}")
    return _pass(qa.qa_id, "independence")


def check_answerability(qa: QAPair, context: str, gateway: Gateway) -> QCVerdict:
    """One judge call returning ``{answerable, faithful}``; any failure rejects."""
    system, user = prompts.load("judge_qc").render(question=qa.question, answer=qa.answer, context=context)
    tag = f"qc:answerability:{qa.qa_id}"
    request = ChatRequest.build(system, user, tag)
    for attempt in range(2):
        try:
            response = gateway.complete(request)
        except TransportError as exc:
            return _reject(qa.qa_id, "answerability", "judge-unavailable", str(exc))
        try:
            reply = parse_json_reply(response.text)
            answerable, faithful = reply["answerable"], reply["faithful"]
            if not isinstance(answerable, bool) or not isinstance(faithful, bool):
                raise ValueError("verdict fields must be booleans")
        except (ValueError, KeyError, TypeError) as exc:
            if attempt == 0:
                _, fix = prompts.load("repair").render(error=str(exc)[:200])
                request = ChatRequest(request.messages + (Message("assistant", response.text or "(empty)"),
                                                          Message("user", fix)), tag=tag)
            continue
        trace = response.text.strip()
        if answerable and faithful:
            return _pass(qa.qa_id, "answerability", trace)
        what = "not answerable" if not answerable else "not faithful"
        return _reject(qa.qa_id, "answerability", what, trace)
    return _reject(qa.qa_id, "answerability", "judge-unparseable")


# --------------------------------------------------------------------------
# Normalization
# --------------------------------------------------------------------------

_CHAR_MAP = str.maketrans({
    "\u2018": "'", "\u2019": "'", "\u201c": '"', "\u201d": '"',
    "\u2013": "-", "\u2014": "-", "\u00a0": " ",
})
_WS = re.compile(r"\s+")
_SPACE_BEFORE_PUNCT = re.compile(r"\s+([?.!,;:])")
_TERMINAL = re.compile(r"[\s?.!]*$")
_REPEATED_TERMINAL = re.compile(r"([?.!])[?.!]*$")


def _standardize(text: str) -> str:
    text = unicodedata.normalize("NFKC", text).translate(_CHAR_MAP).replace("\u2026", "...")
    text = _WS.sub(" ", text.lower()).strip()
    return _SPACE_BEFORE_PUNCT.sub(r"\1", text)


def normalize_question(text: str) -> str:
    return _TERMINAL.sub("", _standardize(text)) + "?"


def normalize_answer(text: str) -> str:
    return _REPEATED_TERMINAL.sub(r"\1", _standardize(text))


def normalize_pair(qa: QAPair) -> QAPair:
    """Lowercase, collapse whitespace, standardize punctuation; idempotent."""
    return qa.replace(question=normalize_question(qa.question), answer=normalize_answer(qa.answer))


def check_clarity(qa: QAPair) -> QCVerdict:
    words = qa.question.rstrip("?").split()
    if len(words) < MIN_QUESTION_WORDS:
        return _reject(qa.qa_id, "clarity", f"question has fewer than {MIN_QUESTION_WORDS} words")
    if not qa.answer.strip(" .?!"):
        return _reject(qa.qa_id, "clarity", "empty answer after normalization")
    return _pass(qa.qa_id, "clarity")


# --------------------------------------------------------------------------
# Deduplication
# --------------------------------------------------------------------------


def deduplicate(pairs: Sequence[QAPair], embed: Callable[[str], np.ndarray],
                threshold: float = DEDUP_THRESHOLD) -> tuple[list[QAPair], list[QCVerdict]]:
    """Cluster questions whose embedding cosine reaches ``threshold``; keep the lowest qa_id.

    Returns the kept pairs (in qa_id order) and one verdict per input pair.
    """
    ordered = sorted(pairs, key=lambda p: id_number(p.qa_id))
    n = len(ordered)
    if n == 0:
        return [], []
    vecs = np.vstack([embed(p.question) for p in ordered])
    vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    sims = vecs @ vecs.T
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    rows, cols = np.nonzero(np.triu(sims >= threshold - 1e-12, k=1))
    for i, j in zip(rows.tolist(), cols.tolist()):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    kept, verdicts = [], []
    for i, pair in enumerate(ordered):
        root = find(i)
        if root == i:
            kept.append(pair)
            verdicts.append(_pass(pair.qa_id, "dedup"))
        else:
            rep = ordered[root]
            verdicts.append(_reject(pair.qa_id, "dedup", f"duplicate of {rep.qa_id} (cosine {sims[i, root]:.3f})"))
    return kept, verdicts


# --------------------------------------------------------------------------
# Driver
# --------------------------------------------------------------------------


@dataclass
class QCResult:
    kept: list[QAPair]
    verdicts: list[QCVerdict]

    def rejected(self) -> dict[str, QCVerdict]:
        return {v.qa_id: v for v in self.verdicts if not v.passed}

    def report_rows(self) -> list[dict]:
        order = {s: i for i, s in enumerate(STAGES)}
        rows = sorted(self.verdicts, key=lambda v: (id_number(v.qa_id), order[v.stage]))
        return [v.to_json() for v in rows]


def run_qc(pairs: Iterable[QAPair], contexts: Mapping[str, str], gateway: Gateway,
           embed: Callable[[str], np.ndarray] | None = None, dedup_threshold: float = DEDUP_THRESHOLD,
           workers: int = 1) -> QCResult:
    """Apply every stage; ``contexts`` maps qa_id to the grounding context text."""
    embed = embed or gateway.embed
    verdicts: list[QCVerdict] = []
    stage1 = []
    for qa in sorted(pairs, key=lambda p: id_number(p.qa_id)):
        v = check_context_independence(qa)
        verdicts.append(v)
        if v.passed:
            stage1.append(qa)

    def judge(qa: QAPair) -> QCVerdict:
        return check_answerability(qa, contexts[qa.qa_id], gateway)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            judged = list(pool.map(judge, stage1))
    else:
        judged = [judge(qa) for qa in stage1]
    verdicts.extend(judged)

    stage3 = []
    for qa, v in zip(stage1, judged):
        if not v.passed:
            continue
        norm = normalize_pair(qa)
        cv = check_clarity(norm)
        verdicts.append(cv)
        if cv.passed:
            stage3.append(norm)

    kept, dedup_verdicts = deduplicate(stage3, embed, dedup_threshold)
    verdicts.extend(dedup_verdicts)
    logger.info("qc kept %d of %d pairs", len(kept), len({v.qa_id for v in verdicts}))
    return QCResult(kept, verdicts)
