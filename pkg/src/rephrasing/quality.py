"""Quality scoring and score-threshold filtering.

Documents are judged by prompting an LLM with the informative-signal
question and normalizing the log-probabilities of the affirmative and
negative options at the ``Choice:`` position.  Externally computed
scores (an educational-value classifier, for instance) can be ingested
from score shards and thresholded the same way.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Document
from .inference import BackendError, CompletionBackend
from .prompts import PromptTemplate, load_builtin
from .tokens import TokenEstimator

# Scoring reads at most this many estimated tokens from the front of a
# document; long documents are cut by a character budget derived from
# the calibrated ratio instead of being tokenized twice.
SCORING_MAX_TOKENS = 10_000

OPTION_AFFIRMATIVE = "yes"
OPTION_NEGATIVE = "no"

SCORER_ASK_LLM = "ask_llm"
SCORER_ASK_LLM_VOTE = "ask_llm_vote"
SCORER_EXTERNAL = "external"


class QualityError(Exception):
    """Scoring or filtering failure."""


class MissingScoresError(QualityError):
    """Documents lack scores under the selected scorer."""

    def __init__(self, doc_ids: Sequence[str]):
        self.doc_ids = list(doc_ids)
        shown = ", ".join(self.doc_ids[:10])
        more = "" if len(self.doc_ids) <= 10 else f" (+{len(self.doc_ids) - 10} more)"
        super().__init__(f"missing scores for {len(self.doc_ids)} document(s): {shown}{more}")


@dataclass(frozen=True)
class ScoredDocument:
    doc_id: str
    score: float
    scorer: str

    def __post_init__(self) -> None:
        if self.score < 0:
            raise QualityError(f"negative score for {self.doc_id!r}")
        if self.scorer.startswith(SCORER_ASK_LLM) and not 0.0 <= self.score <= 1.0:
            raise QualityError(f"ask-llm score for {self.doc_id!r} outside [0, 1]")

    def to_obj(self) -> dict:
        return {"doc_id": self.doc_id, "score": self.score, "scorer": self.scorer}

    @staticmethod
    def from_obj(obj: Mapping) -> "ScoredDocument":
        return ScoredDocument(str(obj["doc_id"]), float(obj["score"]), str(obj["scorer"]))


def score_from_logprobs(lp_affirmative: float, lp_negative: float) -> float:
    """Two-way normalization p(yes) / (p(yes) + p(no)).

    Computed from the difference of the log-probabilities, so adding a
    constant to both leaves the score unchanged and the result always
    lies in [0, 1].  Equal log-probabilities (including both -inf) give
    exactly 0.5.
    """
    if lp_affirmative == lp_negative:
        return 0.5
    diff = lp_affirmative - lp_negative
    if diff >= 0:
        return 1.0 / (1.0 + math.exp(-diff))
    weight = math.exp(diff)
    return weight / (1.0 + weight)


def truncate_for_scoring(
    text: str, estimator: TokenEstimator, lang: str | None = None
) -> str:
    return text[: estimator.char_budget(SCORING_MAX_TOKENS, lang)]


def render_scoring_prompt(
    doc_text: str,
    template: PromptTemplate | None = None,
    options: Sequence[str] = (OPTION_AFFIRMATIVE, OPTION_NEGATIVE),
) -> str:
    template = template or load_builtin("ask_llm")
    return template.body.replace("{document}", doc_text).replace("{options}", "\n".join(options))


def askllm_score(
    doc: Document,
    backend: CompletionBackend,
    estimator: TokenEstimator,
    *,
    model_id: str = "",
    vote_k: int = 8,
    vote_temperature: float = 0.0,
) -> ScoredDocument:
    """Score one document from option log-probabilities.

    Backends without log-probability support fall back to ``vote_k``
    sampled completions, with the affirmative fraction as the score; the
    scorer tag records which path produced the number so runs are never
    silently mixed.
    """
    if not doc.text.strip():
        raise QualityError(f"cannot score empty document {doc.id!r}")
    prompt = render_scoring_prompt(truncate_for_scoring(doc.text, estimator, doc.lang))
    options = [OPTION_AFFIRMATIVE, OPTION_NEGATIVE]
    try:
        lp_yes, lp_no = backend.option_logprobs(prompt, options)
    except BackendError:
        votes = 0
        for _ in range(vote_k):
            completion = backend.complete(
                prompt,
                temperature=vote_temperature,
                stop=("\n",),
                max_tokens=8,
            )
            if completion.text.strip().lower().startswith(OPTION_AFFIRMATIVE):
                votes += 1
        return ScoredDocument(doc.id, votes / vote_k, f"{SCORER_ASK_LLM_VOTE}:{model_id}")
    return ScoredDocument(
        doc.id, score_from_logprobs(lp_yes, lp_no), f"{SCORER_ASK_LLM}:{model_id}"
    )


@dataclass(frozen=True)
class FilterReport:
    threshold: float
    kept: int
    dropped: int
    kept_tokens: float
    dropped_tokens: float

    def to_obj(self) -> dict:
        return {
            "threshold": self.threshold,
            "kept": self.kept,
            "dropped": self.dropped,
            "kept_tokens": self.kept_tokens,
            "dropped_tokens": self.dropped_tokens,
        }


def threshold_filter(
    docs: Iterable[Document],
    scores: Mapping[str, float],
    threshold: float,
    estimator: TokenEstimator | None = None,
) -> tuple[list[Document], FilterReport]:
    """Keep documents whose score is strictly greater than the threshold.

    Every document must have a score; missing ids abort with the full
    list so the operator can re-queue them.
    """
    est = estimator or TokenEstimator()
    kept: list[Document] = []
    missing: list[str] = []
    n_dropped = 0
    kept_tokens = 0.0
    dropped_tokens = 0.0
    for doc in docs:
        score = scores.get(doc.id)
        if score is None:
            missing.append(doc.id)
            continue
        if score > threshold:
            kept.append(doc)
            kept_tokens += est.estimate_text(doc.text, doc.lang)
        else:
            n_dropped += 1
            dropped_tokens += est.estimate_text(doc.text, doc.lang)
    if missing:
        raise MissingScoresError(missing)
    return kept, FilterReport(threshold, len(kept), n_dropped, kept_tokens, dropped_tokens)


def write_scores(scores: Iterable[ScoredDocument], path: Path | str) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8") as handle:
        for score in scores:
            handle.write(json.dumps(score.to_obj(), ensure_ascii=False) + "\n")
            n += 1
    return n


def load_scores(path: Path | str) -> dict[str, float]:
    """Score table keyed by doc id from a (doc_id, score[, scorer]) shard."""
    return ingest_external_scores(path)


def ingest_external_scores(path: Path | str) -> dict[str, float]:
    """Read externally computed scores; duplicate or malformed ids abort."""
    table: dict[str, float] = {}
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            try:
                obj = json.loads(line)
                doc_id = str(obj["doc_id"])
                score = float(obj["score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise QualityError(f"{path}:{lineno}: malformed score record ({exc})") from exc
            if doc_id in table:
                raise QualityError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
            table[doc_id] = score
    return table
