"""Split documents into rephrasable passages.

The splitter is deliberately simple and fast: break on line breaks, drop
blank segments, split oversize segments at sentence-ending punctuation,
then greedily merge consecutive chunks back up to the token budget.
Token lengths are estimates from :mod:`rephrasing.tokens`, never real
tokenizer calls.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from .corpus import Document
from .tokens import TokenEstimator

MAX_PASSAGE_TOKENS = 350.0
MIN_PASSAGE_TOKENS = 50.0

# Sentence-ending punctuation followed by whitespace; the terminator
# stays attached to the left chunk.
SENTENCE_END_PATTERN = r"(?<=[.!?])\s+"

# A passage that could not be split below the budget (one long sentence).
OVERSIZE_UNSPLITTABLE = "oversize_unsplittable"
# A passage below the minimum that had no previous passage to merge into,
# or that absorbed an undersize tail.
UNDERSIZE_TAIL = "undersize_tail"


@dataclass(frozen=True)
class SplitConfig:
    max_tokens: float = MAX_PASSAGE_TOKENS
    min_tokens: float = MIN_PASSAGE_TOKENS
    linebreak: str = "\n"
    sentence_end: str = SENTENCE_END_PATTERN

    def __post_init__(self) -> None:
        if not 0 < self.min_tokens < self.max_tokens:
            raise ValueError(
                f"need 0 < min_tokens < max_tokens, got {self.min_tokens}/{self.max_tokens}"
            )

    def to_obj(self) -> dict:
        return {
            "max_tokens": self.max_tokens,
            "min_tokens": self.min_tokens,
            "linebreak": self.linebreak,
            "sentence_end": self.sentence_end,
        }


@dataclass(frozen=True)
class Passage:
    """A slice of one document, the unit sent to the rephrasing model."""

    doc_id: str
    index: int
    text: str
    est_tokens: float
    split_flags: frozenset[str] = frozenset()

    def to_obj(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "index": self.index,
            "text": self.text,
            "est_tokens": self.est_tokens,
            "split_flags": sorted(self.split_flags),
        }

    @staticmethod
    def from_obj(obj: Mapping) -> "Passage":
        return Passage(
            doc_id=str(obj["doc_id"]),
            index=int(obj["index"]),
            text=str(obj["text"]),
            est_tokens=float(obj["est_tokens"]),
            split_flags=frozenset(obj.get("split_flags", [])),
        )


def normalize_newlines(text: str) -> str:
    """Fold carriage returns into plain newlines (ingestion-time cleanup)."""
    return text.replace("\r\n", "\n").replace("\r", "\n")


def split_on_linebreaks(text: str, cfg: SplitConfig = SplitConfig()) -> list[str]:
    """Maximal runs between line breaks, blank segments removed, edges trimmed."""
    segments = []
    for raw in text.split(cfg.linebreak):
        seg = raw.strip()
        if seg:
            segments.append(seg)
    return segments


def split_long_segment(
    segment: str,
    cfg: SplitConfig,
    est: TokenEstimator,
    lang: str | None = None,
) -> list[str]:
    """Split a segment exceeding the budget at sentence-ending punctuation.

    Segments within the budget pass through untouched.  A sentence that
    still exceeds the budget has no interior split point and is returned
    whole; the flag is attached downstream when passages are built.
    """
    if est.estimate_text(segment, lang) <= cfg.max_tokens:
        return [segment]
    return [part for part in re.split(cfg.sentence_end, segment) if part]


def merge_chunks(
    chunks: Sequence[str],
    cfg: SplitConfig,
    est: TokenEstimator,
    lang: str | None = None,
) -> list[str]:
    """Greedy left-to-right merge of chunks up to the maximum budget.

    When adding the next chunk would push the running passage over
    ``max_tokens``, the accumulated passage is emitted and a new one
    starts with that chunk.  Chunks inside a passage are joined with a
    single space, and the space is charged against the budget.  A final
    accumulator under ``min_tokens`` is appended to the previously
    emitted passage when one exists.
    """
    sep_cost = est.estimate_chars(1, lang)
    merged: list[str] = []
    acc: list[str] = []
    acc_est = 0.0
    for chunk in chunks:
        chunk_est = est.estimate_text(chunk, lang)
        if not acc:
            acc = [chunk]
            acc_est = chunk_est
        elif acc_est + sep_cost + chunk_est > cfg.max_tokens:
            merged.append(" ".join(acc))
            acc = [chunk]
            acc_est = chunk_est
        else:
            acc.append(chunk)
            acc_est += sep_cost + chunk_est
    if acc:
        tail = " ".join(acc)
        if acc_est < cfg.min_tokens and merged:
            merged[-1] = merged[-1] + " " + tail
        else:
            merged.append(tail)
    return merged


def split_document(
    doc: Document,
    cfg: SplitConfig = SplitConfig(),
    est: TokenEstimator = TokenEstimator(),
) -> list[Passage]:
    """Full split: line breaks, oversize sentence split, greedy merge.

    Every passage either satisfies the token bounds or carries the
    matching exemption flag; the multiset of non-whitespace characters
    is conserved across the split.
    """
    lang = doc.lang
    chunks: list[str] = []
    for segment in split_on_linebreaks(normalize_newlines(doc.text), cfg):
        chunks.extend(split_long_segment(segment, cfg, est, lang))
    passages = []
    for index, text in enumerate(merge_chunks(chunks, cfg, est, lang)):
        est_tokens = est.estimate_text(text, lang)
        flags = set()
        if est_tokens > cfg.max_tokens:
            flags.add(OVERSIZE_UNSPLITTABLE)
        if est_tokens < cfg.min_tokens:
            flags.add(UNDERSIZE_TAIL)
        passages.append(Passage(doc.id, index, text, est_tokens, frozenset(flags)))
    return passages
