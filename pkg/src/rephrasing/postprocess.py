"""Clean raw completions and reassemble passages into documents.

Two cleaning regimes match the two template generations.  The legacy
regime splits multiple paraphrases on marker lines, keeps one chosen by
a seeded RNG, and strips leftover marker strings.  The tagged regime
simply takes everything before the first ``</text>``.  Either way the
survivor passes the same length and truncation filters before accepted
passages are joined back into full documents.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Document, Provenance
from .prompts import TEXT_CLOSE

MIN_PASSAGE_CHARS = 50
MAX_PASSAGE_CHARS = 5000
MIN_DOCUMENT_CHARS = 100

LEGACY = "legacy"
TAGGED = "tagged"

REJECT_TOO_SHORT = "too_short"
REJECT_TOO_LONG = "too_long"
REJECT_TRUNCATED_ALPHA = "truncated_alpha"
REJECT_EMPTY = "empty_after_clean"

REJECTION_REASONS = (
    REJECT_TOO_SHORT,
    REJECT_TOO_LONG,
    REJECT_TRUNCATED_ALPHA,
    REJECT_EMPTY,
)

# End-of-sequence artifacts models echo into their output.
EOS_ARTIFACTS = ("</s>", "<|im_end|>")

# Marker lines that introduce one paraphrase alternative.  Ordered so
# longer markers strip before their substrings; extend via a pattern
# file when a model invents new headers.
DEFAULT_MARKER_PATTERNS: tuple[str, ...] = (
    r"Toddler-friendly paraphrase\s*:",
    r"Erudite paraphrase\s*:",
    r"Paraphrase\s+\d+\s*:",
    r"(?:Option|Version|Alternative|Rephrasing)\s+\d+\s*:",
    r"Paraphrase\s*:",
)


def load_marker_patterns(path: Path | str) -> tuple[str, ...]:
    """One regex per line; blank lines and ``#`` comments ignored."""
    patterns = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if line and not line.startswith("#"):
            patterns.append(line)
    return tuple(patterns)


def extract_tagged(raw: str, completion_prefix: str = "") -> str:
    """Content up to the first closing tag, whitespace trimmed.

    A completion without the closing tag is returned whole; the
    truncation filter adjudicates it afterwards.  ``completion_prefix``
    restores text the assistant prefix already contained.
    """
    pos = raw.find(TEXT_CLOSE)
    body = raw if pos < 0 else raw[:pos]
    body = body.strip()
    if not body:
        return ""
    return completion_prefix + body


@lru_cache(maxsize=32)
def _marker_line_re(patterns: tuple[str, ...]) -> re.Pattern:
    alternatives = "|".join(f"(?:{p})" for p in patterns)
    return re.compile(rf"^[ \t]*(?:{alternatives})", re.MULTILINE)


@lru_cache(maxsize=32)
def _compiled(patterns: tuple[str, ...]) -> tuple[re.Pattern, ...]:
    return tuple(re.compile(p) for p in patterns)


def _paraphrase_blocks(text: str, patterns: tuple[str, ...]) -> list[str]:
    """Segments following each marker line; the whole text when none match."""
    matches = list(_marker_line_re(patterns).finditer(text))
    if not matches:
        return [text]
    blocks = []
    for i, match in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        block = text[match.end():end]
        if block.strip():
            blocks.append(block)
    return blocks or [""]


def clean_legacy(
    raw: str,
    *,
    seed: int = 0,
    doc_id: str = "",
    index: int = 0,
    patterns: Sequence[str] = DEFAULT_MARKER_PATTERNS,
) -> str:
    """Pick one paraphrase and strip unwanted patterns and EOS artifacts.

    When the completion contains several paraphrase blocks, one is
    chosen by an RNG derived from (seed, doc_id, index), so reruns and
    parallel orderings reproduce the same choice.
    """
    patterns = tuple(patterns)
    blocks = _paraphrase_blocks(raw, patterns)
    if len(blocks) == 1:
        survivor = blocks[0]
    else:
        rng = random.Random(f"{seed}|{doc_id}|{index}")
        survivor = blocks[rng.randrange(len(blocks))]
    for pattern in _compiled(patterns):
        survivor = pattern.sub("", survivor)
    for artifact in EOS_ARTIFACTS:
        survivor = survivor.replace(artifact, "")
    return survivor.strip()


def filter_verdict(text: str) -> str | None:
    """Rejection reason for a cleaned passage, or None when accepted.

    Keeps passages between 50 and 5000 characters whose last character
    is not a letter (a trailing letter indicates a truncated output).
    """
    if not text:
        return REJECT_EMPTY
    if len(text) < MIN_PASSAGE_CHARS:
        return REJECT_TOO_SHORT
    if len(text) > MAX_PASSAGE_CHARS:
        return REJECT_TOO_LONG
    if text[-1].isalpha():
        return REJECT_TRUNCATED_ALPHA
    return None


@dataclass(frozen=True)
class CleanedPassage:
    """Verdict for one raw completion: cleaned text or a rejection reason."""

    doc_id: str
    index: int
    text: str
    regime: str
    rejection: str | None = None

    @property
    def accepted(self) -> bool:
        return self.rejection is None


def clean_passage(
    doc_id: str,
    index: int,
    raw: str,
    regime: str,
    *,
    seed: int = 0,
    patterns: Sequence[str] = DEFAULT_MARKER_PATTERNS,
    completion_prefix: str = "",
) -> CleanedPassage:
    """Clean one raw completion under the given regime and filter it."""
    if regime == TAGGED:
        text = extract_tagged(raw, completion_prefix)
    elif regime == LEGACY:
        text = clean_legacy(raw, seed=seed, doc_id=doc_id, index=index, patterns=patterns)
    else:
        raise ValueError(f"unknown postprocessing regime {regime!r}")
    return CleanedPassage(doc_id, index, text, regime, filter_verdict(text))


DOC_DROP_TOO_SHORT = "doc_too_short"
DOC_DROP_NO_PASSAGES = "no_accepted_passages"


def assemble_document(
    passages: Iterable[CleanedPassage],
    *,
    lang: str,
    meta: Mapping[str, str] | None = None,
    provenance: Provenance,
) -> tuple[Document | None, str | None]:
    """Join accepted passages of one document with single newlines.

    Returns (document, None) on success or (None, drop reason) when no
    passage was accepted or the assembled text stays under 100 chars.
    """
    accepted = sorted((p for p in passages if p.accepted), key=lambda p: p.index)
    if not accepted:
        return None, DOC_DROP_NO_PASSAGES
    text = "\n".join(p.text for p in accepted)
    if len(text) < MIN_DOCUMENT_CHARS:
        return None, DOC_DROP_TOO_SHORT
    doc = Document(
        id=accepted[0].doc_id,
        text=text,
        lang=lang,
        meta=dict(meta or {}),
        provenance=provenance,
    )
    return doc, None
