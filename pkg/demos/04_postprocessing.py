"""Clean raw completions and reassemble documents.

Tagged completions cut at the first </text>; legacy completions split on
paraphrase marker lines, keep one alternative by seeded choice, and
strip leftover markers.  Both then pass the same filters: 50 to 5000
characters, and the last character must not be a letter (a trailing
letter means the generation was cut off).
"""

from rephrasing.corpus import Provenance
from rephrasing.postprocess import assemble_document, clean_passage

samples = {
    "tagged, clean": (
        "tagged",
        "Question: What color is the sky?\nAnswer: The sky is blue today.\n</text> junk after",
    ),
    "tagged, truncated (no close tag, ends in a letter)": (
        "tagged",
        "Question: What happened? Answer: the generation just sto",
    ),
    "legacy, two alternatives (seeded pick)": (
        "legacy",
        "Paraphrase 1: The watchman lit the ancient lamp at dusk, as always.\n"
        "Paraphrase 2: At sunset the keeper kindled the old light once more.</s>",
    ),
    "legacy, too short after cleaning": ("legacy", "Paraphrase: Tiny.</s>"),
}

cleaned = []
for label, (regime, raw) in samples.items():
    result = clean_passage("demo", len(cleaned), raw, regime, seed=7)
    verdict = "accepted" if result.accepted else f"rejected ({result.rejection})"
    print(f"{label}\n  -> {verdict}: {result.text[:60]!r}\n")
    cleaned.append(result)

doc, drop_reason = assemble_document(
    cleaned, lang="en", provenance=Provenance.rephrased("qa_opt_en", "demo-model")
)
if doc is None:
    print(f"document dropped: {drop_reason}")
else:
    print(f"assembled document ({len(doc.text)} chars, accepted passages joined by newlines):")
    print(doc.text)
