"""Split a document into rephrasable passages.

Documents break on line breaks, oversize segments split at sentence
enders, and consecutive chunks merge greedily back up to the 350-token
budget (50-token minimum).  Token lengths are character-count estimates,
so no tokenizer runs here.
"""

from rephrasing.corpus import Document
from rephrasing.splitting import SplitConfig, split_document
from rephrasing.tokens import TokenEstimator

est = TokenEstimator(tokens_per_char=0.25, calibrated=True)
cfg = SplitConfig()  # max 350, min 50 estimated tokens

paragraph = (
    "The lighthouse keeper climbed the spiral stairs every evening. "
    "Her lamp had guided ships through the strait for forty years. "
    "Nobody on the mainland remembered who had built the tower."
)
doc = Document(
    id="demo-1",
    text="\n\n".join([paragraph, paragraph * 8, "A short closing note."]),
    lang="en",
)

print(f"document: {len(doc.text)} chars, est {est.estimate_text(doc.text):.0f} tokens\n")

for passage in split_document(doc, cfg, est):
    flags = ",".join(sorted(passage.split_flags)) or "-"
    print(f"passage {passage.index}: est {passage.est_tokens:7.2f} tokens  flags={flags}")
    print(f"  {passage.text[:70]}...")

print("\nEvery passage sits within [50, 350] estimated tokens or carries an")
print("exemption flag; non-whitespace characters are conserved in order.")
