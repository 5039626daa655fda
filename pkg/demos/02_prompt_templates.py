"""Render a passage into the built-in prompt templates.

Four legacy styles (toddler, hard, wiki, QA) use Mistral [INST] framing
and stop at the end-of-sequence marker.  The optimized QA templates
(English, German, Italian, Spanish, plus a Qwen2 ChatML variant) wrap
the passage in <text></text> tags so postprocessing only has to read up
to the first closing tag.
"""

from rephrasing.prompts import list_templates, render
from rephrasing.splitting import Passage

print("built-in templates (id, language, extraction mode):")
for template_id, language, mode in list_templates():
    print(f"  {template_id:14} {language:3} {mode}")

passage = Passage("demo", 0, "The sky is blue. Water is wet.", 7.75)

print("\n--- legacy QA prompt " + "-" * 40)
rendered = render(passage, "qa")
print(rendered.text)
print(f"[stop sequences: {rendered.stop}, temperature {rendered.temperature}]")

print("\n--- optimized QA prompt (tagged) " + "-" * 28)
rendered = render(passage, "qa_opt_en")
print(rendered.text)
print(f"[stop sequences: {rendered.stop}]")

print("\nThe tagged prompt ends inside an open <text> region, so the")
print("model's completion is the rephrased passage up to </text>.")
