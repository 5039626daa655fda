"""The whole pipeline end to end on a synthetic corpus.

Builds a small multilingual corpus and a config with a scripted mock
backend, then runs every stage: split, rephrase, postprocess, score,
filter, stats.  The same flow runs from the command line as
``rephrasing run-all -c config.yaml``.
"""

import random
import tempfile
from pathlib import Path

import yaml

from rephrasing.config import load_config
from rephrasing.corpus import Document, write_corpus
from rephrasing.pipeline import run_all

rng = random.Random(0)
LANGS = ("en", "de", "es", "it")


def sentence() -> str:
    return " ".join(
        "".join(rng.choice("abcdefghijklmnop") for _ in range(rng.randint(3, 9)))
        for _ in range(rng.randint(5, 14))
    ) + "."


docs = [
    Document(
        id=f"doc-{i:04d}",
        text="\n".join(" ".join(sentence() for _ in range(rng.randint(2, 6)))
                       for _ in range(rng.randint(1, 5))),
        lang=LANGS[i % 4],
    )
    for i in range(200)
]

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    write_corpus(docs, tmp / "input", stage="input", fingerprint="input")

    config = {
        "work_dir": "work",
        "input_manifest": "input/manifest.json",
        # Each language goes through its own optimized QA template.
        "template": {"en": "qa_opt_en", "de": "qa_opt_de",
                     "es": "qa_opt_es", "it": "qa_opt_it"},
        "estimator": {"default_ratio": 0.25, "sample_size": 100},
        "backend": {
            "kind": "mock",
            "model": "demo-model",
            "mock": {
                "rules": [
                    {
                        "pattern": r"(?s)<text>\n(.*?)\n</text>\[/INST\]",
                        "response": "Question: What does it say?\nAnswer: \\1\n</text>",
                    }
                ]
            },
        },
        "filter": {"scorer": "ask_llm", "threshold": 0.6},
    }
    config_path = tmp / "config.yaml"
    config_path.write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")

    reports = run_all(load_config(config_path))

    pre = reports["preprocess"]
    print(f"preprocess : {pre['docs_in']} docs -> {pre['passages']} passages "
          f"({pre['passage_est_tokens']:.0f} est tokens)")
    re_ = reports["rephrase"]
    print(f"rephrase   : {re_['done']} done, {re_['failed']} failed, "
          f"{re_['tokens_per_s']:.0f} est tokens/s")
    post = reports["postprocess"]
    print(f"postprocess: {post['emitted_docs']} docs emitted, "
          f"dropped {post['dropped_docs']}")
    print(f"score      : mean {reports['score']['mean_score']:.3f}")
    print(f"filter     : kept {reports['filter']['kept']} above 0.6")
    print()
    print(reports["stats"]["table"])
