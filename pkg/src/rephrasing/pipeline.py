"""Wire the stages into file-to-file pipeline steps.

Every stage reads its input manifest, writes an output manifest plus
shards under the work directory, and returns a report dict.  Stage
outputs are pure functions of (input shards, config, seed), so running
``run-all`` equals running the stages one by one.

Work directory layout::

    work_dir/
      calibration.json          token estimator (ratio, sample, seed)
      passages/                 split passages + manifest
      rephrase/                 checkpoint, raw completions, failed jobs
      rephrased/                reassembled documents, audit shard, report
      scores/                   quality scores
      filtered/                 threshold-filtered corpus
      mixed/                    mixed corpus
      stats/                    corpus overview table (text + JSON)
"""

from __future__ import annotations

import itertools
import json
import time
from collections import Counter
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import requests

from .config import PipelineConfig
from .corpus import (
    CorpusStats,
    Document,
    Provenance,
    ShardEntry,
    ShardManifest,
    corpus_stats,
    iter_corpus,
    load_shard,
    stats_table,
    stats_to_obj,
    write_corpus,
)
from .inference import (
    CheckpointWriter,
    CompletionBackend,
    HttpBackend,
    JobKey,
    MockBackend,
    RephraseJob,
    RephraseResult,
    map_bounded,
    resume,
    run_batch,
    schedule,
)
from .mixing import MixSource, MixSpec, execute_mix
from .postprocess import (
    DEFAULT_MARKER_PATTERNS,
    DOC_DROP_NO_PASSAGES,
    CleanedPassage,
    assemble_document,
    clean_passage,
    load_marker_patterns,
)
from .prompts import render
from .quality import askllm_score, ingest_external_scores, load_scores, threshold_filter, write_scores
from .splitting import Passage, split_document
from .tokens import TokenEstimator, calibrate

AUDIT_INFERENCE_FAILED = "inference_failed"


class StageError(Exception):
    """Stage precondition failure: missing inputs, fingerprint mismatch."""


def _write_jsonl(objs: Iterable[dict], path: Path) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8") as handle:
        for obj in objs:
            handle.write(json.dumps(obj, ensure_ascii=False) + "\n")
            n += 1
    return n


def _read_jsonl(path: Path) -> Iterator[dict]:
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                yield json.loads(line)


def _write_report(obj: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def resolve_input_manifest(cfg: PipelineConfig) -> tuple[ShardManifest, Path]:
    """Accept a manifest file, a single shard, or a directory of shards."""
    source = cfg.input_manifest
    if source is None:
        raise StageError("config has no input_manifest")
    source = Path(source)
    if source.is_file() and source.suffix == ".json":
        return ShardManifest.load(source), source.parent
    if source.is_file() and source.suffix == ".jsonl":
        entry = _entry_for_shard(source, cfg)
        return ShardManifest("input", "input", [entry]), source.parent
    if source.is_dir():
        shards = sorted(source.glob("*.jsonl"))
        if not shards:
            raise StageError(f"no .jsonl shards in {source}")
        entries = [_entry_for_shard(p, cfg) for p in shards]
        return ShardManifest("input", "input", entries), source
    raise StageError(f"input manifest not found: {source}")


def _entry_for_shard(path: Path, cfg: PipelineConfig) -> ShardEntry:
    reader = load_shard(path, cfg.languages)
    docs = 0
    chars = 0
    for doc in reader:
        docs += 1
        chars += len(doc.text)
    if reader.errors:
        raise StageError(f"input shard {path}: {reader.summary()}")
    return ShardEntry(path.name, docs, chars, 0.0)


def _require_manifest(path: Path, cfg: PipelineConfig, stage: str) -> ShardManifest:
    if not path.is_file():
        raise StageError(f"missing {stage} manifest {path}; run the earlier stage first")
    manifest = ShardManifest.load(path)
    if manifest.fingerprint != cfg.fingerprint():
        raise StageError(
            f"{stage} manifest {path} was produced under config fingerprint "
            f"{manifest.fingerprint}, current config is {cfg.fingerprint()}"
        )
    return manifest


def _exact_counter(endpoint: str):
    """Exact token counts from an external tokenizer over a local wire
    interface: POST {"text": ...} -> {"tokens": n}."""

    def count(text: str) -> int:
        response = requests.post(endpoint, json={"text": text}, timeout=60)
        response.raise_for_status()
        return int(response.json()["tokens"])

    return count


def load_estimator(cfg: PipelineConfig) -> TokenEstimator:
    path = cfg.work_dir / "calibration.json"
    if not path.is_file():
        raise StageError(f"missing calibration report {path}; run preprocess first")
    return TokenEstimator.load(path)


def make_backend(cfg: PipelineConfig) -> CompletionBackend:
    if cfg.backend_kind == "mock":
        return MockBackend.from_config(cfg.mock_backend)
    return HttpBackend(cfg.backend)


def stage_preprocess(cfg: PipelineConfig) -> dict:
    """Calibrate the estimator and split the input corpus into passages."""
    started = time.monotonic()
    manifest_in, base_dir = resolve_input_manifest(cfg)

    counter = None
    if cfg.estimator.exact_endpoint:
        counter = _exact_counter(cfg.estimator.exact_endpoint)
    estimator = calibrate(
        iter_corpus(manifest_in, base_dir, cfg.languages),
        counter,
        seed=cfg.seed,
        sample_size=cfg.estimator.sample_size,
        per_language=cfg.estimator.per_language,
        default_ratio=cfg.estimator.default_ratio,
    )
    cfg.work_dir.mkdir(parents=True, exist_ok=True)
    estimator.save(cfg.work_dir / "calibration.json")

    out_dir = cfg.work_dir / "passages"
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = cfg.fingerprint()

    docs_in = 0
    docs_without_passages = 0
    flag_counts: Counter = Counter()
    manifest_out = ShardManifest("passages", fingerprint)
    shard_index = 0
    batch: list[Passage] = []

    def flush() -> None:
        nonlocal shard_index, batch
        if not batch and shard_index > 0:
            return
        path = out_dir / f"passages-{shard_index:05d}.jsonl"
        chars = sum(len(p.text) for p in batch)
        tokens = sum(p.est_tokens for p in batch)
        _write_jsonl((p.to_obj() for p in batch), path)
        manifest_out.shards.append(ShardEntry(path.name, len(batch), chars, tokens))
        shard_index += 1
        batch = []

    for doc in iter_corpus(manifest_in, base_dir, cfg.languages):
        docs_in += 1
        passages = split_document(doc, cfg.split, estimator)
        if not passages:
            docs_without_passages += 1
            continue
        for passage in passages:
            flag_counts.update(passage.split_flags)
            batch.append(passage)
            if len(batch) >= cfg.shard_size:
                flush()
    flush()
    manifest_out.save(out_dir / "manifest.json")

    report = {
        "stage": "preprocess",
        "docs_in": docs_in,
        "docs_without_passages": docs_without_passages,
        "passages": manifest_out.total_docs,
        "passage_est_tokens": manifest_out.total_est_tokens,
        "flag_counts": dict(flag_counts),
        "estimator": estimator.to_obj(),
        "seconds": round(time.monotonic() - started, 3),
    }
    _write_report(report, out_dir / "report.json")
    return report


def iter_passages(cfg: PipelineConfig) -> Iterator[Passage]:
    out_dir = cfg.work_dir / "passages"
    manifest = _require_manifest(out_dir / "manifest.json", cfg, "passages")
    for path in manifest.shard_paths(out_dir):
        for obj in _read_jsonl(path):
            yield Passage.from_obj(obj)


def stage_rephrase(cfg: PipelineConfig, *, on_result=None) -> dict:
    """Render prompts, drive the backend, and store raw completions.

    Completed jobs land in an append-only checkpoint first, so a killed
    run resumes without re-issuing finished requests and reproduces the
    same output files byte for byte.
    """
    started = time.monotonic()
    estimator = load_estimator(cfg)
    registry = cfg.registry()
    fingerprint = cfg.fingerprint()

    doc_langs: dict[str, str] = {}
    if cfg.template_by_lang:
        manifest_in, base_dir = resolve_input_manifest(cfg)
        doc_langs = {
            doc.id: doc.lang for doc in iter_corpus(manifest_in, base_dir, cfg.languages)
        }

    def template_for(doc_id: str):
        if not cfg.template_by_lang:
            return registry.get(cfg.template_id)
        lang = doc_langs.get(doc_id)
        if lang is None:
            raise StageError(f"passage references unknown document {doc_id!r}")
        return registry.get(cfg.template_id_for(lang))

    jobs = []
    for p in iter_passages(cfg):
        template = template_for(p.doc_id)
        jobs.append(
            RephraseJob(
                key=JobKey(p.doc_id, p.index, template.template_id),
                prompt=render(p, template, cfg.temperature),
            )
        )

    out_dir = cfg.work_dir / "rephrase"
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.jsonl"
    remaining, replayed = resume(checkpoint_path, jobs, fingerprint)

    backend = make_backend(cfg)
    with CheckpointWriter(checkpoint_path, fingerprint) as checkpoint:
        results = run_batch(
            jobs,
            backend,
            cfg.backend,
            plan=schedule(jobs) if jobs else None,
            checkpoint=checkpoint,
            replayed=replayed,
            on_result=on_result,
        )
    wall = time.monotonic() - started

    done = [r for r in results if not r.failed]
    failed = [r for r in results if r.failed]
    _write_jsonl((r.to_obj() for r in done), out_dir / "completions.jsonl")
    _write_jsonl((r.to_obj() for r in failed), out_dir / "failed.jsonl")

    output_tokens = sum(estimator.estimate_text(r.text) for r in done)
    report = {
        "stage": "rephrase",
        "jobs": len(jobs),
        "replayed": len(replayed),
        "issued": len(jobs) - len(replayed),
        "done": len(done),
        "failed": len(failed),
        "length_capped": sum(1 for r in done if r.finish == "length_cap"),
        "output_est_tokens": output_tokens,
        "tokens_per_s": round(output_tokens / wall, 1) if wall > 0 else 0.0,
        "seconds": round(wall, 6),
    }
    _write_report(report, out_dir / "throughput.json")
    return report


def _doc_info(cfg: PipelineConfig) -> dict[str, tuple[str, Mapping[str, str]]]:
    manifest_in, base_dir = resolve_input_manifest(cfg)
    return {
        doc.id: (doc.lang, doc.meta)
        for doc in iter_corpus(manifest_in, base_dir, cfg.languages)
    }


def stage_postprocess(cfg: PipelineConfig) -> dict:
    """Clean completions, filter passages, and reassemble documents."""
    started = time.monotonic()
    estimator = load_estimator(cfg)
    registry = cfg.registry()
    regime = cfg.regime()
    patterns = DEFAULT_MARKER_PATTERNS
    if cfg.postprocess.pattern_file is not None:
        patterns = load_marker_patterns(cfg.postprocess.pattern_file)

    rephrase_dir = cfg.work_dir / "rephrase"
    completions_path = rephrase_dir / "completions.jsonl"
    if not completions_path.is_file():
        raise StageError(f"missing completions {completions_path}; run rephrase first")

    doc_info = _doc_info(cfg)
    audit: list[dict] = []
    rejection_counts: Counter = Counter()
    doc_drop_counts: Counter = Counter()
    docs_out: list[Document] = []
    passages_in = 0
    accepted = 0

    def cleaned_stream() -> Iterator[tuple[str, RephraseResult, CleanedPassage]]:
        nonlocal passages_in
        for obj in _read_jsonl(completions_path):
            result = RephraseResult.from_obj(obj)
            passages_in += 1
            yield result.key.doc_id, result, clean_passage(
                result.key.doc_id,
                result.key.index,
                result.text,
                regime,
                seed=cfg.seed,
                patterns=patterns,
                completion_prefix=registry.get(result.key.template_id).completion_prefix,
            )

    failed_path = rephrase_dir / "failed.jsonl"
    failed_docs: set[str] = set()
    if failed_path.is_file():
        for obj in _read_jsonl(failed_path):
            key = JobKey.from_obj(obj["key"])
            audit.append({"doc_id": key.doc_id, "index": key.index, "reason": AUDIT_INFERENCE_FAILED})
            failed_docs.add(key.doc_id)

    processed_docs: set[str] = set()
    for doc_id, group in itertools.groupby(cleaned_stream(), key=lambda item: item[0]):
        rows = list(group)
        processed_docs.add(doc_id)
        cleaned = [c for _, _, c in rows]
        for passage in cleaned:
            if passage.accepted:
                accepted += 1
            else:
                rejection_counts[passage.rejection] += 1
                audit.append(
                    {"doc_id": doc_id, "index": passage.index, "reason": passage.rejection}
                )
        lang, meta = doc_info.get(doc_id, ("en", {}))
        doc, drop_reason = assemble_document(
            cleaned,
            lang=lang,
            meta=meta,
            provenance=Provenance.rephrased(
                rows[0][1].key.template_id, cfg.backend.model or rows[0][1].model_id
            ),
        )
        if doc is None:
            doc_drop_counts[drop_reason] += 1
            audit.append({"doc_id": doc_id, "index": None, "reason": drop_reason})
        else:
            docs_out.append(doc)

    # Documents whose every passage failed inference never reach the
    # groupby above; account for them so input = emitted + dropped.
    for doc_id in sorted(failed_docs - processed_docs):
        doc_drop_counts[DOC_DROP_NO_PASSAGES] += 1
        audit.append({"doc_id": doc_id, "index": None, "reason": DOC_DROP_NO_PASSAGES})

    out_dir = cfg.work_dir / "rephrased"
    manifest = write_corpus(
        docs_out,
        out_dir,
        stage="rephrased",
        fingerprint=cfg.fingerprint(),
        estimator=estimator,
        shard_size=cfg.shard_size,
    )
    _write_jsonl(iter(audit), out_dir / "audit.jsonl")

    docs_in = len({a["doc_id"] for a in audit} | {d.id for d in docs_out})
    report = {
        "stage": "postprocess",
        "regime": regime,
        "input_docs": docs_in,
        "emitted_docs": len(docs_out),
        "dropped_docs": dict(doc_drop_counts),
        "passages_in": passages_in,
        "passages_accepted": accepted,
        "passage_rejections": dict(rejection_counts),
        "emitted_est_tokens": manifest.total_est_tokens,
        "seconds": round(time.monotonic() - started, 3),
    }
    _write_report(report, out_dir / "report.json")
    return report


def stage_score(cfg: PipelineConfig, manifest_path: Path | None = None) -> dict:
    """Score documents with the informative-signal prompt."""
    started = time.monotonic()
    estimator = load_estimator(cfg)
    backend = make_backend(cfg)
    manifest, base_dir = _select_corpus(cfg, manifest_path)

    docs = list(iter_corpus(manifest, base_dir, cfg.languages))
    scores = map_bounded(
        lambda doc: askllm_score(
            doc,
            backend,
            estimator,
            model_id=cfg.backend.model or "mock",
            vote_k=cfg.filter.vote_k,
        ),
        docs,
        cfg.backend.max_in_flight,
    )

    out_dir = cfg.work_dir / "scores"
    write_scores(scores, out_dir / "scores.jsonl")
    values = [s.score for s in scores]
    report = {
        "stage": "score",
        "docs": len(scores),
        "scorers": sorted({s.scorer for s in scores}),
        "mean_score": sum(values) / len(values) if values else 0.0,
        "min_score": min(values, default=0.0),
        "max_score": max(values, default=0.0),
        "seconds": round(time.monotonic() - started, 3),
    }
    _write_report(report, out_dir / "report.json")
    return report


def _select_corpus(
    cfg: PipelineConfig, manifest_path: Path | None
) -> tuple[ShardManifest, Path]:
    """Pick the corpus a stage operates on: explicit path, else the
    rephrased output when present, else the input corpus."""
    if manifest_path is not None:
        manifest_path = Path(manifest_path)
        if not manifest_path.is_file():
            raise StageError(f"manifest not found: {manifest_path}")
        return ShardManifest.load(manifest_path), manifest_path.parent
    rephrased = cfg.work_dir / "rephrased" / "manifest.json"
    if rephrased.is_file():
        return _require_manifest(rephrased, cfg, "rephrased"), rephrased.parent
    return resolve_input_manifest(cfg)


def stage_filter(
    cfg: PipelineConfig,
    manifest_path: Path | None = None,
    threshold: float | None = None,
) -> dict:
    """Keep documents scoring strictly above the threshold."""
    started = time.monotonic()
    estimator = load_estimator(cfg)
    manifest, base_dir = _select_corpus(cfg, manifest_path)
    threshold = cfg.filter.threshold if threshold is None else threshold

    if cfg.filter.scorer == "external":
        if cfg.filter.external_scores is None:
            raise StageError("filter.scorer is external but no external_scores file is set")
        scores = ingest_external_scores(cfg.filter.external_scores)
    else:
        scores_path = cfg.work_dir / "scores" / "scores.jsonl"
        # An absent score shard filters against an empty table, so the
        # resulting error names every unscored document.
        scores = load_scores(scores_path) if scores_path.is_file() else {}

    docs = iter_corpus(manifest, base_dir, cfg.languages)
    kept, filter_report = threshold_filter(docs, scores, threshold, estimator)

    out_dir = cfg.work_dir / "filtered"
    out_manifest = write_corpus(
        kept,
        out_dir,
        stage="filtered",
        fingerprint=cfg.fingerprint(),
        estimator=estimator,
        shard_size=cfg.shard_size,
    )
    report = {
        "stage": "filter",
        "scorer": cfg.filter.scorer,
        **filter_report.to_obj(),
        "emitted_est_tokens": out_manifest.total_est_tokens,
        "seconds": round(time.monotonic() - started, 3),
    }
    _write_report(report, out_dir / "report.json")
    return report


def stage_mix(cfg: PipelineConfig) -> dict:
    """Compose the configured mixture into a new corpus."""
    started = time.monotonic()
    if cfg.mix is None or not cfg.mix.sources:
        raise StageError("config has no mix section")
    estimator = load_estimator(cfg)
    spec = MixSpec(
        sources=tuple(
            MixSource(s.name, Path(s.manifest), s.weight) for s in cfg.mix.sources
        ),
        unit=cfg.mix.unit,
        target=cfg.mix.target,
        seed=cfg.seed if cfg.mix.seed is None else cfg.mix.seed,
    )
    manifest, mix_report = execute_mix(
        spec,
        cfg.work_dir / "mixed",
        fingerprint=cfg.fingerprint(),
        estimator=estimator,
        shard_size=cfg.shard_size,
        languages=None,
    )
    report = {
        "stage": "mix",
        **mix_report.to_obj(),
        "docs": manifest.total_docs,
        "est_tokens": manifest.total_est_tokens,
        "seconds": round(time.monotonic() - started, 3),
    }
    _write_report(report, cfg.work_dir / "mixed" / "report.json")
    return {**report, "table": mix_report.table()}


def stage_stats(cfg: PipelineConfig) -> dict:
    """Corpus overview table (text + JSON) over every known manifest."""
    started = time.monotonic()
    estimator = None
    calibration = cfg.work_dir / "calibration.json"
    if calibration.is_file():
        estimator = TokenEstimator.load(calibration)
    exact = _exact_counter(cfg.estimator.exact_endpoint) if cfg.estimator.exact_endpoint else None

    rows: list[tuple[str, CorpusStats]] = []
    try:
        manifest_in, base_dir = resolve_input_manifest(cfg)
        rows.append(
            (
                "input",
                corpus_stats(
                    manifest_in, base_dir, estimator, exact, languages=cfg.languages
                ),
            )
        )
    except StageError:
        pass
    for name in ("rephrased", "filtered", "mixed"):
        path = cfg.work_dir / name / "manifest.json"
        if path.is_file():
            manifest = ShardManifest.load(path)
            rows.append(
                (name, corpus_stats(manifest, path.parent, estimator, exact, languages=None))
            )

    if not rows:
        raise StageError("nothing to report: no input manifest and no stage outputs")

    table = stats_table(rows)
    obj = stats_to_obj(rows)
    postprocess_report = cfg.work_dir / "rephrased" / "report.json"
    if postprocess_report.is_file():
        report_obj = json.loads(postprocess_report.read_text(encoding="utf-8"))
        obj["reconciliation"] = {
            "input_docs": report_obj["input_docs"],
            "emitted_docs": report_obj["emitted_docs"],
            "dropped_docs": report_obj["dropped_docs"],
        }

    out_dir = cfg.work_dir / "stats"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "stats.txt").write_text(table + "\n", encoding="utf-8")
    _write_report(obj, out_dir / "stats.json")
    return {
        "stage": "stats",
        "table": table,
        **obj,
        "seconds": round(time.monotonic() - started, 3),
    }


RUN_ALL_ORDER = ("preprocess", "rephrase", "postprocess", "score", "filter", "mix", "stats")


def run_all(cfg: PipelineConfig) -> dict:
    """Chain the stages in pipeline order; mix only when configured."""
    reports = {}
    reports["preprocess"] = stage_preprocess(cfg)
    reports["rephrase"] = stage_rephrase(cfg)
    reports["postprocess"] = stage_postprocess(cfg)
    reports["score"] = stage_score(cfg)
    reports["filter"] = stage_filter(cfg)
    if cfg.mix is not None and cfg.mix.sources:
        reports["mix"] = stage_mix(cfg)
    reports["stats"] = stage_stats(cfg)
    return reports
