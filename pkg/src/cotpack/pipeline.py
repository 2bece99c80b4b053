"""Run-directory orchestration: config validation, stage execution, manifests.

A run is a directory holding a manifest plus one immutable artifact set per
stage (ingest -> plan -> sample -> parse -> verify -> curate -> analyze).
Stage states move pending -> running -> done; artifact content hashes are
recorded when a stage finishes and re-checked before any downstream stage
consumes them. Re-running skips stages whose input hashes are unchanged,
and a changed config refuses to mutate an existing run directory (the
run_id is a content hash of the config snapshot).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import analytics
from .curator import (
    CuratedExample,
    SFT_FORMATS,
    TARGET_MODES,
    cap_per_question,
    emit_sft,
    filter_correct,
    select_shortest_correct,
)
from .families import FAMILIES
from .ingest import Corpus, load_corpus, stratify, write_corpus
from .packer import (
    BUILTIN_QUESTIONS,
    CONDITION_MULTI,
    CONTROL_CONDITIONS,
    ControlTexts,
    PromptSpec,
    build_control_prompt,
    pack,
    plan_batches,
)
from .parser import ParsedTrace, parse_counter_arg, parse_generation
from .sampler import (
    DecodeParams,
    HttpCompletionsBackend,
    ReplayBackend,
    SampleCache,
    Sampler,
    cache_key,
)
from .verifier import verify

STAGES = ("ingest", "plan", "sample", "parse", "verify", "curate", "analyze")

ARTIFACTS = {
    "corpus": "corpus.jsonl",
    "ingest_errors": "ingest_errors.json",
    "plan": "plan.jsonl",
    "samples_dir": "samples",
    "samples_manifest": "samples_manifest.json",
    "traces": "traces.jsonl",
    "verdicts": "verdicts.jsonl",
    "examples": "examples.jsonl",
    "sft": "sft.jsonl",
    "shortest": "sft_shortest.jsonl",
    "curation_report": "curation_report.json",
    "analysis_dir": "analysis",
}


class ValidationError(ValueError):
    """Bad config or bad invocation; maps to exit code 1."""


class StageError(RuntimeError):
    """A pipeline stage failed; maps to exit code 2."""


@dataclass
class RunConfig:
    corpus: str = ""
    family: str = "r1-distill"
    condition: str = CONDITION_MULTI
    n_questions: int = 3
    groups: int = 10
    seed: int = 0
    samples: int = 8
    temperature: float = 0.6
    top_p: float = 0.95
    max_tokens: int | None = None
    endpoint: str | None = None
    model: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    replay_dir: str | None = None
    budget: int = 4
    counter: str = "whitespace-approx"
    sft_format: str = "conversational"
    targets: str = "think-plus-answer"
    max_per_question: int | None = None
    emit_shortest: bool = False
    single_question_prefix: bool = False
    schema: dict = field(default_factory=dict)
    control_texts: dict = field(default_factory=dict)
    lexicon: dict | None = None

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"config {path} is not a mapping")
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> list[str]:
        """Every problem at once, so operators fix configs in one pass."""
        errors = []
        if not self.corpus:
            errors.append("corpus: path is required")
        elif not Path(self.corpus).exists():
            errors.append(f"corpus: file not found: {self.corpus}")
        if self.family not in FAMILIES:
            errors.append(f"family: unknown {self.family!r} (known: {', '.join(sorted(FAMILIES))})")
        valid_conditions = (CONDITION_MULTI,) + CONTROL_CONDITIONS
        if self.condition not in valid_conditions:
            errors.append(f"condition: unknown {self.condition!r}")
        if self.n_questions < 1:
            errors.append("n_questions: must be >= 1")
        if self.groups < 1:
            errors.append("groups: must be >= 1")
        if self.samples < 1:
            errors.append("samples: must be >= 1")
        if self.budget < 1:
            errors.append("budget: must be >= 1")
        if self.temperature < 0:
            errors.append("temperature: must be >= 0")
        if not 0 < self.top_p <= 1:
            errors.append("top_p: must be in (0, 1]")
        if self.max_tokens is not None and self.max_tokens < 1:
            errors.append("max_tokens: must be positive")
        if not self.endpoint and not self.replay_dir:
            errors.append("sampling: either endpoint or replay_dir is required")
        if self.replay_dir and not Path(self.replay_dir).is_dir():
            errors.append(f"replay_dir: not a directory: {self.replay_dir}")
        if not self.model:
            errors.append("model: endpoint model name is required (cache keys embed it)")
        if self.sft_format not in SFT_FORMATS:
            errors.append(f"sft_format: unknown {self.sft_format!r}")
        if self.targets not in TARGET_MODES:
            errors.append(f"targets: unknown {self.targets!r}")
        if self.max_per_question is not None and self.max_per_question < 1:
            errors.append("max_per_question: must be >= 1")
        try:
            parse_counter_arg(self.counter)
        except ValueError as exc:
            errors.append(f"counter: {exc}")
        return errors

    def run_id(self) -> str:
        snapshot = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(snapshot.encode("utf-8")).hexdigest()[:16]

    def decode_params(self) -> DecodeParams:
        max_tokens = self.max_tokens or FAMILIES[self.family].default_max_tokens
        return DecodeParams(
            temperature=self.temperature,
            top_p=self.top_p,
            max_tokens=max_tokens,
            samples=self.samples,
        )


# ---------------------------------------------------------------------------
# manifest


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def artifact_hash(path: str | Path) -> str:
    """Hash of a file, or of a directory's sorted (name, file hash) pairs."""
    path = Path(path)
    if path.is_dir():
        h = hashlib.sha256()
        for child in sorted(path.rglob("*")):
            if child.is_file():
                h.update(str(child.relative_to(path)).encode("utf-8"))
                h.update(file_hash(child).encode("ascii"))
        return h.hexdigest()
    return file_hash(path)


class RunManifest:
    def __init__(self, run_dir: Path, run_id: str, config: dict):
        self.run_dir = run_dir
        self.data = {
            "run_id": run_id,
            "created_at": _now(),
            "config": config,
            "stages": {name: {"status": "pending"} for name in STAGES},
        }

    @property
    def path(self) -> Path:
        return self.run_dir / "manifest.json"

    def save(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunManifest":
        run_dir = Path(run_dir)
        path = run_dir / "manifest.json"
        if not path.exists():
            raise ValidationError(f"no manifest at {path}")
        manifest = cls.__new__(cls)
        manifest.run_dir = run_dir
        manifest.data = json.loads(path.read_text(encoding="utf-8"))
        return manifest

    def stage(self, name: str) -> dict:
        return self.data["stages"][name]

    def recorded_output_hash(self, rel_path: str) -> str | None:
        for state in self.data["stages"].values():
            outputs = state.get("outputs", {})
            if rel_path in outputs:
                return outputs[rel_path]
        return None


# ---------------------------------------------------------------------------
# artifact IO helpers


def write_jsonl(path: Path, rows) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def load_plan(path: str | Path) -> list[PromptSpec]:
    return [PromptSpec.from_dict(d) for d in read_jsonl(path)]


def load_traces(path: str | Path) -> list[ParsedTrace]:
    return [ParsedTrace.from_dict(d) for d in read_jsonl(path)]


def questions_by_prompt(plan: list[PromptSpec], corpus: Corpus) -> dict[str, list]:
    """Resolve each prompt's ordered question records (builtins included)."""
    resolved = {}
    for spec in plan:
        questions = []
        for qid in spec.question_ids:
            record = corpus.get(qid) or BUILTIN_QUESTIONS.get(qid)
            if record is None:
                raise StageError(f"prompt {spec.prompt_id} references unknown question {qid!r}")
            questions.append(record)
        resolved[spec.prompt_id] = questions
    return resolved


def verdict_lookup(verdict_rows: list[dict]) -> dict[tuple[str, int, int], bool]:
    return {
        (row["prompt_id"], row["sample_index"], row["question_index"]): row["correct"]
        for row in verdict_rows
    }


# ---------------------------------------------------------------------------
# stages


def stage_ingest(cfg: RunConfig, run_dir: Path) -> dict[str, Path]:
    corpus = load_corpus(cfg.corpus, cfg.schema)
    out_corpus = run_dir / ARTIFACTS["corpus"]
    out_errors = run_dir / ARTIFACTS["ingest_errors"]
    write_corpus(corpus.records, out_corpus)
    write_json(out_errors, corpus.error_report())
    return {"corpus": out_corpus, "ingest_errors": out_errors}


def stage_plan(cfg: RunConfig, run_dir: Path) -> dict[str, Path]:
    corpus = load_corpus(run_dir / ARTIFACTS["corpus"])
    if cfg.condition == CONDITION_MULTI:
        if cfg.n_questions == 1:
            # Baseline sweep: one single-question prompt per record, in
            # corpus order, so every question gets its N=1 length.
            plan = [
                pack([record], cfg.family, single_question_prefix=cfg.single_question_prefix)
                for record in corpus.records
            ]
        else:
            plan = plan_batches(corpus.records, cfg.n_questions, cfg.family, cfg.groups, cfg.seed)
    else:
        texts = ControlTexts(**cfg.control_texts)
        plan = [
            build_control_prompt(
                record, cfg.condition, corpus.records, cfg.seed,
                family=cfg.family, texts=texts,
            )
            for record in corpus.records
        ]
    out = run_dir / ARTIFACTS["plan"]
    write_jsonl(out, (spec.to_dict() for spec in plan))
    return {"plan": out}


def stage_sample(cfg: RunConfig, run_dir: Path) -> dict[str, Path]:
    plan = load_plan(run_dir / ARTIFACTS["plan"])
    cache = SampleCache(run_dir / ARTIFACTS["samples_dir"])
    if cfg.replay_dir:
        backend = ReplayBackend(cfg.replay_dir)
    else:
        import os

        backend = HttpCompletionsBackend(cfg.endpoint, api_key=os.environ.get(cfg.api_key_env))
    sampler = Sampler(backend, cache, cfg.model)
    manifest_path = run_dir / ARTIFACTS["samples_manifest"]
    sampler.run_plan(plan, cfg.decode_params(), budget=cfg.budget, manifest_path=manifest_path)
    return {"samples_manifest": manifest_path, "samples_dir": cache.directory}


def stage_parse(cfg: RunConfig, run_dir: Path) -> dict[str, Path]:
    plan = load_plan(run_dir / ARTIFACTS["plan"])
    cache = SampleCache(run_dir / ARTIFACTS["samples_dir"])
    counter = parse_counter_arg(cfg.counter)
    params = cfg.decode_params()
    rows = []
    for spec in plan:
        for sample_index in range(params.samples):
            record = cache.get(cache_key(spec, params, sample_index, cfg.model))
            if record is None:
                continue
            if record.finish_reason == "error":
                trace = ParsedTrace(
                    spec.prompt_id, sample_index, cfg.family, spec.n_questions,
                    "failed", [], "generation_error",
                )
            else:
                trace = parse_generation(
                    record.raw_text,
                    prompt_id=spec.prompt_id,
                    sample_index=sample_index,
                    n_questions=spec.n_questions,
                    family=cfg.family,
                    truncated=record.truncated,
                    counter=counter,
                )
            rows.append(trace.to_dict())
    out = run_dir / ARTIFACTS["traces"]
    write_jsonl(out, rows)
    return {"traces": out}


def stage_verify(cfg: RunConfig, run_dir: Path) -> dict[str, Path]:
    plan = load_plan(run_dir / ARTIFACTS["plan"])
    corpus = load_corpus(run_dir / ARTIFACTS["corpus"])
    traces = load_traces(run_dir / ARTIFACTS["traces"])
    by_prompt = questions_by_prompt(plan, corpus)
    rows = []
    for trace in traces:
        questions = by_prompt.get(trace.prompt_id, [])
        for seg in trace.segments:
            if seg.question_index <= len(questions):
                question = questions[seg.question_index - 1]
                verdict = verify(seg.predicted_answer, question.gold_answer, question.choice_labels)
                qid, gold = question.id, question.gold_answer
            else:
                verdict = verify(None, "")
                qid, gold = "", ""
            rows.append(
                {
                    "prompt_id": trace.prompt_id,
                    "sample_index": trace.sample_index,
                    "question_index": seg.question_index,
                    "question_id": qid,
                    "correct": verdict.correct,
                    "method": verdict.method,
                    "detail": verdict.detail,
                    "predicted": seg.predicted_answer,
                    "gold": gold,
                }
            )
    out = run_dir / ARTIFACTS["verdicts"]
    write_jsonl(out, rows)
    return {"verdicts": out}


def stage_curate(cfg: RunConfig, run_dir: Path) -> dict[str, Path]:
    plan = load_plan(run_dir / ARTIFACTS["plan"])
    corpus = load_corpus(run_dir / ARTIFACTS["corpus"])
    traces = load_traces(run_dir / ARTIFACTS["traces"])
    verdicts = verdict_lookup(read_jsonl(run_dir / ARTIFACTS["verdicts"]))
    examples = filter_correct(traces, verdicts, questions_by_prompt(plan, corpus))
    if cfg.max_per_question:
        examples = cap_per_question(examples, cfg.max_per_question)

    out_examples = run_dir / ARTIFACTS["examples"]
    ordered = sorted(examples, key=lambda e: (e.question_id, e.position, e.sample_index, e.prompt_id))
    write_jsonl(out_examples, (e.to_dict() for e in ordered))

    out_sft = run_dir / ARTIFACTS["sft"]
    report = emit_sft(examples, cfg.sft_format, out_sft, targets=cfg.targets)

    outputs = {"examples": out_examples, "sft": out_sft}
    if cfg.emit_shortest:
        universe = {qid for spec in plan for qid in spec.question_ids}
        selected, omitted = select_shortest_correct(examples, universe)
        out_shortest = run_dir / ARTIFACTS["shortest"]
        shortest_report = emit_sft(selected, cfg.sft_format, out_shortest, targets=cfg.targets)
        report["shortest"] = {"examples": shortest_report["examples"], "omitted_questions": omitted}
        outputs["shortest"] = out_shortest

    out_report = run_dir / ARTIFACTS["curation_report"]
    write_json(out_report, report)
    outputs["curation_report"] = out_report
    return outputs


def _trace_segments(traces: list[ParsedTrace]):
    for trace in traces:
        for seg in trace.segments:
            yield trace, seg


def stage_analyze(cfg: RunConfig, run_dir: Path) -> dict[str, Path]:
    plan = load_plan(run_dir / ARTIFACTS["plan"])
    corpus = load_corpus(run_dir / ARTIFACTS["corpus"])
    traces = load_traces(run_dir / ARTIFACTS["traces"])
    verdict_rows = read_jsonl(run_dir / ARTIFACTS["verdicts"])
    curation = json.loads((run_dir / ARTIFACTS["curation_report"]).read_text(encoding="utf-8"))
    by_prompt = questions_by_prompt(plan, corpus)

    analysis_dir = run_dir / ARTIFACTS["analysis_dir"]
    analysis_dir.mkdir(exist_ok=True)
    outputs: dict[str, Path] = {}

    def emit(name: str, payload: dict, csv_header: list[str] | None = None, csv_rows=None):
        json_path = analysis_dir / f"{name}.json"
        write_json(json_path, payload)
        outputs[f"analysis_{name}"] = json_path
        if csv_header is not None:
            csv_path = analysis_dir / f"{name}.csv"
            write_csv(csv_path, csv_header, csv_rows)
            outputs[f"analysis_{name}_csv"] = csv_path

    # funnel: prompts -> samples -> parsed segments -> correct -> emitted
    sample_statuses: dict[str, int] = {}
    cache = SampleCache(run_dir / ARTIFACTS["samples_dir"])
    params = cfg.decode_params()
    total_records = 0
    for spec in plan:
        for i in range(params.samples):
            record = cache.get(cache_key(spec, params, i, cfg.model))
            if record is not None:
                total_records += 1
                sample_statuses[record.finish_reason] = sample_statuses.get(record.finish_reason, 0) + 1
    segments = [seg for _, seg in _trace_segments(traces)]
    correct_count = sum(1 for row in verdict_rows if row["correct"])
    status_counts: dict[str, int] = {}
    for trace in traces:
        status_counts[trace.parse_status] = status_counts.get(trace.parse_status, 0) + 1
    funnel = {
        "prompts": len(plan),
        "generations": total_records,
        "generation_status": dict(sorted(sample_statuses.items())),
        "traces": len(traces),
        "trace_status": dict(sorted(status_counts.items())),
        "parsed_segments": len(segments),
        "correct_segments": correct_count,
        "curated_examples": curation["examples"],
    }
    emit("funnel", funnel,
         ["stage", "count"],
         [["prompts", funnel["prompts"]], ["generations", funnel["generations"]],
          ["parsed_segments", funnel["parsed_segments"]],
          ["correct_segments", funnel["correct_segments"]],
          ["curated_examples", funnel["curated_examples"]]])

    # reasoning length summary (tail-truncated segments excluded: their
    # lengths are artifacts of the cap, not the model)
    lengths = [s.reasoning_tokens for s in segments if not s.tail_truncated]
    emit("lengths", analytics.length_summary(lengths), ["metric", "value"],
         [[k, v] for k, v in analytics.length_summary(lengths).items() if k != "histogram"])

    # per-question mean correctness
    per_question: dict[str, list[bool]] = {}
    for row in verdict_rows:
        if row["question_id"]:
            per_question.setdefault(row["question_id"], []).append(row["correct"])
    acc_rows = {
        qid: sum(map(bool, v)) / len(v) for qid, v in sorted(per_question.items())
    }
    accuracy_report = {
        "per_question_mean": acc_rows,
        "aggregate": (sum(acc_rows.values()) / len(acc_rows)) if acc_rows else None,
        "samples_per_question": {qid: len(v) for qid, v in sorted(per_question.items())},
    }
    emit("accuracy", accuracy_report, ["question_id", "mean_correct"],
         [[qid, acc] for qid, acc in acc_rows.items()])

    # reasoning efficiency ratio per dataset
    stats = []
    for trace, seg in _trace_segments(traces):
        if seg.tail_truncated or not seg.reasoning_text.strip():
            continue
        questions = by_prompt.get(trace.prompt_id, [])
        if seg.question_index > len(questions):
            continue
        question = questions[seg.question_index - 1]
        stats.append(
            (question.dataset or "unlabeled",
             analytics.efficiency_ratio(
                 seg.reasoning_text, question.gold_answer,
                 parse_counter_arg(cfg.counter), question.choice_labels, question.id))
        )
    by_dataset: dict[str, list] = {}
    for dataset, stat in stats:
        by_dataset.setdefault(dataset, []).append(stat)
    efficiency_report = {
        "overall": {
            "count": len(stats),
            "mean_eta": (sum(s.eta for _, s in stats) / len(stats)) if stats else None,
            "mean_pre_tokens": (sum(s.pre_tokens for _, s in stats) / len(stats)) if stats else None,
            "mean_total_tokens": (sum(s.total_tokens for _, s in stats) / len(stats)) if stats else None,
        },
        "by_dataset": {
            ds: {
                "count": len(group),
                "mean_eta": sum(s.eta for s in group) / len(group),
                "mean_pre_tokens": sum(s.pre_tokens for s in group) / len(group),
                "mean_total_tokens": sum(s.total_tokens for s in group) / len(group),
            }
            for ds, group in sorted(by_dataset.items())
        },
    }
    emit("efficiency", efficiency_report, ["dataset", "count", "mean_eta"],
         [[ds, row["count"], row["mean_eta"]] for ds, row in efficiency_report["by_dataset"].items()])

    # behavior profile over all reasoning text
    combined = "\n".join(s.reasoning_text for s in segments)
    lexicon = {k: tuple(v) for k, v in cfg.lexicon.items()} if cfg.lexicon else None
    profile = analytics.behavior_profile(combined, lexicon)
    behavior_report = {
        "counts": profile.counts,
        "densities_per_100_words": profile.densities,
        "word_total": profile.word_total,
    }
    emit("behavior", behavior_report, ["category", "count", "density_per_100_words"],
         [[cat, profile.counts[cat], profile.densities[cat]] for cat in sorted(profile.counts)])

    return outputs


STAGE_FUNCS = {
    "ingest": stage_ingest,
    "plan": stage_plan,
    "sample": stage_sample,
    "parse": stage_parse,
    "verify": stage_verify,
    "curate": stage_curate,
    "analyze": stage_analyze,
}

# Inputs each stage reads, as run-dir-relative artifact names. The ingest
# stage additionally hashes the external corpus file from the config.
STAGE_INPUTS = {
    "ingest": (),
    "plan": ("corpus",),
    "sample": ("plan",),
    "parse": ("plan", "samples_dir"),
    "verify": ("corpus", "plan", "traces"),
    "curate": ("corpus", "plan", "traces", "verdicts"),
    "analyze": ("corpus", "plan", "samples_dir", "traces", "verdicts", "curation_report"),
}


def _input_hashes(cfg: RunConfig, run_dir: Path, stage: str) -> dict[str, str]:
    hashes = {}
    if stage == "ingest":
        hashes["external:corpus"] = artifact_hash(cfg.corpus)
        hashes["config:schema"] = hashlib.sha256(
            json.dumps(cfg.schema, sort_keys=True).encode()
        ).hexdigest()
        return hashes
    for name in STAGE_INPUTS[stage]:
        path = run_dir / ARTIFACTS[name]
        if path.exists():
            hashes[ARTIFACTS[name]] = artifact_hash(path)
    return hashes


def run(cfg: RunConfig, run_dir: str | Path) -> RunManifest:
    """Execute the full pipeline in run_dir, resuming completed stages."""
    errors = cfg.validate()
    if errors:
        raise ValidationError("invalid config:\n  - " + "\n  - ".join(errors))

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    run_id = cfg.run_id()

    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        manifest = RunManifest.load(run_dir)
        if manifest.data["run_id"] != run_id:
            raise ValidationError(
                f"run dir {run_dir} belongs to run {manifest.data['run_id']}; "
                f"this config is run {run_id} - use a fresh directory"
            )
    else:
        manifest = RunManifest(run_dir, run_id, cfg.to_dict())
        manifest.save()

    for stage in STAGES:
        state = manifest.stage(stage)
        current_inputs = _input_hashes(cfg, run_dir, stage)

        # verify upstream artifacts before consuming them
        for rel_path, digest in current_inputs.items():
            recorded = manifest.recorded_output_hash(rel_path)
            if recorded is not None and recorded != digest:
                raise StageError(
                    f"stage {stage}: input artifact {rel_path} no longer matches "
                    f"the hash recorded when it was produced"
                )

        if state.get("status") == "done" and state.get("inputs") == current_inputs:
            continue

        state.update(status="running", inputs=current_inputs, started_at=_now(), error=None)
        manifest.save()
        try:
            outputs = STAGE_FUNCS[stage](cfg, run_dir)
        except (ValidationError, StageError):
            state.update(status="pending", finished_at=_now())
            manifest.save()
            raise
        except Exception as exc:
            state.update(status="pending", error=str(exc), finished_at=_now())
            manifest.save()
            raise StageError(f"stage {stage} failed: {exc}") from exc
        state.update(
            status="done",
            outputs={str(p.relative_to(run_dir)): artifact_hash(p) for p in outputs.values()},
            finished_at=_now(),
        )
        manifest.save()
    return manifest


def inspect(run_dir: str | Path, query: str = "all") -> str:
    """Human-readable run status: stage states plus the curation funnel."""
    manifest = RunManifest.load(run_dir)
    lines = [f"run {manifest.data['run_id']} at {Path(run_dir)}"]
    if query in ("all", "stages"):
        for stage in STAGES:
            state = manifest.stage(stage)
            line = f"  {stage:<8} {state.get('status', 'pending')}"
            if state.get("error"):
                line += f"  ({state['error']})"
            lines.append(line)
    if query in ("all", "funnel"):
        funnel_path = Path(run_dir) / ARTIFACTS["analysis_dir"] / "funnel.json"
        if funnel_path.exists():
            funnel = json.loads(funnel_path.read_text(encoding="utf-8"))
            lines.append(
                "  funnel: {prompts} prompts -> {generations} generations -> "
                "{parsed_segments} segments -> {correct_segments} correct -> "
                "{curated_examples} curated".format(**funnel)
            )
        else:
            lines.append("  funnel: not available (analyze stage pending)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# cross-run loaders used by the analyze subcommands


def load_run(run_dir: str | Path) -> dict:
    run_dir = Path(run_dir)
    manifest = RunManifest.load(run_dir)
    cfg = RunConfig(**manifest.data["config"])
    plan = load_plan(run_dir / ARTIFACTS["plan"])
    corpus = load_corpus(run_dir / ARTIFACTS["corpus"])
    traces = load_traces(run_dir / ARTIFACTS["traces"])
    verdict_path = run_dir / ARTIFACTS["verdicts"]
    verdict_rows = read_jsonl(verdict_path) if verdict_path.exists() else []
    return {
        "dir": run_dir,
        "config": cfg,
        "plan": plan,
        "corpus": corpus,
        "traces": traces,
        "verdicts": verdict_rows,
    }


def per_question_mean_lengths(run: dict) -> dict[str, float]:
    """Mean reasoning tokens per question over all parsed, non-tail-truncated
    segments in a run."""
    plan_index = {spec.prompt_id: spec for spec in run["plan"]}
    sums: dict[str, list[int]] = {}
    for trace in run["traces"]:
        spec = plan_index.get(trace.prompt_id)
        if spec is None:
            continue
        for seg in trace.segments:
            if seg.tail_truncated or not seg.reasoning_text.strip():
                continue
            if seg.question_index > len(spec.question_ids):
                continue
            qid = spec.question_ids[seg.question_index - 1]
            sums.setdefault(qid, []).append(seg.reasoning_tokens)
    return {qid: sum(v) / len(v) for qid, v in sums.items()}


def verdict_matrix(run: dict) -> dict[str, list[bool]]:
    """Per-question verdict vectors ordered by (plan order, sample_index)."""
    order = {spec.prompt_id: i for i, spec in enumerate(run["plan"])}
    rows = sorted(
        (row for row in run["verdicts"] if row["question_id"]),
        key=lambda r: (order.get(r["prompt_id"], 1 << 30), r["sample_index"], r["question_index"]),
    )
    matrix: dict[str, list[bool]] = {}
    for row in rows:
        matrix.setdefault(row["question_id"], []).append(bool(row["correct"]))
    return matrix


def stratification_from_corpus(corpus: Corpus, key: str) -> dict[str, list[str]]:
    return stratify(corpus.records, key)
