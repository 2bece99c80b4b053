"""Command-line interface.

Subcommands mirror the pipeline stages (ingest, plan, sample, parse,
verify, curate, analyze) plus `run` (full pipeline over a run directory
with a manifest) and `inspect` (stage states and funnel counts).

Exit codes: 0 success, 1 validation problem, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import analytics, pipeline
from .curator import cap_per_question, emit_sft, filter_correct, select_shortest_correct
from .ingest import load_corpus, write_corpus
from .packer import (
    CONDITION_MULTI,
    CONTROL_CONDITIONS,
    ControlTexts,
    build_control_prompt,
    pack,
    plan_batches,
)
from .parser import parse_counter_arg
from .pipeline import (
    ARTIFACTS,
    RunConfig,
    StageError,
    ValidationError,
    load_plan,
    load_run,
    load_traces,
    per_question_mean_lengths,
    questions_by_prompt,
    read_jsonl,
    verdict_lookup,
    verdict_matrix,
    write_json,
    write_jsonl,
)
from .sampler import DecodeParams, HttpCompletionsBackend, ReplayBackend, SampleCache, Sampler
from .verifier import verify


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; 2 is reserved for stage failures here.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _schema_pairs(pairs: list[str]) -> dict[str, str]:
    schema = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValidationError(f"--schema expects canonical=source, got {pair!r}")
        canonical, source = pair.split("=", 1)
        schema[canonical] = source
    return schema


def _decode_params(args, family: str) -> DecodeParams:
    kwargs = {"samples": args.samples, "temperature": args.temperature, "top_p": args.top_p}
    if args.max_tokens is not None:
        kwargs["max_tokens"] = args.max_tokens
    return DecodeParams.for_family(family, **kwargs)


def _add_decode_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--temperature", type=float, default=0.6)
    p.add_argument("--top-p", type=float, default=0.95, dest="top_p")
    p.add_argument("--max-tokens", type=int, default=None, dest="max_tokens")
    p.add_argument("--model", required=True, help="endpoint model name (cache keys embed it)")


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_ingest(args) -> int:
    schema = _schema_pairs(args.schema)
    if args.default_dataset:
        schema["default_dataset"] = args.default_dataset
    corpus = load_corpus(args.input, schema)
    write_corpus(corpus.records, args.output)
    if args.errors:
        write_json(Path(args.errors), corpus.error_report())
    print(f"ingested {len(corpus)} records ({len(corpus.errors)} rejected) -> {args.output}")
    return 0


def cmd_plan(args) -> int:
    corpus = load_corpus(args.corpus)
    if args.condition == CONDITION_MULTI:
        if args.n == 1:
            plan = [
                pack([r], args.family, single_question_prefix=args.single_question_prefix)
                for r in corpus.records
            ]
        else:
            plan = plan_batches(corpus.records, args.n, args.family, args.groups, args.seed)
    else:
        texts = ControlTexts(
            **{
                k: v
                for k, v in {
                    "statement": args.statement_text,
                    "empty_question": args.empty_question_text,
                    "concise_instruction": args.concise_instruction_text,
                }.items()
                if v is not None
            }
        )
        plan = [
            build_control_prompt(r, args.condition, corpus.records, args.seed,
                                 family=args.family, texts=texts)
            for r in corpus.records
        ]
    write_jsonl(Path(args.output), (spec.to_dict() for spec in plan))
    print(f"planned {len(plan)} prompts ({args.condition}) -> {args.output}")
    return 0


def cmd_sample(args) -> int:
    plan = load_plan(args.plan)
    cache = SampleCache(args.cache_dir)
    if args.replay_dir:
        backend = ReplayBackend(args.replay_dir)
    elif args.endpoint:
        backend = HttpCompletionsBackend(args.endpoint, api_key=os.environ.get(args.api_key_env))
    else:
        raise ValidationError("either --endpoint or --replay-dir is required")
    family = plan[0].family if plan else "r1-distill"
    params = _decode_params(args, family)
    sampler = Sampler(backend, cache, args.model)
    manifest = sampler.run_plan(plan, params, budget=args.budget, manifest_path=args.manifest)
    print(
        f"sampled {manifest['requested']} records "
        f"({manifest['cached']} cached, {manifest['issued']} issued, {manifest['errors']} errors)"
    )
    return 0


def cmd_parse(args) -> int:
    from .parser import ParsedTrace, parse_generation
    from .sampler import cache_key

    plan = load_plan(args.plan)
    cache = SampleCache(args.cache_dir)
    counter = parse_counter_arg(args.counter)
    rows = []
    missing = 0
    for spec in plan:
        params = _decode_params(args, spec.family)
        for sample_index in range(params.samples):
            record = cache.get(cache_key(spec, params, sample_index, args.model))
            if record is None:
                missing += 1
                continue
            if record.finish_reason == "error":
                trace = ParsedTrace(spec.prompt_id, sample_index, spec.family,
                                    spec.n_questions, "failed", [], "generation_error")
            else:
                trace = parse_generation(
                    record.raw_text,
                    prompt_id=spec.prompt_id,
                    sample_index=sample_index,
                    n_questions=spec.n_questions,
                    family=spec.family,
                    truncated=record.truncated,
                    counter=counter,
                )
            rows.append(trace.to_dict())
    write_jsonl(Path(args.output), rows)
    print(f"parsed {len(rows)} traces ({missing} cache misses) -> {args.output}")
    return 0


def cmd_verify(args) -> int:
    if args.pred is not None or args.gold is not None:
        if args.pred is None or args.gold is None:
            raise ValidationError("spot check needs both --pred and --gold")
        choices = args.choices.split(",") if args.choices else None
        verdict = verify(args.pred, args.gold, choices)
        print(json.dumps({"correct": verdict.correct, "method": verdict.method,
                          "detail": verdict.detail}))
        return 0

    if not (args.traces and args.corpus and args.plan and args.output):
        raise ValidationError("batch mode needs --traces, --corpus, --plan, and --output")
    plan = load_plan(args.plan)
    corpus = load_corpus(args.corpus)
    traces = load_traces(args.traces)
    by_prompt = questions_by_prompt(plan, corpus)
    rows = []
    for trace in traces:
        questions = by_prompt.get(trace.prompt_id, [])
        for seg in trace.segments:
            if seg.question_index <= len(questions):
                q = questions[seg.question_index - 1]
                verdict = verify(seg.predicted_answer, q.gold_answer, q.choice_labels)
                qid, gold = q.id, q.gold_answer
            else:
                verdict = verify(None, "")
                qid, gold = "", ""
            rows.append({
                "prompt_id": trace.prompt_id,
                "sample_index": trace.sample_index,
                "question_index": seg.question_index,
                "question_id": qid,
                "correct": verdict.correct,
                "method": verdict.method,
                "detail": verdict.detail,
                "predicted": seg.predicted_answer,
                "gold": gold,
            })
    write_jsonl(Path(args.output), rows)
    correct = sum(r["correct"] for r in rows)
    print(f"verified {len(rows)} segments ({correct} correct) -> {args.output}")
    return 0


def cmd_curate(args) -> int:
    plan = load_plan(args.plan)
    corpus = load_corpus(args.corpus)
    traces = load_traces(args.traces)
    verdicts = verdict_lookup(read_jsonl(args.verdicts))
    examples = filter_correct(traces, verdicts, questions_by_prompt(plan, corpus))
    if args.max_per_question:
        examples = cap_per_question(examples, args.max_per_question)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(examples, key=lambda e: (e.question_id, e.position, e.sample_index, e.prompt_id))
    write_jsonl(out_dir / ARTIFACTS["examples"], (e.to_dict() for e in ordered))
    report = emit_sft(examples, args.format, out_dir / ARTIFACTS["sft"], targets=args.targets)
    if args.shortest:
        universe = {qid for spec in plan for qid in spec.question_ids}
        selected, omitted = select_shortest_correct(examples, universe)
        short_report = emit_sft(selected, args.format, out_dir / ARTIFACTS["shortest"],
                                targets=args.targets)
        report["shortest"] = {"examples": short_report["examples"], "omitted_questions": omitted}
    write_json(out_dir / ARTIFACTS["curation_report"], report)
    print(f"curated {report['examples']} examples -> {out_dir / ARTIFACTS['sft']}")
    return 0


def _write_report(payload: dict, out: str | None) -> None:
    if out:
        write_json(Path(out), payload)
        print(f"wrote {out}")
    else:
        print(json.dumps(payload, indent=2, ensure_ascii=False))


def cmd_analyze(args) -> int:
    if args.analysis == "scaling":
        runs = [load_run(d) for d in args.runs]
        by_n: dict[int, dict] = {}
        for run in runs:
            n = run["config"].n_questions
            if n in by_n:
                raise ValidationError(f"two runs share N={n}; pass one run per N")
            by_n[n] = run
        if 1 not in by_n:
            raise ValidationError("scaling needs an N=1 baseline run")
        baseline_lens = per_question_mean_lengths(by_n[1])
        stats_by_n = {
            n: analytics.build_compression_stats(baseline_lens, per_question_mean_lengths(run), n)
            for n, run in by_n.items()
        }
        payload = {
            "by_n": {
                str(n): summary
                for n, summary in analytics.scaling_summary(stats_by_n).items()
            }
        }
        _write_report(payload, args.out)
        return 0

    if args.analysis == "accuracy":
        run = load_run(args.runs[0])
        matrix = verdict_matrix(run)
        report = analytics.accuracy(matrix, args.mode, args.k)
        if args.relative_to:
            base = analytics.accuracy(verdict_matrix(load_run(args.relative_to)), args.mode, args.k)
            acc_by_n = {1: base["aggregate"], run["config"].n_questions: report["aggregate"]}
            report["relative"] = {
                str(n): v for n, v in analytics.relative_accuracy(acc_by_n).items()
            }
        _write_report(report, args.out)
        return 0

    if args.analysis == "efficiency":
        run = load_run(args.runs[0])
        by_prompt = questions_by_prompt(run["plan"], run["corpus"])
        counter = parse_counter_arg(run["config"].counter)
        stats = []
        for trace in run["traces"]:
            questions = by_prompt.get(trace.prompt_id, [])
            for seg in trace.segments:
                if seg.tail_truncated or not seg.reasoning_text.strip():
                    continue
                if seg.question_index > len(questions):
                    continue
                q = questions[seg.question_index - 1]
                stats.append(analytics.efficiency_ratio(
                    seg.reasoning_text, q.gold_answer, counter, q.choice_labels, q.id))
        payload = {
            "count": len(stats),
            "mean_eta": sum(s.eta for s in stats) / len(stats) if stats else None,
            "mean_pre_tokens": sum(s.pre_tokens for s in stats) / len(stats) if stats else None,
            "mean_total_tokens": sum(s.total_tokens for s in stats) / len(stats) if stats else None,
        }
        _write_report(payload, args.out)
        return 0

    if args.analysis == "behavior":
        run = load_run(args.runs[0])
        lexicon = None
        if args.lexicon:
            lexicon = {k: tuple(v) for k, v in json.loads(Path(args.lexicon).read_text()).items()}
        combined = "\n".join(
            seg.reasoning_text for trace in run["traces"] for seg in trace.segments
        )
        profile = analytics.behavior_profile(combined, lexicon)
        _write_report({
            "counts": profile.counts,
            "densities_per_100_words": profile.densities,
            "word_total": profile.word_total,
        }, args.out)
        return 0

    if args.analysis == "difficulty":
        if len(args.runs) != 2:
            raise ValidationError("difficulty compares exactly two runs")
        run_a, run_b = (load_run(d) for d in args.runs)
        strat = pipeline.stratification_from_corpus(run_a["corpus"], args.key)

        def question_stats(run) -> dict[str, tuple[float, float]]:
            lens = per_question_mean_lengths(run)
            matrix = verdict_matrix(run)
            return {
                qid: (lens[qid], sum(matrix.get(qid, [])) / max(len(matrix.get(qid, [])), 1))
                for qid in lens
            }

        table = analytics.difficulty_breakdown(
            question_stats(run_a), question_stats(run_b), strat,
            labels=(args.labels[0], args.labels[1]),
        )
        _write_report({"key": args.key, "levels": table}, args.out)
        return 0

    if args.analysis == "delta":
        def load_metrics(path: str) -> dict[str, tuple[float, float]]:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            benches = data.get("benchmarks", data)
            out = {}
            for name, row in benches.items():
                if isinstance(row, dict):
                    out[name] = (float(row["acc"]), float(row["tok"]))
                else:
                    out[name] = (float(row[0]), float(row[1]))
            return out

        report = analytics.delta_table(
            load_metrics(args.baseline), load_metrics(args.candidate),
            labels=(args.labels[0], args.labels[1]),
        )
        _write_report(report, args.out)
        return 0

    raise ValidationError(f"unknown analysis {args.analysis!r}")


def cmd_run(args) -> int:
    cfg = RunConfig.from_file(args.config)
    manifest = pipeline.run(cfg, args.run_dir)
    print(pipeline.inspect(manifest.run_dir))
    return 0


def cmd_inspect(args) -> int:
    print(pipeline.inspect(args.run_dir, args.query))
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cotpack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load and validate a question corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--errors", default=None, help="write the reject report here")
    p.add_argument("--schema", action="append", default=[], metavar="CANONICAL=SOURCE")
    p.add_argument("--default-dataset", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("plan", help="build multi-question or control prompts")
    p.add_argument("--corpus", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--family", required=True)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--groups", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--condition", default=CONDITION_MULTI,
                   choices=(CONDITION_MULTI,) + CONTROL_CONDITIONS)
    p.add_argument("--single-question-prefix", action="store_true")
    p.add_argument("--statement-text", default=None)
    p.add_argument("--empty-question-text", default=None)
    p.add_argument("--concise-instruction-text", default=None)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("sample", help="execute a plan against an endpoint or replay store")
    p.add_argument("--plan", required=True)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--replay-dir", default=None)
    p.add_argument("--budget", type=int, default=4)
    p.add_argument("--api-key-env", default="OPENAI_API_KEY")
    p.add_argument("--manifest", default=None)
    _add_decode_args(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("parse", help="segment cached generations into per-question traces")
    p.add_argument("--plan", required=True)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--counter", default="whitespace-approx",
                   help="whitespace-approx or external:<vocab-path>")
    _add_decode_args(p)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("verify", help="verify answers (batch over traces, or --pred/--gold spot check)")
    p.add_argument("--pred", default=None)
    p.add_argument("--gold", default=None)
    p.add_argument("--choices", default=None, help="comma-separated option labels")
    p.add_argument("--traces", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--plan", default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("curate", help="filter correct traces and emit the SFT corpus")
    p.add_argument("--traces", required=True)
    p.add_argument("--verdicts", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--format", default="conversational", choices=("conversational", "plain"))
    p.add_argument("--targets", default="think-plus-answer",
                   choices=("think-plus-answer", "think-only"))
    p.add_argument("--max-per-question", type=int, default=None)
    p.add_argument("--shortest", action="store_true",
                   help="also emit the shortest-correct-per-question baseline corpus")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("analyze", help="compute statistics over finished runs")
    p.add_argument("analysis",
                   choices=("scaling", "accuracy", "efficiency", "behavior", "difficulty", "delta"))
    p.add_argument("--runs", nargs="*", default=[], help="run directories (with manifests)")
    p.add_argument("--out", default=None)
    p.add_argument("--mode", default="avg_at_k", choices=("pass_at_1", "avg_at_k"))
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--relative-to", default=None, help="N=1 baseline run for relative accuracy")
    p.add_argument("--lexicon", default=None, help="JSON file of category -> cue list")
    p.add_argument("--key", default="level", choices=("level", "dataset", "subject"))
    p.add_argument("--labels", nargs=2, default=("baseline", "candidate"))
    p.add_argument("--baseline", default=None, help="metric-set JSON file (delta)")
    p.add_argument("--candidate", default=None, help="metric-set JSON file (delta)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("run", help="run the full pipeline over a run directory")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("inspect", help="show stage states and funnel counts")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--query", default="all", choices=("all", "stages", "funnel"))
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
