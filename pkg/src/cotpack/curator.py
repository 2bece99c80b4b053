"""Rejection filtering and SFT corpus emission.

Keeps exactly the parsed segments whose predicted answer verified correct,
drops tail-truncated segments (the final segment of a length-capped
generation is cut mid-stream; earlier segments of the same sample are
structurally complete and stay eligible), and emits one single-question
training example per surviving segment. All positions are retained and no
position-specific weighting is applied: output order is a plain sort over
(question_id, position, sample_index, prompt_id).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .families import get_family
from .ingest import QuestionRecord
from .parser import ParsedTrace

SFT_FORMATS = ("conversational", "plain")
TARGET_MODES = ("think-plus-answer", "think-only")


class MissingVerdictError(KeyError):
    pass


@dataclass(frozen=True)
class CuratedExample:
    """One verified-correct compressed trajectory ready for SFT emission."""

    question_id: str
    question_text: str
    reasoning_text: str
    gold_answer: str
    n_questions: int
    position: int
    sample_index: int
    reasoning_tokens: int
    prompt_id: str
    family: str

    @property
    def provenance_key(self) -> tuple:
        return (self.question_id, self.n_questions, self.position, self.sample_index, self.prompt_id)

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "question_text": self.question_text,
            "reasoning_text": self.reasoning_text,
            "gold_answer": self.gold_answer,
            "n_questions": self.n_questions,
            "position": self.position,
            "sample_index": self.sample_index,
            "reasoning_tokens": self.reasoning_tokens,
            "prompt_id": self.prompt_id,
            "family": self.family,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CuratedExample":
        return cls(**d)


def filter_correct(
    traces: Iterable[ParsedTrace],
    verdicts: Mapping[tuple[str, int, int], bool],
    questions_by_prompt: Mapping[str, Sequence[QuestionRecord]],
) -> list[CuratedExample]:
    """Keep segments with correct verdicts, excluding tail-truncated ones.

    ``verdicts`` maps (prompt_id, sample_index, question_index) to
    correctness and must cover every parsed segment; a missing verdict is a
    hard error naming the segment.
    """
    out: list[CuratedExample] = []
    for trace in traces:
        questions = questions_by_prompt.get(trace.prompt_id)
        for seg in trace.segments:
            key = (trace.prompt_id, trace.sample_index, seg.question_index)
            if key not in verdicts:
                raise MissingVerdictError(
                    f"no verdict for prompt {trace.prompt_id} sample {trace.sample_index} "
                    f"question {seg.question_index}"
                )
            if seg.tail_truncated or not verdicts[key]:
                continue
            reasoning = seg.reasoning_text.strip()
            if not reasoning:
                continue
            if questions is None or seg.question_index > len(questions):
                continue
            question = questions[seg.question_index - 1]
            out.append(
                CuratedExample(
                    question_id=question.id,
                    question_text=question.text,
                    reasoning_text=reasoning,
                    gold_answer=question.gold_answer,
                    n_questions=trace.n_questions,
                    position=seg.question_index,
                    sample_index=trace.sample_index,
                    reasoning_tokens=seg.reasoning_tokens,
                    prompt_id=trace.prompt_id,
                    family=trace.family,
                )
            )
    return out


def cap_per_question(examples: list[CuratedExample], max_per_question: int) -> list[CuratedExample]:
    """Optional corpus-size control: keep at most k examples per question,
    shortest reasoning first (deterministic tiebreak on provenance)."""
    if max_per_question < 1:
        raise ValueError("max_per_question must be >= 1")
    by_question: dict[str, list[CuratedExample]] = {}
    for ex in examples:
        by_question.setdefault(ex.question_id, []).append(ex)
    kept = []
    for group in by_question.values():
        group.sort(key=lambda e: (e.reasoning_tokens,) + e.provenance_key)
        kept.extend(group[:max_per_question])
    return kept


def select_shortest_correct(
    examples: list[CuratedExample],
    question_ids: Iterable[str],
) -> tuple[list[CuratedExample], list[str]]:
    """Baseline corpus builder: one example per question, minimizing
    reasoning tokens with ties broken by lowest sample_index.

    Returns (selected, omitted_question_ids); a question is omitted when it
    has no correct sample at all.
    """
    by_question: dict[str, CuratedExample] = {}
    for ex in examples:
        best = by_question.get(ex.question_id)
        if best is None or (ex.reasoning_tokens, ex.sample_index, ex.prompt_id, ex.position) < (
            best.reasoning_tokens, best.sample_index, best.prompt_id, best.position
        ):
            by_question[ex.question_id] = ex
    omitted = sorted(set(question_ids) - set(by_question))
    selected = [by_question[qid] for qid in sorted(by_question)]
    return selected, omitted


def assistant_content(example: CuratedExample, targets: str = "think-plus-answer") -> str:
    """Assemble the training target: the think span, plus the boxed final
    answer line unless targets=think-only."""
    fam = get_family(example.family)
    content = f"{fam.think_open}\n{example.reasoning_text}\n{fam.think_close}"
    if targets == "think-plus-answer":
        content += f"\n\\boxed{{{example.gold_answer}}}"
    return content


def _histogram(values: list[int]) -> dict:
    counts, edges = np.histogram(values, bins=10)
    return {"bin_edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def emit_sft(
    examples: list[CuratedExample],
    format: str,
    path: str | Path,
    *,
    targets: str = "think-plus-answer",
) -> dict:
    """Write the curated corpus as trainer-ready JSONL and return the report.

    Deduplicates on the full provenance key and sorts deterministically, so
    identical inputs always produce byte-identical files.
    """
    if not examples:
        raise ValueError("empty example list")
    if format not in SFT_FORMATS:
        raise ValueError(f"unknown format {format!r} (use one of {SFT_FORMATS})")
    if targets not in TARGET_MODES:
        raise ValueError(f"unknown targets {targets!r} (use one of {TARGET_MODES})")

    unique: dict[tuple, CuratedExample] = {}
    duplicates = 0
    for ex in examples:
        if ex.provenance_key in unique:
            duplicates += 1
        else:
            unique[ex.provenance_key] = ex
    ordered = sorted(
        unique.values(),
        key=lambda e: (e.question_id, e.position, e.sample_index, e.prompt_id),
    )

    per_position: dict[str, int] = {}
    token_counts: list[int] = []
    with open(path, "w", encoding="utf-8") as fh:
        for ex in ordered:
            content = assistant_content(ex, targets)
            if format == "conversational":
                line = {
                    "messages": [
                        {"role": "system", "content": get_family(ex.family).system_instruction},
                        {"role": "user", "content": ex.question_text},
                        {"role": "assistant", "content": content},
                    ]
                }
            else:
                line = {"prompt": ex.question_text, "completion": content}
            fh.write(json.dumps(line, ensure_ascii=False) + "\n")
            per_position[str(ex.position)] = per_position.get(str(ex.position), 0) + 1
            token_counts.append(ex.reasoning_tokens)

    return {
        "examples": len(ordered),
        "skipped_duplicates": duplicates,
        "per_position": dict(sorted(per_position.items())),
        "token_histogram": _histogram(token_counts),
        "format": format,
        "targets": targets,
    }
