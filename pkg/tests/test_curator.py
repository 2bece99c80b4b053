"""Curator: rejection filtering, SFT emission, shortest-correct baseline."""

from __future__ import annotations

import json

import pytest

from cotpack.curator import (
    CuratedExample,
    MissingVerdictError,
    assistant_content,
    cap_per_question,
    emit_sft,
    filter_correct,
    select_shortest_correct,
)
from cotpack.ingest import QuestionRecord
from cotpack.parser import ParsedTrace, TraceSegment, extract_think, segment, extract_predicted_answer
from cotpack.verifier import verify

QUESTIONS = [
    QuestionRecord(id="qa", text="1+1=?", gold_answer="2"),
    QuestionRecord(id="qb", text="1*1=?", gold_answer="1"),
    QuestionRecord(id="qc", text="2+3=?", gold_answer="5"),
]
BY_PROMPT = {"p1": QUESTIONS}


def seg(i, text="some reasoning", tokens=10, tail=False, truncated=False):
    return TraceSegment(
        question_index=i, reasoning_text=text, response_text="", predicted_answer="x",
        reasoning_tokens=tokens, from_truncated=truncated, tail_truncated=tail,
    )


def trace(segments, sample_index=0, status="complete", n=3, prompt_id="p1"):
    return ParsedTrace(prompt_id, sample_index, "r1-distill", n, status, segments)


class TestFilterCorrect:
    def test_keeps_only_correct_positions(self):
        t = trace([seg(1), seg(2), seg(3)])
        verdicts = {("p1", 0, 1): True, ("p1", 0, 2): False, ("p1", 0, 3): True}
        examples = filter_correct([t], verdicts, BY_PROMPT)
        assert [e.position for e in examples] == [1, 3]
        assert examples[0].question_id == "qa"
        assert examples[1].gold_answer == "5"

    def test_all_incorrect_gives_nothing(self):
        t = trace([seg(1), seg(2)], n=2)
        verdicts = {("p1", 0, 1): False, ("p1", 0, 2): False}
        assert filter_correct([t], verdicts, BY_PROMPT) == []

    def test_tail_truncated_excluded_even_if_correct(self):
        t = trace([seg(1, truncated=True), seg(2, truncated=True, tail=True)], n=2)
        verdicts = {("p1", 0, 1): True, ("p1", 0, 2): True}
        examples = filter_correct([t], verdicts, BY_PROMPT)
        assert [e.position for e in examples] == [1]

    def test_missing_verdict_is_hard_error(self):
        t = trace([seg(1), seg(2)], n=2)
        with pytest.raises(MissingVerdictError, match="question 2"):
            filter_correct([t], {("p1", 0, 1): True}, BY_PROMPT)

    def test_partial_parse_contributes_its_segments(self):
        t = trace([seg(2)], status="partial")
        examples = filter_correct([t], {("p1", 0, 2): True}, BY_PROMPT)
        assert [e.question_id for e in examples] == ["qb"]

    def test_provenance_recorded(self):
        t = trace([seg(3, tokens=42)], sample_index=5)
        ex = filter_correct([t], {("p1", 5, 3): True}, BY_PROMPT)[0]
        assert (ex.prompt_id, ex.sample_index, ex.position, ex.n_questions) == ("p1", 5, 3, 3)
        assert ex.reasoning_tokens == 42


def example(qid="qa", position=1, sample_index=0, tokens=10, prompt_id="p1",
            reasoning="Multiplying 1 by itself also gives me 1.", gold="1",
            text="1*1=?"):
    return CuratedExample(
        question_id=qid, question_text=text, reasoning_text=reasoning,
        gold_answer=gold, n_questions=3, position=position, sample_index=sample_index,
        reasoning_tokens=tokens, prompt_id=prompt_id, family="r1-distill",
    )


class TestEmitSft:
    def test_conversational_line(self, tmp_path):
        out = tmp_path / "sft.jsonl"
        report = emit_sft([example()], "conversational", out)
        lines = out.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 1 and report["examples"] == 1
        msg = json.loads(lines[0])["messages"]
        assert [m["role"] for m in msg] == ["system", "user", "assistant"]
        assert msg[1]["content"] == "1*1=?"
        assert "<think>" in msg[2]["content"]
        assert "\\boxed{1}" in msg[2]["content"]

    def test_plain_completion_starts_with_think(self, tmp_path):
        out = tmp_path / "sft.jsonl"
        emit_sft([example()], "plain", out)
        row = json.loads(out.read_text(encoding="utf-8"))
        assert row["prompt"] == "1*1=?"
        assert row["completion"].startswith("<think>")

    def test_think_only_targets(self, tmp_path):
        out = tmp_path / "sft.jsonl"
        emit_sft([example()], "plain", out, targets="think-only")
        row = json.loads(out.read_text(encoding="utf-8"))
        assert "\\boxed" not in row["completion"]
        assert row["completion"].endswith("</think>")

    def test_duplicate_provenance_dedupes(self, tmp_path):
        out = tmp_path / "sft.jsonl"
        report = emit_sft([example(), example()], "conversational", out)
        assert report["examples"] == 1
        assert report["skipped_duplicates"] == 1
        assert len(out.read_text(encoding="utf-8").splitlines()) == 1

    def test_empty_list_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_sft([], "plain", tmp_path / "x.jsonl")

    def test_deterministic_bytes(self, tmp_path):
        examples = [example(qid=f"q{i % 3}", sample_index=i, tokens=10 + i) for i in range(12)]
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        emit_sft(list(reversed(examples)), "conversational", a)
        emit_sft(examples, "conversational", b)
        assert a.read_bytes() == b.read_bytes()

    def test_report_counts(self, tmp_path):
        examples = [example(position=p, sample_index=s) for p in (1, 2) for s in range(3)]
        report = emit_sft(examples, "plain", tmp_path / "s.jsonl")
        assert report["per_position"] == {"1": 3, "2": 3}
        assert sum(report["token_histogram"]["counts"]) == 6

    def test_seed_oss_family_tags(self, tmp_path):
        ex = CuratedExample(
            question_id="q", question_text="t", reasoning_text="r", gold_answer="1",
            n_questions=2, position=1, sample_index=0, reasoning_tokens=1,
            prompt_id="p", family="seed-oss",
        )
        emit_sft([ex], "plain", tmp_path / "s.jsonl")
        row = json.loads((tmp_path / "s.jsonl").read_text(encoding="utf-8"))
        assert row["completion"].startswith("<seed:think>")

    def test_closed_loop_reverification(self, tmp_path):
        examples = [
            example(),
            example(qid="qc", position=2, text="2+3=?",
                    reasoning="Adding gives \\boxed{5} quickly.", gold="5"),
        ]
        out = tmp_path / "sft.jsonl"
        emit_sft(examples, "plain", out)
        golds = {ex.question_text: ex.gold_answer for ex in examples}
        for line in out.read_text(encoding="utf-8").splitlines():
            row = json.loads(line)
            think, post = extract_think(row["completion"], "r1-distill")
            segs = segment(think, 1, "r1-distill")
            predicted = extract_predicted_answer(segs[0].text, post)
            assert verify(predicted, golds[row["prompt"]]).correct


class TestSelection:
    def test_shortest_correct_with_tie(self):
        examples = [
            example(sample_index=0, tokens=120),
            example(sample_index=1, tokens=95),
            example(sample_index=2, tokens=95),
            example(sample_index=3, tokens=200),
        ]
        selected, omitted = select_shortest_correct(examples, ["qa"])
        assert len(selected) == 1
        assert (selected[0].reasoning_tokens, selected[0].sample_index) == (95, 1)
        assert omitted == []

    def test_question_without_correct_sample_reported(self):
        selected, omitted = select_shortest_correct([example()], ["qa", "qzz"])
        assert [e.question_id for e in selected] == ["qa"]
        assert omitted == ["qzz"]

    def test_singleton(self):
        selected, _ = select_shortest_correct([example(tokens=7)], ["qa"])
        assert selected[0].reasoning_tokens == 7

    def test_output_bounded_by_question_count(self):
        examples = [example(sample_index=i, tokens=i) for i in range(8)]
        selected, _ = select_shortest_correct(examples, ["qa"])
        assert len(selected) == 1

    def test_cap_per_question(self):
        examples = [example(sample_index=i, tokens=100 - i) for i in range(6)]
        kept = cap_per_question(examples, 2)
        assert len(kept) == 2
        assert sorted(e.reasoning_tokens for e in kept) == [95, 96]


def test_assistant_content_layout():
    content = assistant_content(example())
    assert content.startswith("<think>\n")
    assert content.endswith("</think>\n\\boxed{1}")
