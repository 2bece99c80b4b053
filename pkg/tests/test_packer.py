"""Packer: body layout, control conditions, template rendering, planning."""

from __future__ import annotations

import random
import re
from pathlib import Path

import pytest

from cotpack.ingest import QuestionRecord
from cotpack.packer import (
    DuplicateQuestionError,
    EmptyAuxPoolError,
    PackError,
    build_control_prompt,
    pack,
    plan_batches,
    render_body,
    render_template,
)

GOLDEN = Path(__file__).parent / "golden"


def q(qid: str, text: str, level: int | None = None) -> QuestionRecord:
    return QuestionRecord(id=qid, text=text, gold_answer="1", level=level)


class TestPack:
    def test_two_question_body(self):
        spec = pack([q("a", "1+1=?"), q("b", "1*1=?")], "r1-distill")
        assert spec.body == "Question 1: 1+1=?\n\nQuestion 2: 1*1=?"
        assert spec.n_questions == 2

    def test_single_question_bare_body(self):
        text = "How many positive whole-number divisors does 196 have?"
        spec = pack([q("a", text)], "r1-distill")
        assert spec.body == text

    def test_single_question_prefix_flag(self):
        spec = pack([q("a", "1+1=?")], "r1-distill", single_question_prefix=True)
        assert spec.body == "Question: 1+1=?"

    def test_three_markers(self):
        spec = pack([q("a", "x"), q("b", "y"), q("c", "z")], "qwen3")
        assert len(re.findall(r"Question \d:", spec.body)) == 3

    def test_marker_order_invariant(self):
        rng = random.Random(5)
        for _ in range(50):
            n = rng.randint(2, 8)
            spec = pack([q(f"q{i}", f"text {i}") for i in range(n)], "qwen3")
            markers = re.findall(r"Question (\d+):", spec.body)
            assert markers == [str(i) for i in range(1, n + 1)]
            for i in range(1, n + 1):
                assert spec.body.count(f"Question {i}:") == 1

    def test_duplicate_id_rejected(self):
        with pytest.raises(DuplicateQuestionError, match="'a'"):
            pack([q("a", "x"), q("a", "y")], "qwen3")

    def test_empty_list_rejected(self):
        with pytest.raises(PackError):
            pack([], "qwen3")

    def test_prompt_id_deterministic(self):
        a = pack([q("a", "x"), q("b", "y")], "qwen3")
        b = pack([q("a", "x"), q("b", "y")], "qwen3")
        assert a.prompt_id == b.prompt_id
        assert a == b

    def test_prompt_id_distinguishes_structure(self):
        base = pack([q("a", "x"), q("b", "y")], "qwen3")
        assert pack([q("b", "y"), q("a", "x")], "qwen3").prompt_id != base.prompt_id
        assert pack([q("a", "x"), q("b", "y")], "r1-distill").prompt_id != base.prompt_id


class TestControlPrompts:
    def test_aux_toy(self):
        spec = build_control_prompt(q("t", "How many primes below 10?"), "aux-toy", family="qwen3")
        assert spec.body == "Question 1: How many primes below 10?\n\nQuestion 2: 1+1=?"
        assert spec.target_position == 1
        assert spec.n_questions == 2

    @pytest.mark.parametrize(
        "condition,golden",
        [
            ("statement", "control_statement_body.txt"),
            ("empty-question", "control_empty_question_body.txt"),
            ("concise-instruction", "control_concise_body.txt"),
        ],
    )
    def test_text_condition_golden_bodies(self, condition, golden):
        spec = build_control_prompt(q("t", "1*1=?"), condition, family="qwen3")
        expected = (GOLDEN / golden).read_text(encoding="utf-8")
        assert spec.body == expected
        assert spec.n_questions == 1

    def test_aux_band_filtering(self):
        pool = [q("e1", "easy", 1), q("e2", "easy", 2), q("m", "medium", 3), q("h", "hard", 5)]
        spec = build_control_prompt(q("t", "target"), "aux-hard", pool, 0, family="qwen3")
        assert spec.question_ids == ("t", "h")
        spec = build_control_prompt(q("t", "target"), "aux-medium", pool, 0, family="qwen3")
        assert spec.question_ids == ("t", "m")
        easy = build_control_prompt(q("t", "target"), "aux-easy", pool, 0, family="qwen3")
        assert easy.question_ids[1] in ("e1", "e2")

    def test_aux_random_deterministic_under_seed(self):
        pool = [q(f"p{i}", f"text {i}", 1 + i % 5) for i in range(20)]
        a = build_control_prompt(q("t", "target"), "aux-random", pool, 42, family="qwen3")
        b = build_control_prompt(q("t", "target"), "aux-random", pool, 42, family="qwen3")
        assert a == b
        c = build_control_prompt(q("t", "target"), "aux-random", pool, 43, family="qwen3")
        assert a.prompt_id != c.prompt_id or a.question_ids == c.question_ids

    def test_aux_pool_excludes_target(self):
        pool = [q("t", "same", 3)]
        with pytest.raises(EmptyAuxPoolError):
            build_control_prompt(q("t", "same", 3), "aux-medium", pool, 0, family="qwen3")

    def test_empty_band_raises(self):
        pool = [q("e", "easy", 1)]
        with pytest.raises(EmptyAuxPoolError):
            build_control_prompt(q("t", "target"), "aux-hard", pool, 0, family="qwen3")

    def test_unknown_condition(self):
        with pytest.raises(PackError):
            build_control_prompt(q("t", "x"), "mystery", family="qwen3")


class TestRenderTemplate:
    BODY = "How many positive whole-number divisors does 196 have?"

    def test_qwen3_golden_bytes(self):
        rendered = render_body(self.BODY, "qwen3")
        assert rendered == (GOLDEN / "qwen3_rendered.txt").read_text(encoding="utf-8")
        assert rendered.startswith("<|im_start|>system\n")
        assert "\\boxed{}" in rendered

    def test_r1_distill_golden_bytes(self):
        rendered = render_body(self.BODY, "r1-distill")
        assert rendered == (GOLDEN / "r1_distill_rendered.txt").read_text(encoding="utf-8")
        assert f"<|User|>{self.BODY}" in rendered

    def test_unknown_family_errors(self):
        with pytest.raises(ValueError):
            render_body("x", "gpt-unknown")

    def test_parse_only_family_has_no_template(self):
        with pytest.raises(PackError):
            render_body("x", "seed-oss")

    def test_render_template_matches_spec_field(self):
        spec = pack([q("a", "x"), q("b", "y")], "qwen3")
        assert render_template(spec) == spec.rendered

    def test_injective_on_distinct_bodies(self):
        rng = random.Random(9)
        seen = {}
        for i in range(200):
            body = f"body {rng.randint(0, 10**9)} #{i}"
            rendered = render_body(body, "qwen3")
            assert rendered not in seen or seen[rendered] == body
            seen[rendered] = body


class TestPlanBatches:
    CORPUS = [q(f"q{i}", f"question {i}") for i in range(10)]

    def test_forced_membership(self):
        corpus = self.CORPUS[:3]
        plan = plan_batches(corpus, 3, "qwen3", 1, 11)
        assert sorted(plan[0].question_ids) == ["q0", "q1", "q2"]

    def test_deterministic(self):
        a = plan_batches(self.CORPUS, 3, "qwen3", 50, 7)
        b = plan_batches(self.CORPUS, 3, "qwen3", 50, 7)
        assert [s.prompt_id for s in a] == [s.prompt_id for s in b]

    def test_no_duplicates_within_group(self):
        for spec in plan_batches(self.CORPUS, 4, "qwen3", 100, 3):
            assert len(set(spec.question_ids)) == 4

    def test_corpus_too_small(self):
        with pytest.raises(PackError):
            plan_batches(self.CORPUS[:2], 3, "qwen3", 1, 0)

    def test_position_frequencies_near_uniform(self):
        # 1000 groups of N=3 over 100 questions: every (question, position)
        # count stays within 3 sigma of the binomial mean (seed-pinned)
        corpus = [q(f"q{i}", f"text {i}") for i in range(100)]
        plan = plan_batches(corpus, 3, "qwen3", 1000, 1)
        counts = {(qid, pos): 0 for qid in (r.id for r in corpus) for pos in range(3)}
        for spec in plan:
            for pos, qid in enumerate(spec.question_ids):
                counts[(qid, pos)] += 1
        mean = 1000 / 100
        sigma = (1000 * 0.01 * 0.99) ** 0.5
        for key, count in counts.items():
            assert abs(count - mean) <= 3 * sigma, (key, count)
