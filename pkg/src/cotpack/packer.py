"""Multi-question prompt construction, control prompts, and template rendering.

The packed body uses the fixed neutral delimiter layout

    Question 1: <q1>\\n\\nQuestion 2: <q2>\\n\\n...Question N: <qN>

with a bare question body for N=1 (an optional "Question: " prefix is
available for operators who want the labeled single-question framing).
Control prompts cover the prompt-modification conditions (a declarative
statement, an empty question placeholder, a concise instruction) and the
auxiliary-question conditions (a toy arithmetic question or a pool-drawn
question from a difficulty band).
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from importlib import resources

from .families import get_family
from .ingest import QuestionRecord

CONDITION_MULTI = "multi"
AUX_CONDITIONS = ("aux-toy", "aux-easy", "aux-medium", "aux-hard", "aux-random")
TEXT_CONDITIONS = ("statement", "empty-question", "concise-instruction")
CONTROL_CONDITIONS = TEXT_CONDITIONS + AUX_CONDITIONS

# Difficulty bands for pool-drawn auxiliary questions, keyed on the level field.
AUX_LEVEL_BANDS = {"aux-easy": (1, 2), "aux-medium": (3,), "aux-hard": (4, 5)}

TOY_QUESTION = QuestionRecord(
    id="builtin:toy-add", text="1+1=?", gold_answer="2", dataset="builtin"
)
BUILTIN_QUESTIONS = {TOY_QUESTION.id: TOY_QUESTION}


class PackError(ValueError):
    pass


class DuplicateQuestionError(PackError):
    pass


class EmptyAuxPoolError(PackError):
    pass


@dataclass(frozen=True)
class ControlTexts:
    """Config-supplied wording for the prompt-modification conditions."""

    statement: str = "Note: this is one of several tasks in this session."
    empty_question: str = "Question 2:"
    concise_instruction: str = "Please keep your reasoning concise."

    def for_condition(self, condition: str) -> str:
        return {
            "statement": self.statement,
            "empty-question": self.empty_question,
            "concise-instruction": self.concise_instruction,
        }[condition]


@dataclass(frozen=True)
class PromptSpec:
    """One fully rendered prompt.

    ``question_ids`` are the ordered per-position ids (builtin aux questions
    use "builtin:" ids); ``n_questions`` is the segmentation N downstream
    parsing uses; ``target_position`` is the 1-based position of the question
    under measurement, 0 when every position is measured.
    """

    prompt_id: str
    question_ids: tuple[str, ...]
    condition: str
    family: str
    body: str
    rendered: str
    target_position: int
    n_questions: int

    def to_dict(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "question_ids": list(self.question_ids),
            "condition": self.condition,
            "family": self.family,
            "body": self.body,
            "rendered": self.rendered,
            "target_position": self.target_position,
            "n_questions": self.n_questions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSpec":
        return cls(
            prompt_id=d["prompt_id"],
            question_ids=tuple(d["question_ids"]),
            condition=d["condition"],
            family=d["family"],
            body=d["body"],
            rendered=d["rendered"],
            target_position=d["target_position"],
            n_questions=d["n_questions"],
        )


_TEMPLATE_CACHE: dict[str, str] = {}


def _load_template(family: str) -> str:
    fam = get_family(family)
    if fam.template_file is None:
        raise PackError(f"family {fam.name!r} has no shipped prompt template")
    if fam.name not in _TEMPLATE_CACHE:
        ref = resources.files("cotpack").joinpath("templates", fam.template_file)
        _TEMPLATE_CACHE[fam.name] = ref.read_text(encoding="utf-8")
    return _TEMPLATE_CACHE[fam.name]


def render_body(body: str, family: str) -> str:
    """Render a user body through the family template, byte-exact."""
    return _load_template(family).replace("{input}", body)


def render_template(spec: PromptSpec) -> str:
    return render_body(spec.body, spec.family)


def _prompt_id(condition: str, family: str, n: int, target: int, ids: tuple[str, ...], body: str) -> str:
    payload = "\x1f".join([condition, family, str(n), str(target), *ids, body])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:32]


def _spec(condition: str, family: str, ids: tuple[str, ...], body: str, target: int, n: int) -> PromptSpec:
    return PromptSpec(
        prompt_id=_prompt_id(condition, family, n, target, ids, body),
        question_ids=ids,
        condition=condition,
        family=family,
        body=body,
        rendered=render_body(body, family),
        target_position=target,
        n_questions=n,
    )


def numbered_body(texts: list[str]) -> str:
    return "\n\n".join(f"Question {i}: {t}" for i, t in enumerate(texts, start=1))


def pack(questions: list[QuestionRecord], family: str, *, single_question_prefix: bool = False) -> PromptSpec:
    """Pack questions into one multi-question prompt."""
    if not questions:
        raise PackError("cannot pack an empty question list")
    ids = tuple(q.id for q in questions)
    seen: set[str] = set()
    for qid in ids:
        if qid in seen:
            raise DuplicateQuestionError(f"duplicate question id {qid!r}")
        seen.add(qid)
    n = len(questions)
    if n == 1:
        body = f"Question: {questions[0].text}" if single_question_prefix else questions[0].text
        return _spec(CONDITION_MULTI, family, ids, body, target=1, n=1)
    body = numbered_body([q.text for q in questions])
    return _spec(CONDITION_MULTI, family, ids, body, target=0, n=n)


def _derive_rng(seed: int, *parts: object) -> random.Random:
    token = "|".join([str(seed), *map(str, parts)])
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def build_control_prompt(
    target: QuestionRecord,
    condition: str,
    aux_pool=None,
    rng_seed: int = 0,
    *,
    family: str,
    texts: ControlTexts | None = None,
) -> PromptSpec:
    """Build one control-condition prompt around the target question.

    Text conditions append configured wording after the bare target; aux
    conditions place the target as Question 1 and a second question behind
    it (the builtin toy question, or a pool draw from the requested
    difficulty band, seeded deterministically per target).
    """
    texts = texts or ControlTexts()
    if condition in TEXT_CONDITIONS:
        body = f"{target.text}\n\n{texts.for_condition(condition)}"
        return _spec(condition, family, (target.id,), body, target=1, n=1)

    if condition == "aux-toy":
        aux = TOY_QUESTION
    elif condition in AUX_CONDITIONS:
        pool = [q for q in (aux_pool or []) if q.id != target.id]
        band = AUX_LEVEL_BANDS.get(condition)
        if band is not None:
            pool = [q for q in pool if q.level in band]
        if not pool:
            raise EmptyAuxPoolError(f"no auxiliary questions available for {condition}")
        aux = _derive_rng(rng_seed, condition, target.id).choice(pool)
    else:
        raise PackError(f"unknown condition {condition!r}")

    if aux.id == target.id:
        raise DuplicateQuestionError(f"auxiliary question duplicates target {target.id!r}")
    body = numbered_body([target.text, aux.text])
    return _spec(condition, family, (target.id, aux.id), body, target=1, n=2)


def plan_batches(corpus, n: int, family: str, groups: int, rng_seed: int) -> list[PromptSpec]:
    """Plan ``groups`` multi-question prompts by uniform sampling without
    replacement within each group.

    The plan is a pure function of (corpus order, n, groups, seed): each
    group draws from its own seed-derived generator, so planning could be
    parallelized per group without changing the output.
    """
    records = list(corpus)
    if n < 1:
        raise PackError("n must be >= 1")
    if groups < 1:
        raise PackError("groups must be >= 1")
    if len(records) < n:
        raise PackError(f"corpus of {len(records)} questions cannot fill groups of {n}")
    plan = []
    for g in range(groups):
        rng = _derive_rng(rng_seed, "group", g)
        chosen = rng.sample(range(len(records)), n)
        plan.append(pack([records[i] for i in chosen], family))
    return plan
