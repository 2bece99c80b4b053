"""Reasoning-span extraction and per-question segmentation of raw generations.

A multi-question generation is sliced in three steps:

1. ``extract_think`` pulls the reasoning span out of the family's tag pair
   (``<think>``, ``<seed:think>``; ``<response>`` blocks for ernie-style
   output) and returns the remainder as the post text.
2. ``segment`` cuts the reasoning span into per-question blocks. Boundary
   cues are consumed in priority order: explicit question references
   ("Question 2", "the second question") at line or paragraph starts,
   family separator lines ("---"), then family discourse openers ("Okay",
   "Hmm", "Alright") which are used only when fewer than N primary anchors
   were found. The text start acts as an implicit boundary, so a preamble
   without its own cue merges into the first segment (or becomes the
   earliest missing question when the first explicit anchor is later).
3. ``extract_predicted_answer`` takes the last balanced \\boxed payload
   from the question's response region, falling back to boxes inside the
   reasoning block and finally to a trailing answer phrase
   ("the answer is X", "the result is X", "gives me X", "equals X").

Everything here is pure string scanning: no state, safe to parallelize.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .families import FamilySpec, get_family


class ThinkExtractionError(ValueError):
    """Reasoning span could not be isolated from the raw generation."""

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


# ---------------------------------------------------------------------------
# token counting


@dataclass
class TokenCounter:
    """Deterministic token counting rule.

    whitespace-approx counts maximal runs of word characters plus each
    standalone punctuation or symbol glyph. external-vocabulary applies a
    user-supplied greedy longest-match vocabulary (one token per line);
    characters not covered by the vocabulary count one token each.
    """

    kind: str = "whitespace-approx"
    vocabulary_ref: str | None = None
    _vocab: set[str] | None = field(default=None, repr=False, compare=False)
    _max_len: int = field(default=0, repr=False, compare=False)

    def _load_vocab(self) -> None:
        if self._vocab is not None:
            return
        if not self.vocabulary_ref:
            raise ValueError("external-vocabulary counter requires vocabulary_ref")
        path = Path(self.vocabulary_ref)
        if not path.exists():
            raise FileNotFoundError(f"vocabulary file not found: {path}")
        entries = {line.rstrip("\n") for line in path.read_text(encoding="utf-8").splitlines()}
        entries.discard("")
        self._vocab = entries
        self._max_len = max((len(e) for e in entries), default=0)


WHITESPACE_APPROX = TokenCounter()

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

# Vectorized equivalent of len(_TOKEN_RE.findall(text)) for latin-1-encodable
# text: word-run starts plus non-word non-space glyphs. Tables are derived
# from the regex classes themselves so both paths agree exactly.
_WORD_TABLE = np.zeros(256, dtype=bool)
_SPACE_TABLE = np.zeros(256, dtype=bool)
for _i in range(256):
    if re.fullmatch(r"\w", chr(_i)):
        _WORD_TABLE[_i] = True
    elif re.fullmatch(r"\s", chr(_i)):
        _SPACE_TABLE[_i] = True


def _count_whitespace_approx(text: str) -> int:
    if not text:
        return 0
    try:
        buf = text.encode("latin-1")
    except UnicodeEncodeError:
        return len(_TOKEN_RE.findall(text))
    codes = np.frombuffer(buf, dtype=np.uint8)
    word = _WORD_TABLE[codes]
    runs = int(word[0]) + int(np.count_nonzero(word[1:] & ~word[:-1]))
    punct = int(np.count_nonzero(~word & ~_SPACE_TABLE[codes]))
    return runs + punct


def token_count(text: str, counter: TokenCounter = WHITESPACE_APPROX) -> int:
    if counter.kind == "whitespace-approx":
        return _count_whitespace_approx(text)
    if counter.kind != "external-vocabulary":
        raise ValueError(f"unknown counter kind {counter.kind!r}")
    counter._load_vocab()
    vocab, max_len = counter._vocab, counter._max_len
    count = 0
    pos, n = 0, len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        matched = 0
        for length in range(min(max_len, n - pos), 0, -1):
            if text[pos : pos + length] in vocab:
                matched = length
                break
        count += 1
        pos += matched if matched else 1
    return count


def parse_counter_arg(arg: str) -> TokenCounter:
    """Parse the CLI form: 'whitespace-approx' or 'external:<vocab-path>'."""
    if arg == "whitespace-approx":
        return TokenCounter()
    if arg.startswith("external:"):
        return TokenCounter(kind="external-vocabulary", vocabulary_ref=arg.split(":", 1)[1])
    raise ValueError(f"unknown counter {arg!r}")


# ---------------------------------------------------------------------------
# think-span extraction


def extract_think(raw_text: str, family: str | FamilySpec, *, allow_unterminated: bool = False) -> tuple[str, str]:
    """Split a raw generation into (think_text, post_text).

    ``allow_unterminated`` is set for truncated (finish_reason=length)
    generations, where the close tag may never arrive; the open span then
    runs to end of text and post_text is empty.
    """
    fam = get_family(family) if isinstance(family, str) else family
    open_tag, close_tag = fam.think_open, fam.think_close

    start = raw_text.find(open_tag)
    if start >= 0:
        body_start = start + len(open_tag)
        end = raw_text.find(close_tag, body_start)
        if end < 0:
            if allow_unterminated:
                return raw_text[body_start:], ""
            raise ThinkExtractionError("unterminated_think", f"missing {close_tag} in generation")
        think = raw_text[body_start:end]
        post = raw_text[end + len(close_tag) :]
    elif fam.allow_unopened_think:
        # Prompt pre-opened the reasoning span: accept a leading unopened
        # span terminated by the close tag.
        end = raw_text.find(close_tag)
        if end < 0:
            if allow_unterminated:
                return raw_text, ""
            raise ThinkExtractionError("unterminated_think", f"no {close_tag} found")
        think = raw_text[:end]
        post = raw_text[end + len(close_tag) :]
    else:
        raise ThinkExtractionError("unterminated_think", f"no {open_tag} span found")

    if fam.response_open and fam.response_close:
        r_start = post.find(fam.response_open)
        if r_start >= 0:
            r_body = r_start + len(fam.response_open)
            r_end = post.find(fam.response_close, r_body)
            post = post[r_body:r_end] if r_end >= 0 else post[r_body:]
    return think, post


# ---------------------------------------------------------------------------
# segmentation

_ORDINALS = {
    "first": 1, "second": 2, "third": 3, "fourth": 4, "fifth": 5,
    "sixth": 6, "seventh": 7, "eighth": 8, "ninth": 9, "tenth": 10,
}

_LINE_ANCHOR_RE = re.compile(r"(?m)^[ \t>*#]*question\s*#?(\d+)\b", re.IGNORECASE)
_REF_NUMERAL_RE = re.compile(r"\bquestion\s*#?(\d+)\b", re.IGNORECASE)
_REF_ORDINAL_RE = re.compile(
    r"\b(first|second|third|fourth|fifth|sixth|seventh|eighth|ninth|tenth)\s+question\b",
    re.IGNORECASE,
)
_PARA_BREAK_RE = re.compile(r"\n[ \t]*\n+")
_SENTENCE_END_RE = re.compile(r"[.!?\n]")
_SEP_LINE_RE = re.compile(r"(?m)^[ \t]*-{3,}[ \t]*$")
_LIST_MARK_RE = re.compile(r"(?m)^[ \t>#]*\**(\d+)[.):]\**\s")


@dataclass(frozen=True)
class ThinkSegment:
    question_index: int
    text: str
    start: int
    end: int


def _paragraph_starts(text: str) -> list[int]:
    starts = [0]
    for m in _PARA_BREAK_RE.finditer(text):
        starts.append(m.end())
    return starts


def _primary_anchors(text: str) -> list[tuple[int, int]]:
    """(cut_offset, question_index) for explicit question references."""
    found: dict[int, int] = {}
    for m in _LINE_ANCHOR_RE.finditer(text):
        found.setdefault(m.start(), int(m.group(1)))
    n_chars = len(text)
    for p in _paragraph_starts(text):
        while p < n_chars and text[p] in " \t\r\n":
            p += 1
        head_end = p + 160
        stop = _SENTENCE_END_RE.search(text, p, head_end)
        if stop:
            head_end = stop.end()
        head = text[p:head_end]
        m = _REF_NUMERAL_RE.search(head)
        idx = int(m.group(1)) if m else None
        if idx is None:
            m = _REF_ORDINAL_RE.search(head)
            idx = _ORDINALS[m.group(1).lower()] if m else None
        if idx is not None:
            found.setdefault(p, idx)
    return sorted(found.items())


def _auxiliary_cuts(text: str, fam: FamilySpec) -> list[int]:
    cuts: set[int] = set()
    if fam.separator_line:
        for m in _SEP_LINE_RE.finditer(text):
            nxt = text.find("\n", m.end())
            if nxt >= 0 and nxt + 1 < len(text):
                cuts.add(nxt + 1)
    if fam.discourse_cues:
        cue_re = re.compile(
            r"(?:%s)\b[ ,.:;!-]" % "|".join(re.escape(c) for c in fam.discourse_cues)
        )
        n_chars = len(text)
        for p in _paragraph_starts(text):
            while p < n_chars and text[p] in " \t\r\n":
                p += 1
            if cue_re.match(text, p):
                cuts.add(p)
    return sorted(cuts)


def _assign_boundaries(n: int, primaries: list[tuple[int, int]], aux: list[int]) -> list[tuple[int, int]]:
    """Merge indexed primary anchors with indexless auxiliary cuts.

    Auxiliary cuts fill index gaps left by the primaries, earliest first,
    and only while fewer than n boundaries are known (primary anchors win).
    """
    increasing: list[tuple[int, int]] = []
    for offset, idx in primaries:
        if 1 <= idx <= n and (not increasing or idx > increasing[-1][1]):
            increasing.append((offset, idx))

    if len(increasing) >= n:
        return increasing

    primary_offsets = {o for o, _ in increasing}
    free = [c for c in aux if c not in primary_offsets]
    entries: list[tuple[int, int | None]] = sorted(
        [(o, i) for o, i in increasing] + [(c, None) for c in free],
        key=lambda e: e[0],
    )

    result: list[tuple[int, int]] = []
    prev_idx = 0
    pending: list[int] = []
    sentinel = (-1, n + 1)
    for offset, idx in entries + [sentinel]:
        if idx is None:
            pending.append(offset)
            continue
        capacity = idx - prev_idx - 1 if idx <= n else n - prev_idx
        for cut in pending[:capacity]:
            prev_idx += 1
            result.append((cut, prev_idx))
        pending = []
        if idx <= n:
            result.append((offset, idx))
            prev_idx = idx
    return sorted(result)


def _trim_segment(text: str, start: int, end: int, fam: FamilySpec) -> int:
    """Shrink a segment end over trailing whitespace and separator lines."""
    e = end
    while True:
        while e > start and text[e - 1] in " \t\r\n":
            e -= 1
        if fam.separator_line:
            line_start = text.rfind("\n", start, e) + 1
            line = text[line_start:e]
            if len(line) >= 3 and set(line) == {"-"}:
                e = line_start
                continue
        return e


def segment(think_text: str, n: int, family: str | FamilySpec) -> list[ThinkSegment]:
    """Cut a reasoning span into at most ``n`` per-question segments.

    ``n == 1`` returns the whole span verbatim as segment 1. Fewer than
    ``n`` resolvable boundaries yield fewer segments (the caller marks the
    parse partial); excess auxiliary cues are ignored.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    fam = get_family(family) if isinstance(family, str) else family
    if n == 1:
        return [ThinkSegment(1, think_text, 0, len(think_text))]

    primaries = _primary_anchors(think_text)
    aux = _auxiliary_cuts(think_text, fam) if len(primaries) < n else []
    cuts = _assign_boundaries(n, primaries, aux)

    if not cuts:
        return [ThinkSegment(1, think_text, 0, len(think_text))]

    first_offset, first_idx = cuts[0]
    if first_offset > 0:
        if first_idx == 1 or not think_text[:first_offset].strip():
            cuts[0] = (0, first_idx)
        else:
            cuts.insert(0, (0, 1))

    segments: list[ThinkSegment] = []
    for i, (offset, idx) in enumerate(cuts):
        end = cuts[i + 1][0] if i + 1 < len(cuts) else len(think_text)
        trimmed = _trim_segment(think_text, offset, end, fam)
        segments.append(ThinkSegment(idx, think_text[offset:trimmed], offset, trimmed))
    return segments


# ---------------------------------------------------------------------------
# answer extraction


def find_boxed(text: str) -> list[tuple[int, int, str]]:
    """All balanced \\boxed{...} spans as (start, end, payload)."""
    spans = []
    search = 0
    while True:
        start = text.find("\\boxed{", search)
        if start < 0:
            return spans
        depth = 0
        pos = start + len("\\boxed{") - 1
        for i in range(pos, len(text)):
            ch = text[i]
            if ch == "{" and (i == 0 or text[i - 1] != "\\"):
                depth += 1
            elif ch == "}" and text[i - 1] != "\\":
                depth -= 1
                if depth == 0:
                    spans.append((start, i + 1, text[pos + 1 : i]))
                    search = i + 1
                    break
        else:
            return spans


_ANSWER_PHRASE_RE = re.compile(
    r"(?:(?:final\s+)?answer\s*(?:is|:)|result\s+is|gives\s+(?:me\s+|us\s+)?|equals)\s*"
    r"\**\s*([^\n.!?]+?)\**\s*(?=[.!?\n]|$)",
    re.IGNORECASE,
)


def _last_phrase_capture(text: str) -> str | None:
    capture = None
    for m in _ANSWER_PHRASE_RE.finditer(text):
        payload = m.group(1).strip()
        if payload:
            capture = payload
    return capture


def extract_predicted_answer(segment_text: str, response_text: str | None = None) -> str | None:
    """Best-effort predicted answer for one question.

    Priority: last balanced box in the response region, last box in the
    reasoning segment, trailing answer phrase in the response region, then
    in the segment. None when nothing matches.
    """
    if response_text:
        boxes = find_boxed(response_text)
        if boxes:
            return boxes[-1][2]
    boxes = find_boxed(segment_text)
    if boxes:
        return boxes[-1][2]
    if response_text:
        capture = _last_phrase_capture(response_text)
        if capture:
            return capture
    return _last_phrase_capture(segment_text)


def attribute_responses(post_text: str, n: int) -> dict[int, str]:
    """Map question indices to their region of the post-think text.

    Uses question anchors or numbered-list markers at line starts; when
    neither resolves and the post text carries exactly ``n`` boxed answers,
    the k-th box is attributed to question k.
    """
    if n == 1:
        return {1: post_text}
    marks: dict[int, int] = {}
    for m in _LINE_ANCHOR_RE.finditer(post_text):
        marks.setdefault(m.start(), int(m.group(1)))
    if not marks:
        for m in _LIST_MARK_RE.finditer(post_text):
            marks.setdefault(m.start(), int(m.group(1)))
    cuts = []
    last = 0
    for offset, idx in sorted(marks.items()):
        if 1 <= idx <= n and idx > last:
            cuts.append((offset, idx))
            last = idx
    if cuts:
        regions = {}
        for i, (offset, idx) in enumerate(cuts):
            end = cuts[i + 1][0] if i + 1 < len(cuts) else len(post_text)
            regions[idx] = post_text[offset:end]
        return regions
    boxes = find_boxed(post_text)
    if len(boxes) == n:
        return {i + 1: post_text[s:e] for i, (s, e, _) in enumerate(boxes)}
    return {}


# ---------------------------------------------------------------------------
# whole-generation parsing


@dataclass
class TraceSegment:
    question_index: int
    reasoning_text: str
    response_text: str
    predicted_answer: str | None
    reasoning_tokens: int
    from_truncated: bool = False
    tail_truncated: bool = False
    span: tuple[int, int] = (0, 0)


@dataclass
class ParsedTrace:
    prompt_id: str
    sample_index: int
    family: str
    n_questions: int
    parse_status: str  # complete | partial | failed
    segments: list[TraceSegment]
    failure: str | None = None

    def to_dict(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "sample_index": self.sample_index,
            "family": self.family,
            "n_questions": self.n_questions,
            "parse_status": self.parse_status,
            "failure": self.failure,
            "segments": [
                {
                    "question_index": s.question_index,
                    "reasoning_text": s.reasoning_text,
                    "response_text": s.response_text,
                    "predicted_answer": s.predicted_answer,
                    "reasoning_tokens": s.reasoning_tokens,
                    "from_truncated": s.from_truncated,
                    "tail_truncated": s.tail_truncated,
                    "span": list(s.span),
                }
                for s in self.segments
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParsedTrace":
        return cls(
            prompt_id=d["prompt_id"],
            sample_index=d["sample_index"],
            family=d["family"],
            n_questions=d["n_questions"],
            parse_status=d["parse_status"],
            failure=d.get("failure"),
            segments=[
                TraceSegment(
                    question_index=s["question_index"],
                    reasoning_text=s["reasoning_text"],
                    response_text=s["response_text"],
                    predicted_answer=s.get("predicted_answer"),
                    reasoning_tokens=s["reasoning_tokens"],
                    from_truncated=s.get("from_truncated", False),
                    tail_truncated=s.get("tail_truncated", False),
                    span=tuple(s.get("span", (0, 0))),
                )
                for s in d["segments"]
            ],
        )


def parse_generation(
    raw_text: str,
    *,
    prompt_id: str,
    sample_index: int,
    n_questions: int,
    family: str | FamilySpec,
    truncated: bool = False,
    counter: TokenCounter = WHITESPACE_APPROX,
) -> ParsedTrace:
    """Parse one raw generation into per-question segments with answers."""
    fam = get_family(family) if isinstance(family, str) else family
    try:
        think, post = extract_think(raw_text, fam, allow_unterminated=truncated)
    except ThinkExtractionError as exc:
        return ParsedTrace(prompt_id, sample_index, fam.name, n_questions, "failed", [], exc.reason)

    raw_segments = segment(think, n_questions, fam)
    regions = attribute_responses(post, n_questions)

    segments = []
    for i, seg in enumerate(raw_segments):
        response = regions.get(seg.question_index, "")
        predicted = extract_predicted_answer(seg.text, response or None)
        segments.append(
            TraceSegment(
                question_index=seg.question_index,
                reasoning_text=seg.text,
                response_text=response,
                predicted_answer=predicted,
                reasoning_tokens=token_count(seg.text, counter),
                from_truncated=truncated,
                tail_truncated=truncated and i == len(raw_segments) - 1,
                span=(seg.start, seg.end),
            )
        )

    covered = {s.question_index for s in segments if s.reasoning_text.strip()}
    if covered == set(range(1, n_questions + 1)):
        status = "complete"
    elif covered:
        status = "partial"
    else:
        status = "failed"
    return ParsedTrace(prompt_id, sample_index, fam.name, n_questions, status, segments,
                       None if status != "failed" else "no_segments")
