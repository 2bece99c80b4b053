"""Loading, validation, and stratification of single-question corpora.

Input is UTF-8 line-delimited JSON, one self-contained record per line.
Field names are configurable through ``schema_options`` because public
math-corpus exports disagree on naming; records are stored verbatim
(no answer normalization happens here) so the corpus stays lossless.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

VALID_LEVELS = (1, 2, 3, 4, 5)
CANONICAL_FIELDS = ("id", "text", "gold_answer", "dataset", "level", "subject", "choices")
REQUIRED_FIELDS = ("id", "text", "gold_answer")


class DuplicateIdError(ValueError):
    """Two records share an id; ids must be unique within a corpus."""


@dataclass(frozen=True)
class Choice:
    label: str
    text: str = ""


@dataclass(frozen=True)
class QuestionRecord:
    id: str
    text: str
    gold_answer: str
    dataset: str = ""
    level: int | None = None
    subject: str | None = None
    choices: tuple[Choice, ...] | None = None

    @property
    def choice_labels(self) -> list[str] | None:
        if self.choices is None:
            return None
        return [c.label for c in self.choices]

    def to_dict(self) -> dict:
        d: dict = {"id": self.id, "text": self.text, "gold_answer": self.gold_answer}
        if self.dataset:
            d["dataset"] = self.dataset
        if self.level is not None:
            d["level"] = self.level
        if self.subject is not None:
            d["subject"] = self.subject
        if self.choices is not None:
            d["choices"] = [{"label": c.label, "text": c.text} for c in self.choices]
        return d


@dataclass(frozen=True)
class LineError:
    line_no: int
    message: str


@dataclass
class Corpus:
    """Immutable ordered collection of validated records plus reject log."""

    records: tuple[QuestionRecord, ...]
    errors: tuple[LineError, ...] = ()
    by_id: dict[str, QuestionRecord] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.by_id:
            self.by_id = {r.id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[QuestionRecord]:
        return iter(self.records)

    def get(self, record_id: str) -> QuestionRecord | None:
        return self.by_id.get(record_id)

    def error_report(self) -> dict:
        return {
            "records": len(self.records),
            "rejected": len(self.errors),
            "errors": [{"line": e.line_no, "message": e.message} for e in self.errors],
        }


def _parse_level(value: object) -> int:
    if isinstance(value, bool):
        raise ValueError(f"invalid level {value!r}")
    if isinstance(value, int):
        level = value
    elif isinstance(value, str):
        # MATH exports write "Level 3"; accept bare digits too.
        digits = value.strip().rsplit(" ", 1)[-1]
        if not digits.isdigit():
            raise ValueError(f"invalid level {value!r}")
        level = int(digits)
    else:
        raise ValueError(f"invalid level {value!r}")
    if level not in VALID_LEVELS:
        raise ValueError(f"level {level} outside {{1..5}}")
    return level


def _parse_choices(value: object) -> tuple[Choice, ...]:
    if not isinstance(value, list) or not value:
        raise ValueError("choices must be a non-empty list")
    out = []
    for i, item in enumerate(value):
        if isinstance(item, str):
            out.append(Choice(label=chr(ord("A") + i), text=item))
        elif isinstance(item, dict) and "label" in item:
            out.append(Choice(label=str(item["label"]), text=str(item.get("text", ""))))
        else:
            raise ValueError(f"choice #{i} must be a string or a {{label, text}} object")
    return tuple(out)


def _record_from_obj(obj: dict, names: Mapping[str, str], default_dataset: str) -> QuestionRecord:
    def pick(canonical: str) -> object:
        return obj.get(names.get(canonical, canonical))

    missing = [f for f in REQUIRED_FIELDS if pick(f) is None]
    if missing:
        raise ValueError(f"missing required field(s): {', '.join(missing)}")

    rec_id = str(pick("id"))
    text = str(pick("text"))
    gold = str(pick("gold_answer"))
    if not text.strip() or not gold.strip():
        raise ValueError("text and gold_answer must be non-empty")

    dataset = pick("dataset")
    level = pick("level")
    subject = pick("subject")
    choices = pick("choices")
    return QuestionRecord(
        id=rec_id,
        text=text,
        gold_answer=gold,
        dataset=str(dataset) if dataset is not None else default_dataset,
        level=_parse_level(level) if level is not None else None,
        subject=str(subject) if subject is not None else None,
        choices=_parse_choices(choices) if choices is not None else None,
    )


def load_corpus(path: str | Path, schema_options: Mapping[str, str] | None = None) -> Corpus:
    """Load and validate a line-delimited corpus, preserving input order.

    Malformed lines and records missing required fields are skipped and
    reported with their line number; a duplicate id is a hard error.
    """
    options = dict(schema_options or {})
    default_dataset = str(options.pop("default_dataset", ""))
    records: list[QuestionRecord] = []
    errors: list[LineError] = []
    seen: dict[str, int] = {}

    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(LineError(line_no, f"malformed JSON: {exc.msg}"))
                continue
            if not isinstance(obj, dict):
                errors.append(LineError(line_no, "line is not a JSON object"))
                continue
            try:
                record = _record_from_obj(obj, options, default_dataset)
            except ValueError as exc:
                errors.append(LineError(line_no, str(exc)))
                continue
            if record.id in seen:
                raise DuplicateIdError(
                    f"duplicate id {record.id!r} at line {line_no} (first seen at line {seen[record.id]})"
                )
            seen[record.id] = line_no
            records.append(record)

    return Corpus(records=tuple(records), errors=tuple(errors))


def write_corpus(records, path: str | Path) -> int:
    """Write records in canonical field names; returns the line count."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")
            count += 1
    return count


UNLABELED = "unlabeled"
STRATIFY_KEYS = ("level", "dataset", "subject")


def stratify(records, key: str) -> dict[str, list[str]]:
    """Partition record ids by level, dataset, or subject.

    Total: records missing the key land in the "unlabeled" bucket, and every
    record appears in exactly one bucket.
    """
    if key not in STRATIFY_KEYS:
        raise ValueError(f"unsupported stratify key {key!r} (use one of {STRATIFY_KEYS})")
    buckets: dict[str, list[str]] = {}
    for record in records:
        value = getattr(record, key)
        bucket = str(value) if value not in (None, "") else UNLABELED
        buckets.setdefault(bucket, []).append(record.id)
    return buckets
