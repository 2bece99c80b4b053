"""Quantitative statistics over parsed traces and verdicts.

Covers per-question compression rates against the single-question baseline,
per-N scaling summaries, pass@1 / avg@k accuracy, relative accuracy against
the N=1 baseline, the reasoning efficiency ratio (thinking tokens spent
before the first correct answer), behavior-lexicon profiles, difficulty
breakdowns, and two-run delta tables. Everything is a pure reduction over
immutable inputs; plotting is out of scope, each report carries the data a
plot would need (histograms as bin-edge/count pairs).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from statistics import mean, median
from typing import Mapping, Sequence

import numpy as np

from .parser import TokenCounter, WHITESPACE_APPROX, find_boxed, token_count
from .verifier import equivalent, normalize


# ---------------------------------------------------------------------------
# compression


@dataclass(frozen=True)
class CompressionStat:
    question_id: str
    baseline_len: float
    multi_len: float
    n: int
    rho: float
    delta: float


def compression_rate(baseline_len: float, multi_len: float) -> tuple[float, float]:
    """(rho, delta) for one question: rho = 1 - multi/baseline."""
    if baseline_len <= 0:
        raise ValueError("rho undefined for baseline_len == 0")
    return 1.0 - multi_len / baseline_len, multi_len - baseline_len


def build_compression_stats(
    baseline_lens: Mapping[str, float], multi_lens: Mapping[str, float], n: int
) -> list[CompressionStat]:
    """Join per-question lengths on question id; ids missing a baseline are skipped."""
    stats = []
    for qid in sorted(multi_lens):
        base = baseline_lens.get(qid)
        if base is None or base <= 0:
            continue
        rho, delta = compression_rate(base, multi_lens[qid])
        stats.append(CompressionStat(qid, base, multi_lens[qid], n, rho, delta))
    return stats


def scaling_summary(
    stats_by_n: Mapping[int, Sequence[CompressionStat]],
    bin_edges: Sequence[float] | None = None,
) -> dict[int, dict]:
    """Per-N length distribution summary plus mean compression rate."""
    out: dict[int, dict] = {}
    for n in sorted(stats_by_n):
        stats = list(stats_by_n[n])
        if not stats:
            raise ValueError(f"empty group for N={n}")
        lengths = [s.multi_len for s in stats]
        arr = np.asarray(lengths, dtype=float)
        counts, edges = np.histogram(arr, bins=bin_edges if bin_edges is not None else 10)
        out[n] = {
            "count": len(lengths),
            "mean_len": float(arr.mean()),
            "median_len": float(np.median(arr)),
            "p10_len": float(np.percentile(arr, 10)),
            "p90_len": float(np.percentile(arr, 90)),
            "mean_rho": mean(s.rho for s in stats),
            "histogram": {"bin_edges": [float(e) for e in edges], "counts": [int(c) for c in counts]},
        }
    return out


# ---------------------------------------------------------------------------
# accuracy

ACCURACY_MODES = ("pass_at_1", "avg_at_k")


def accuracy(
    verdicts: Mapping[str, Sequence[bool]], mode: str, k: int | None = None
) -> dict:
    """Per-question and aggregate accuracy.

    pass_at_1 scores sample index 0 only; avg_at_k requires exactly k
    samples per question and averages correctness over them. The aggregate
    is the unweighted mean over questions.
    """
    if mode not in ACCURACY_MODES:
        raise ValueError(f"unknown accuracy mode {mode!r}")
    per_question: dict[str, float] = {}
    for qid in sorted(verdicts):
        samples = list(verdicts[qid])
        if not samples:
            raise ValueError(f"question {qid} has no samples")
        if mode == "pass_at_1":
            per_question[qid] = 1.0 if samples[0] else 0.0
        else:
            if k is None:
                raise ValueError("avg_at_k requires k")
            if len(samples) != k:
                raise ValueError(f"question {qid} has {len(samples)} samples, expected {k}")
            per_question[qid] = sum(map(bool, samples)) / k
    return {
        "mode": mode,
        "k": k,
        "per_question": per_question,
        "aggregate": mean(per_question.values()),
    }


def relative_accuracy(acc_by_n: Mapping[int, float]) -> dict[int, float]:
    """Accuracy of each N-question setting relative to the N=1 baseline."""
    baseline = acc_by_n.get(1)
    if baseline is None:
        raise ValueError("missing N=1 baseline accuracy")
    if baseline == 0:
        raise ValueError("N=1 baseline accuracy is zero")
    return {n: acc_by_n[n] / baseline for n in sorted(acc_by_n)}


# ---------------------------------------------------------------------------
# reasoning efficiency


@dataclass(frozen=True)
class EfficiencyStat:
    question_id: str
    pre_tokens: int
    total_tokens: int
    eta: float


_NUMERIC_LITERAL_RE = re.compile(
    r"\\[dt]?frac\{-?\d+\}\{-?\d+\}|-?\d+(?:,\d{3})*(?:\.\d+)?%?|\d+\s*/\s*\d+"
)


def _answer_candidates(text: str) -> list[tuple[int, str]]:
    """(end_offset, payload) for boxed payloads and numeric literals, by end."""
    candidates = [(end, payload) for _, end, payload in find_boxed(text)]
    candidates.extend((m.end(), m.group(0)) for m in _NUMERIC_LITERAL_RE.finditer(text))
    return sorted(candidates, key=lambda c: c[0])


def efficiency_ratio(
    reasoning_text: str,
    gold: str,
    counter: TokenCounter = WHITESPACE_APPROX,
    choices: Sequence[str] | None = None,
    question_id: str = "",
) -> EfficiencyStat:
    """Fraction of thinking tokens spent before the first correct answer.

    Scans answer candidates in order of their end offset and verifies each
    against gold; the pre-answer cost is the token count of the prefix
    ending at the first correct occurrence. When the gold answer never
    appears, pre := total (eta = 1), keeping the ratio total and bounded.
    """
    total = token_count(reasoning_text, counter)
    gold_form = normalize(gold, choices)
    pre = total
    for end, payload in _answer_candidates(reasoning_text):
        if equivalent(normalize(payload, choices), gold_form).correct:
            pre = token_count(reasoning_text[:end], counter)
            break
    eta = pre / total if total > 0 else 1.0
    return EfficiencyStat(question_id, pre, total, eta)


# ---------------------------------------------------------------------------
# behavior profiling

DEFAULT_LEXICON: dict[str, tuple[str, ...]] = {
    "planning": ("first", "plan", "let me start"),
    "exploration": ("what if", "alternatively", "another way"),
    "verification": ("check", "verify", "double-check"),
    "reflection": ("wait", "hmm", "hold on"),
}


@dataclass(frozen=True)
class BehaviorProfile:
    counts: dict[str, int]
    densities: dict[str, float]
    word_total: int


def _cue_pattern(cue: str) -> re.Pattern:
    parts = [re.escape(p) for p in cue.split()]
    return re.compile(r"\b" + r"\s+".join(parts) + r"\b", re.IGNORECASE)


def behavior_profile(
    reasoning_text: str, lexicon: Mapping[str, Sequence[str]] | None = None
) -> BehaviorProfile:
    """Case-insensitive whole-word/phrase cue counts per behavior category,
    with densities normalized per 100 words."""
    lexicon = lexicon or DEFAULT_LEXICON
    word_total = len(reasoning_text.split())
    counts: dict[str, int] = {}
    for category in lexicon:
        cues = list(lexicon[category])
        if not cues:
            raise ValueError(f"lexicon category {category!r} is empty")
        counts[category] = sum(
            len(_cue_pattern(cue).findall(reasoning_text)) for cue in cues
        )
    densities = {
        cat: (100.0 * c / word_total if word_total else 0.0) for cat, c in counts.items()
    }
    return BehaviorProfile(counts, densities, word_total)


# ---------------------------------------------------------------------------
# difficulty and delta tables


def difficulty_breakdown(
    run_a: Mapping[str, tuple[float, float]],
    run_b: Mapping[str, tuple[float, float]],
    stratification: Mapping[str, Sequence[str]],
    labels: tuple[str, str] = ("a", "b"),
) -> list[dict]:
    """Per-level mean length and accuracy for two labeled runs.

    Run values are (reasoning_tokens, correctness) per question id, where
    correctness is a bool or a fractional per-question accuracy. Levels with
    no data in a run yield null aggregates for it.
    """

    def aggregate(run: Mapping[str, tuple[float, bool]], qids: Sequence[str]) -> dict:
        rows = [run[q] for q in qids if q in run]
        if not rows:
            return {"mean_tokens": None, "accuracy": None, "count": 0}
        return {
            "mean_tokens": mean(r[0] for r in rows),
            "accuracy": mean(float(r[1]) for r in rows),
            "count": len(rows),
        }

    table = []
    for level in sorted(stratification):
        qids = list(stratification[level])
        agg_a = aggregate(run_a, qids)
        agg_b = aggregate(run_b, qids)
        delta_pct = None
        if agg_a["mean_tokens"] and agg_b["mean_tokens"] is not None:
            delta_pct = 100.0 * (agg_b["mean_tokens"] - agg_a["mean_tokens"]) / agg_a["mean_tokens"]
        table.append(
            {"level": level, labels[0]: agg_a, labels[1]: agg_b, "delta_tokens_pct": delta_pct}
        )
    return table


def delta_table(
    baseline: Mapping[str, tuple[float, float]],
    candidate: Mapping[str, tuple[float, float]],
    labels: tuple[str, str] = ("baseline", "candidate"),
) -> dict:
    """Two-run comparison: per-benchmark (accuracy, tokens) plus aggregate
    deltas. Accuracy deltas are in points; the token delta aggregates as the
    unweighted mean of per-benchmark relative changes."""
    if set(baseline) != set(candidate):
        missing = sorted(set(baseline) ^ set(candidate))
        raise ValueError(f"benchmark mismatch between runs: {missing}")
    rows = {}
    for bench in sorted(baseline):
        acc_a, tok_a = baseline[bench]
        acc_b, tok_b = candidate[bench]
        rows[bench] = {
            f"{labels[0]}_acc": acc_a,
            f"{labels[0]}_tok": tok_a,
            f"{labels[1]}_acc": acc_b,
            f"{labels[1]}_tok": tok_b,
            "delta_acc": acc_b - acc_a,
            "delta_tok_pct": 100.0 * (tok_b - tok_a) / tok_a if tok_a else None,
        }
    return {
        "benchmarks": rows,
        "aggregate": {
            "delta_acc": mean(r["delta_acc"] for r in rows.values()),
            "delta_tok_pct": mean(
                r["delta_tok_pct"] for r in rows.values() if r["delta_tok_pct"] is not None
            ),
        },
    }


# ---------------------------------------------------------------------------
# length summaries (shared by reports)


def length_summary(lengths: Sequence[float]) -> dict:
    if not lengths:
        return {"count": 0}
    arr = np.asarray(lengths, dtype=float)
    counts, edges = np.histogram(arr, bins=10)
    return {
        "count": int(arr.size),
        "mean": float(arr.mean()),
        "median": float(median(lengths)),
        "p10": float(np.percentile(arr, 10)),
        "p90": float(np.percentile(arr, 90)),
        "histogram": {"bin_edges": [float(e) for e in edges], "counts": [int(c) for c in counts]},
    }
