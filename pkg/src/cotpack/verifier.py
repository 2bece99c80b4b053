"""Answer normalization and equivalence checking.

Gold answers in math corpora arrive as LaTeX fragments, decimals, bare
integers, option letters, or short prose. Both sides of a comparison are
first normalized into an :class:`AnswerForm` and then compared with the
strictest method the pair of kinds supports:

* rational vs rational        -> exact equality in lowest terms
* anything numeric vs decimal -> relative tolerance 1e-6 (absolute 1e-9 near 0)
* choice vs choice            -> letter equality
* symbolic vs symbolic        -> canonical token sequence equality with
                                 top-level commutative sum/product sorting
* text (total fallback)       -> casefolded, whitespace-collapsed equality

The symbolic matcher is deliberately shallow: it is not a CAS, it
canonicalizes the fraction/radical/pi-multiple forms that dominate
competition-math answers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

REL_TOL = Fraction(1, 10**6)
ABS_TOL = Fraction(1, 10**9)

KINDS = ("rational", "decimal", "integer-set", "choice", "symbolic", "text")


@dataclass(frozen=True)
class AnswerForm:
    """A normalized answer: `kind` plus a kind-specific canonical payload.

    `source` keeps the raw input for reporting and is excluded from equality,
    so normalize(form.render()) == form holds.
    """

    kind: str
    value: object
    source: str = field(compare=False)

    def render(self) -> str:
        """Canonical string whose normalization reproduces this form."""
        if self.kind in ("rational", "decimal"):
            return _render_number(self.value, decimal=self.kind == "decimal")
        if self.kind == "integer-set":
            return "{" + ", ".join(str(v) for v in self.value) + "}"
        if self.kind == "choice":
            return str(self.value)
        if self.kind == "symbolic":
            return " ".join(self.value)
        return str(self.value)


@dataclass(frozen=True)
class Verdict:
    correct: bool
    method: str
    detail: str = ""


_WS_RE = re.compile(r"\s+")
_THOUSANDS_RE = re.compile(r"^[+-]?\d{1,3}(?:,\d{3})+(?:\.\d+)?$")
_INT_RE = re.compile(r"^[+-]?\d+$")
_DECIMAL_RE = re.compile(r"^[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?$")
_FRAC_CMD_RE = re.compile(r"^([+-]?)\\[dt]?frac\{(-?\d+)\}\{(-?\d+)\}$")
_SLASH_FRAC_RE = re.compile(r"^([+-]?\d+)\s*/\s*(-?\d+)$")
_CHOICE_RE = re.compile(r"^\(?([A-Za-z])\)?$")
_INT_SET_RE = re.compile(r"^\{\s*[+-]?\d+(?:\s*,\s*[+-]?\d+)*\s*\}$|^[+-]?\d+(?:\s*,\s*[+-]?\d+)+$")
_PROSE_RE = re.compile(r"^[A-Za-z][A-Za-z\s.,'\"!?;:-]*$")
_SYMB_TOKEN_RE = re.compile(r"\\[a-zA-Z]+|\d+\.?\d*|[a-zA-Z]+|\S")


def _render_number(value: Fraction, decimal: bool) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    if decimal:
        # Exact decimal forms always have a 2^a * 5^b denominator.
        num, den = value.numerator, value.denominator
        scale = 0
        while den % 2 == 0:
            den //= 2
            num *= 5
            scale += 1
        while den % 5 == 0:
            den //= 5
            num *= 2
            scale += 1
        if den == 1:
            digits = str(abs(num)).rjust(scale + 1, "0")
            sign = "-" if num < 0 else ""
            return f"{sign}{digits[:-scale]}.{digits[-scale:]}" if scale else f"{sign}{digits}"
    return f"{value.numerator}/{value.denominator}"


def _strip_wrappers(s: str) -> str:
    """Peel $...$, \\text{...}, \\boxed{...}, \\left/\\right and trailing periods."""
    prev = None
    while prev != s:
        prev = s
        s = s.strip()
        if len(s) >= 2 and s.startswith("$") and s.endswith("$"):
            s = s[1:-1]
            continue
        for cmd in ("\\text", "\\boxed", "\\mathrm"):
            if s.startswith(cmd + "{") and s.endswith("}") and _braces_balanced(s[len(cmd) + 1 : -1]):
                s = s[len(cmd) + 1 : -1]
                break
        s = s.replace("\\left", "").replace("\\right", "")
        s = s.replace("\\!", "").replace("\\,", "").replace("\\%", "%")
        s = s.rstrip(".")
    return s


def _braces_balanced(s: str) -> bool:
    depth = 0
    for ch in s:
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth < 0:
                return False
    return depth == 0


def _parse_numeric(s: str) -> tuple[str, Fraction] | None:
    """Return (kind, value) for plain numeric strings, else None."""
    if _THOUSANDS_RE.match(s):
        s = s.replace(",", "")
    if s.endswith("%"):
        core = s[:-1].strip()
        if _THOUSANDS_RE.match(core):
            core = core.replace(",", "")
        if _DECIMAL_RE.match(core):
            return "decimal", Fraction(core) / 100
        return None
    if _INT_RE.match(s):
        return "rational", Fraction(int(s))
    if _DECIMAL_RE.match(s):
        return "decimal", Fraction(s)
    m = _FRAC_CMD_RE.match(s)
    if m:
        sign, a, b = m.groups()
        if int(b) == 0:
            return None
        value = Fraction(int(a), int(b))
        return "rational", -value if sign == "-" else value
    m = _SLASH_FRAC_RE.match(s)
    if m and int(m.group(2)) != 0:
        return "rational", Fraction(int(m.group(1)), int(m.group(2)))
    return None


def _split_top_level(tokens: Sequence[str], seps: frozenset[str]) -> list[list[str]]:
    parts: list[list[str]] = [[]]
    depth = 0
    for tok in tokens:
        if tok in ("{", "(", "["):
            depth += 1
        elif tok in ("}", ")", "]"):
            depth -= 1
        if depth == 0 and tok in seps and parts[-1]:
            parts.append([tok])
        else:
            parts[-1].append(tok)
    return parts


_TERM_SEPS = frozenset({"+", "-"})
_FACTOR_SEPS = frozenset({"*", "\\cdot", "\\times"})


def _canonical_symbolic(tokens: list[str]) -> tuple[str, ...]:
    """Sort commutative sums and products at the top level only."""
    terms = _split_top_level(tokens, _TERM_SEPS)
    canon_terms: list[tuple[str, tuple[str, ...]]] = []
    for term in terms:
        sign = "+"
        body = term
        if body and body[0] in ("+", "-"):
            sign = body[0]
            body = body[1:]
        factors = [
            tuple(f[1:] if f and f[0] in _FACTOR_SEPS else f)
            for f in _split_top_level(body, _FACTOR_SEPS)
        ]
        factors = [f for f in factors if f]
        flat = tuple(t for f in sorted(factors) for t in ("*",) + f)[1:]
        canon_terms.append((sign, flat))
    if len(canon_terms) > 1:
        canon_terms.sort(key=lambda t: (t[1], t[0]))
    out: list[str] = []
    for sign, flat in canon_terms:
        if out or sign == "-":
            out.append(sign)
        out.extend(flat)
    return tuple(out)


def normalize(raw: str, choices: Sequence[str] | None = None) -> AnswerForm:
    """Normalize a raw answer string into its canonical :class:`AnswerForm`.

    Total: every string maps to some kind, with text as the fallback.
    `choices` is the ordered list of option labels for multiple-choice items;
    bare letters (with or without parentheses) map to the choice kind only
    when it is supplied.
    """
    s = _strip_wrappers(raw)
    if not s:
        return AnswerForm("text", "", raw)

    if choices:
        m = _CHOICE_RE.match(s)
        if m:
            letter = m.group(1).upper()
            labels = {str(c).upper() for c in choices}
            if letter in labels:
                return AnswerForm("choice", letter, raw)

    numeric = _parse_numeric(s)
    if numeric is not None:
        kind, value = numeric
        return AnswerForm(kind, value, raw)

    if _INT_SET_RE.match(s):
        values = tuple(sorted(int(v) for v in re.findall(r"[+-]?\d+", s)))
        return AnswerForm("integer-set", values, raw)

    collapsed = _WS_RE.sub(" ", s)
    if _PROSE_RE.match(collapsed):
        return AnswerForm("text", collapsed.casefold(), raw)

    tokens = _SYMB_TOKEN_RE.findall(s)
    return AnswerForm("symbolic", _canonical_symbolic(tokens), raw)


def _as_fraction(form: AnswerForm) -> Fraction | None:
    if form.kind in ("rational", "decimal"):
        return form.value
    if form.kind == "integer-set" and len(form.value) == 1:
        return Fraction(form.value[0])
    return None


def _close(x: Fraction, y: Fraction) -> bool:
    return abs(x - y) <= max(REL_TOL * max(abs(x), abs(y)), ABS_TOL)


def equivalent(a: AnswerForm, b: AnswerForm) -> Verdict:
    """Decide equivalence of two normalized forms. Symmetric and total."""
    xa, xb = _as_fraction(a), _as_fraction(b)
    if xa is not None and xb is not None:
        if a.kind == b.kind == "rational":
            return Verdict(xa == xb, "rational-exact", f"{xa} vs {xb}")
        if "integer-set" in (a.kind, b.kind) and a.kind != b.kind:
            return Verdict(xa == xb, "rational-exact", "singleton set vs number")
        return Verdict(_close(xa, xb), "decimal-tolerance", f"{float(xa)!r} vs {float(xb)!r}")

    if a.kind == b.kind == "choice":
        return Verdict(a.value == b.value, "choice", f"{a.value} vs {b.value}")
    if a.kind == b.kind == "integer-set":
        return Verdict(a.value == b.value, "symbolic-canonical", "integer sets")
    if a.kind == b.kind == "symbolic":
        return Verdict(a.value == b.value, "symbolic-canonical", "canonical tokens")
    if a.kind == b.kind == "text":
        return Verdict(a.value == b.value, "text-exact", f"{a.value!r} vs {b.value!r}")

    if {a.kind, b.kind} == {"choice", "text"}:
        choice, text = (a, b) if a.kind == "choice" else (b, a)
        m = _CHOICE_RE.match(str(text.value))
        if m:
            return Verdict(m.group(1).upper() == choice.value, "choice", "letter from text")

    ra, rb = _WS_RE.sub(" ", a.render()).casefold(), _WS_RE.sub(" ", b.render()).casefold()
    return Verdict(ra == rb, "text-exact", f"fallback {ra!r} vs {rb!r}")


def verify(predicted: str | None, gold: str, choices: Sequence[str] | None = None) -> Verdict:
    """Verdict for a predicted answer against the ground truth string."""
    if predicted is None:
        return Verdict(False, "text-exact", "no answer extracted")
    return equivalent(normalize(predicted, choices), normalize(gold, choices))
