"""Model-family registry: reasoning-span tags, segmentation cues, decode defaults."""

from __future__ import annotations

from dataclasses import dataclass


class UnsupportedFamilyError(ValueError):
    """Raised for a model family this package does not know."""


@dataclass(frozen=True)
class FamilySpec:
    """Per-family constants used by the packer, sampler, parser, and curator.

    `allow_unopened_think` covers deployments whose prompt pre-opens the
    reasoning span, so generations begin mid-thought and carry only the
    closing tag.
    """

    name: str
    think_open: str
    think_close: str
    default_max_tokens: int
    response_open: str | None = None
    response_close: str | None = None
    allow_unopened_think: bool = False
    separator_line: str | None = None
    discourse_cues: tuple[str, ...] = ()
    template_file: str | None = None
    system_instruction: str = (
        "Please reason step by step, and put your final answer within \\boxed{}."
    )


_DISCOURSE_CUES = ("Okay", "Hmm", "Alright")

FAMILIES: dict[str, FamilySpec] = {
    "qwen3": FamilySpec(
        name="qwen3",
        think_open="<think>",
        think_close="</think>",
        default_max_tokens=32768,
        separator_line="---",
        template_file="qwen3.txt",
    ),
    "r1-distill": FamilySpec(
        name="r1-distill",
        think_open="<think>",
        think_close="</think>",
        default_max_tokens=16384,
        allow_unopened_think=True,
        discourse_cues=_DISCOURSE_CUES,
        template_file="r1-distill.txt",
    ),
    "seed-oss": FamilySpec(
        name="seed-oss",
        think_open="<seed:think>",
        think_close="</seed:think>",
        default_max_tokens=32768,
        discourse_cues=_DISCOURSE_CUES,
    ),
    "ernie-thinking": FamilySpec(
        name="ernie-thinking",
        think_open="<think>",
        think_close="</think>",
        default_max_tokens=32768,
        response_open="<response>",
        response_close="</response>",
        discourse_cues=_DISCOURSE_CUES,
    ),
}


def get_family(name: str) -> FamilySpec:
    try:
        return FAMILIES[name]
    except KeyError:
        known = ", ".join(sorted(FAMILIES))
        raise UnsupportedFamilyError(f"unsupported family {name!r} (known: {known})") from None
