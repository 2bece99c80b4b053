"""cotpack: mine compressed reasoning traces from multi-question prompts.

Pipeline: pack questions into multi-question prompts, sample an inference
endpoint (or a deterministic replay store), segment the reasoning spans per
question, verify extracted answers against gold, curate the correct
compressed trajectories into an SFT corpus, and compute compression /
efficiency / behavior statistics.
"""

from .analytics import (
    BehaviorProfile,
    CompressionStat,
    EfficiencyStat,
    accuracy,
    behavior_profile,
    compression_rate,
    delta_table,
    difficulty_breakdown,
    efficiency_ratio,
    relative_accuracy,
    scaling_summary,
)
from .curator import CuratedExample, emit_sft, filter_correct, select_shortest_correct
from .families import FAMILIES, FamilySpec, get_family
from .ingest import Corpus, QuestionRecord, load_corpus, stratify, write_corpus
from .packer import (
    ControlTexts,
    PromptSpec,
    build_control_prompt,
    pack,
    plan_batches,
    render_template,
)
from .parser import (
    ParsedTrace,
    TokenCounter,
    extract_predicted_answer,
    extract_think,
    parse_generation,
    segment,
    token_count,
)
from .sampler import DecodeParams, GenerationRecord, ReplayBackend, SampleCache, Sampler, cache_key
from .verifier import AnswerForm, Verdict, equivalent, normalize, verify

__version__ = "0.1.0"
