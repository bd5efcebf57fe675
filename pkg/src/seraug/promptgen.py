"""Emotional text generation: tuple enumeration, prompt templates, cleaning.

A generation run is the Cartesian product of narrative styles, scenarios,
emotion styles, and max-token buckets. Each tuple renders into a fixed
system/user prompt pair; raw model output then passes a deterministic
cleaning chain (quote strip, label strip, refusal filter, length filter,
case-insensitive dedupe) so regenerated corpora are reproducible.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, asdict

from .errors import ConfigError

SYSTEM_PROMPT = "You are a helpful assistant with human emotions and talking styles."

DIALOGUE_TEMPLATE = (
    "In the context of {scenario}, say something in first-person or second-person "
    "that expresses your feeling, or using the speaking style of {emotion}, as if "
    "you are talking to somebody. Do not write any explanations and just answer "
    "the question. What you say should be {length} length with no more than "
    "{max_tokens} words."
)

NARRATIVE_TEMPLATE = (
    "In the context of {scenario}, describe a third-person scene that conveys the "
    "emotion, or using the speaking style of {emotion}. Do not write any "
    "explanations and just answer the question. What you say should be {length} "
    "length with no more than {max_tokens} words."
)

NARRATIVE_STYLES = ("dialogue", "narrative")

# 24 scenario categories (YouTube/GigaSpeech taxonomy).
DEFAULT_SCENARIOS = (
    "arts",
    "autos and vehicles",
    "business",
    "comedy",
    "crime",
    "education",
    "entertainment",
    "film and animation",
    "gaming",
    "health and fitness",
    "history",
    "howto and style",
    "kids and family",
    "leisure",
    "music",
    "news and politics",
    "nonprofits and activism",
    "people and blogs",
    "pets and animals",
    "religion and spirituality",
    "science and technology",
    "society and culture",
    "sports",
    "travel and events",
)

# 11 expressive TTS styles plus plain "neutral".
DEFAULT_EMOTIONS = (
    "angry",
    "cheerful",
    "excited",
    "friendly",
    "hopeful",
    "sad",
    "shouting",
    "terrified",
    "unfriendly",
    "whispering",
    "embarrassed",
    "neutral",
)

DEFAULT_MAX_TOKENS = (10, 30, 50)
DEFAULT_LENGTH_LABELS = {10: "short", 30: "middle", 50: "long"}

REFUSAL_MARKERS = ("as an ai", "i cannot", "i'm sorry, but")

_QUOTE_PAIRS = (('"', '"'), ("'", "'"), ("“", "”"), ("‘", "’"))
_LABEL_PREFIX = re.compile(r"^(Response|Answer|Text)\s*:\s*")


@dataclass
class GenerationConfig:
    """The four generation axes plus per-tuple sample count."""

    narrative_styles: list[str] = field(default_factory=lambda: list(NARRATIVE_STYLES))
    scenarios: list[str] = field(default_factory=lambda: list(DEFAULT_SCENARIOS))
    emotions: list[str] = field(default_factory=lambda: list(DEFAULT_EMOTIONS))
    max_tokens: list[int] = field(default_factory=lambda: list(DEFAULT_MAX_TOKENS))
    samples_per_tuple: int = 4
    length_labels: dict[int, str] = field(
        default_factory=lambda: dict(DEFAULT_LENGTH_LABELS)
    )

    def validate(self) -> None:
        for name in ("narrative_styles", "scenarios", "emotions", "max_tokens"):
            values = getattr(self, name)
            if not values:
                raise ConfigError(f"generation.{name} must be non-empty")
            if len(set(values)) != len(values):
                raise ConfigError(f"generation.{name} contains duplicates")
        for style in self.narrative_styles:
            if style not in NARRATIVE_STYLES:
                raise ConfigError(f"unknown narrative style: {style!r}")
        for m in self.max_tokens:
            if not isinstance(m, int) or m <= 0:
                raise ConfigError(f"max_tokens values must be positive integers, got {m!r}")
            if m not in self.length_labels:
                raise ConfigError(f"max_tokens value {m} has no length label mapping")
        if self.samples_per_tuple < 1:
            raise ConfigError("samples_per_tuple must be >= 1")


@dataclass(frozen=True)
class GenerationTuple:
    narrative_style: str
    scenario: str
    emotion: str
    max_tokens: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class GeneratedText:
    """One raw model sample after cleaning: accepted (cleaned) or rejected."""

    tuple: GenerationTuple
    raw: str
    cleaned: str | None = None
    rejected_reason: str | None = None

    @property
    def accepted(self) -> bool:
        return self.cleaned is not None


@dataclass(frozen=True)
class AcceptedText:
    """A texts.jsonl row: the accepted utterance with its stable id."""

    id: str
    tuple: GenerationTuple
    text: str


def group_tuples(config: GenerationConfig) -> list[GenerationTuple]:
    """Enumerate the full Cartesian product in config-list order.

    Ordering is lexical over (narrative_style, scenario, emotion, max_tokens)
    with each axis iterated in its configured order, so corpus ids stay
    stable across runs.
    """
    config.validate()
    return [
        GenerationTuple(n, s, e, m)
        for n, s, e, m in itertools.product(
            config.narrative_styles,
            config.scenarios,
            config.emotions,
            config.max_tokens,
        )
    ]


def length2str(max_tokens: int, labels: dict[int, str] | None = None) -> str:
    """Map a max-token bucket to its textual length description."""
    labels = DEFAULT_LENGTH_LABELS if labels is None else labels
    try:
        return labels[max_tokens]
    except KeyError:
        raise ConfigError(f"no length label configured for max_tokens={max_tokens}") from None


def render_prompt(
    tup: GenerationTuple, labels: dict[int, str] | None = None
) -> tuple[str, str]:
    """Render the (system, user) prompt pair for one tuple.

    Pure function: the same tuple always yields byte-identical strings. The
    user message is whitespace-normalized (single spaces, no surrounding
    whitespace).
    """
    template = DIALOGUE_TEMPLATE if tup.narrative_style == "dialogue" else NARRATIVE_TEMPLATE
    user = template.format(
        scenario=tup.scenario,
        emotion=tup.emotion,
        length=length2str(tup.max_tokens, labels),
        max_tokens=tup.max_tokens,
    )
    return SYSTEM_PROMPT, _normalize_spaces(user)


def clean_text(raw: str, tup: GenerationTuple, seen: set[str]) -> GeneratedText:
    """Apply the cleaning chain to one raw sample.

    Rules, in order: trim whitespace; strip one matching pair of surrounding
    quotes; strip a leading "Response:/Answer:/Text:" label; reject refusals
    (case-insensitive marker substrings); reject texts with zero words or more
    than max_tokens whitespace-separated words; reject case-insensitive
    duplicates against `seen`. Accepted texts are added to `seen` (lowercased).
    Rejection is a value, never an exception.
    """
    text = raw.strip()
    for opener, closer in _QUOTE_PAIRS:
        if len(text) >= 2 and text.startswith(opener) and text.endswith(closer):
            text = text[1:-1].strip()
            break
    text = _LABEL_PREFIX.sub("", text).strip()

    lowered_raw = raw.lower()
    if any(marker in lowered_raw for marker in REFUSAL_MARKERS):
        return GeneratedText(tup, raw, rejected_reason="refusal")

    words = text.split()
    if not words:
        return GeneratedText(tup, raw, rejected_reason="empty")
    if len(words) > tup.max_tokens:
        return GeneratedText(tup, raw, rejected_reason="too_long")

    key = text.lower()
    if key in seen:
        return GeneratedText(tup, raw, rejected_reason="duplicate")
    seen.add(key)
    return GeneratedText(tup, raw, cleaned=text)


def tuple_slug(tup: GenerationTuple) -> str:
    """Stable id prefix for one tuple, e.g. ``dialogue-sports-angry-10``."""
    scenario = tup.scenario.replace(" ", "_")
    return f"{tup.narrative_style}-{scenario}-{tup.emotion}-{tup.max_tokens}"


def _normalize_spaces(s: str) -> str:
    return " ".join(s.split())
