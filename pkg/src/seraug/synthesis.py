"""Chat-completion and emotional-TTS clients, each with an offline mock.

Live mode talks JSON to a chat-completions endpoint and posts SSML documents
to a TTS endpoint, with bounded concurrency and exponential-backoff retries.
Mock mode is a pure function of (mock_seed, inputs) so the entire pipeline
runs offline and byte-reproducibly; no API is required for tests or CI.
"""

from __future__ import annotations

import os
import re
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import requests

from .errors import ConfigError, DataError, TransportError
from .promptgen import AcceptedText
from .utils import derive_rng

# Default voice slots: 5 female + 4 male timbres. Opaque identifiers; no
# gender logic exists in code.
DEFAULT_VOICES = (
    "en-US-AriaNeural",
    "en-US-JennyNeural",
    "en-US-SaraNeural",
    "en-US-NancyNeural",
    "en-US-JaneNeural",
    "en-US-GuyNeural",
    "en-US-DavisNeural",
    "en-US-TonyNeural",
    "en-US-JasonNeural",
)

SSML_TEMPLATE = (
    '<speak version="1.0" xmlns="http://www.w3.org/2001/10/synthesis" '
    'xmlns:mstts="https://www.w3.org/2001/mstts" xml:lang="en-US">'
    '<voice name="{voice}"><mstts:express-as style="{style}">'
    "{text}</mstts:express-as></voice></speak>"
)

# Vocabulary for mock chat output; free of refusal markers.
_MOCK_WORDS = (
    "the", "a", "day", "feels", "so", "bright", "heavy", "quiet", "loud",
    "heart", "voice", "still", "warm", "cold", "fast", "slow", "again",
    "never", "always", "maybe", "really", "truly", "now", "here", "gone",
    "close", "far", "soft", "sharp", "wild", "calm", "deep",
)

_MAX_WORDS_RE = re.compile(r"no more than (\d+) words")
_CONTROL_CHARS = re.compile(r"[\x00-\x1f\x7f]")

MOCK_WAV_SECONDS = 1
MOCK_WAV_RATE = 16000


@dataclass
class ChatRequest:
    system: str
    user: str
    n_samples: int = 1
    temperature: float = 1.0
    model_name: str = "gpt-4"

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if not (self.temperature >= 0 and self.temperature == self.temperature):
            raise ConfigError("temperature must be finite and >= 0")


@dataclass(frozen=True)
class SynthesisJob:
    id: str
    text: str
    speaker_voice: str
    style: str
    output_path: str


@dataclass
class ClientConfig:
    endpoint_url: str = ""
    api_key_env_var: str = "SERAUG_API_KEY"
    max_concurrent: int = 4
    retry_limit: int = 3
    backoff_base: float = 0.5
    mock_mode: bool = True
    mock_seed: int = 0
    extra_headers: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if self.max_concurrent < 1:
            raise ConfigError("max_concurrent must be >= 1")
        if self.retry_limit < 0:
            raise ConfigError("retry_limit must be >= 0")
        if self.backoff_base <= 0:
            raise ConfigError("backoff_base must be > 0")

    def api_key(self) -> str:
        key = os.environ.get(self.api_key_env_var, "")
        if not key:
            raise ConfigError(
                f"live mode requires the API key env var {self.api_key_env_var} to be set"
            )
        return key


def chat_sample(req: ChatRequest, cfg: ClientConfig) -> list[str]:
    """Return n_samples message strings for one prompt pair.

    Mock mode synthesizes a deterministic pseudo-sentence per sample index:
    min(max-words-implied-by-prompt, 8) words drawn from a fixed vocabulary,
    seeded by (mock_seed, user, i). Live mode posts a chat-completions JSON
    request and retries transient failures with exponential backoff.
    """
    req.validate()
    cfg.validate()
    if cfg.mock_mode:
        return [_mock_chat_text(cfg.mock_seed, req.user, i) for i in range(req.n_samples)]

    headers = {
        "Authorization": f"Bearer {cfg.api_key()}",
        "Content-Type": "application/json",
    }
    headers.update(cfg.extra_headers)
    payload = {
        "model": req.model_name,
        "messages": [
            {"role": "system", "content": req.system},
            {"role": "user", "content": req.user},
        ],
        "n": req.n_samples,
        "temperature": req.temperature,
    }
    resp = _post_with_retry(cfg, json=payload, headers=headers)
    try:
        choices = resp.json()["choices"]
        return [c["message"]["content"] for c in choices]
    except (KeyError, TypeError, ValueError) as exc:
        raise TransportError(f"malformed chat response: {exc}", resp.status_code) from exc


def build_ssml(job: SynthesisJob) -> str:
    """Build the SSML document for one job, bit-exact per the frozen template."""
    if not job.text:
        raise DataError("synthesis text must be non-empty")
    if _CONTROL_CHARS.search(job.text):
        raise DataError(f"synthesis text for job {job.id!r} contains control characters")
    return SSML_TEMPLATE.format(
        voice=job.speaker_voice, style=job.style, text=escape(job.text)
    )


def tts_synthesize(job: SynthesisJob, cfg: ClientConfig) -> int:
    """Synthesize one job to job.output_path; returns the byte count written.

    Mock mode writes one second of 16-bit 16 kHz mono silence as a RIFF file
    (44-byte header + 32000 payload bytes). Live mode posts the SSML document
    and writes the returned audio bytes verbatim.
    """
    ssml = build_ssml(job)
    cfg.validate()
    out = Path(job.output_path)
    out.parent.mkdir(parents=True, exist_ok=True)

    if cfg.mock_mode:
        data = _silence_wav(MOCK_WAV_SECONDS, MOCK_WAV_RATE)
    else:
        headers = {
            "Content-Type": "application/ssml+xml",
            "Ocp-Apim-Subscription-Key": cfg.api_key(),
        }
        headers.update(cfg.extra_headers)
        resp = _post_with_retry(cfg, data=ssml.encode("utf-8"), headers=headers)
        data = resp.content

    try:
        out.write_bytes(data)
    except OSError as exc:
        raise DataError(f"cannot write audio file {out}: {exc}") from exc
    return len(data)


def plan_jobs(
    texts: list[AcceptedText],
    voices: list[str],
    styles: list[str],
    out_dir: str | Path = "audio",
) -> list[SynthesisJob]:
    """Plan one job per (text, voice) pair, styles congruent with text emotion.

    Jobs come out in (text, voice) order with both lists iterated as given.
    A text whose emotion is not an available style is a validation error:
    emotion congruence between text and speech is enforced here.
    """
    if not texts or not voices or not styles:
        raise DataError("texts, voices and styles must all be non-empty")
    out_dir = Path(out_dir)
    jobs = []
    for text in texts:
        style = text.tuple.emotion
        if style not in styles:
            raise DataError(f"text {text.id!r} emotion {style!r} not in configured styles")
        for voice in voices:
            job_id = f"{text.id}__{voice}"
            jobs.append(
                SynthesisJob(
                    id=job_id,
                    text=text.text,
                    speaker_voice=voice,
                    style=style,
                    output_path=str(out_dir / f"{job_id}.wav"),
                )
            )
    return jobs


def run_jobs(
    jobs: list[SynthesisJob],
    cfg: ClientConfig,
    skip_ids: set[str] | None = None,
) -> list[dict]:
    """Execute jobs with at most cfg.max_concurrent in flight.

    Jobs whose id is in `skip_ids` are not re-synthesized (idempotent rerun).
    Returns one manifest row per executed job, in job order.
    """
    skip_ids = skip_ids or set()
    todo = [j for j in jobs if j.id not in skip_ids]
    if not todo:
        return []
    with ThreadPoolExecutor(max_workers=cfg.max_concurrent) as pool:
        sizes = list(pool.map(lambda j: tts_synthesize(j, cfg), todo))
    return [
        {
            "id": job.id,
            "text": job.text,
            "voice": job.speaker_voice,
            "style": job.style,
            "output_path": job.output_path,
            "bytes": size,
        }
        for job, size in zip(todo, sizes)
    ]


def _mock_chat_text(mock_seed: int, user: str, index: int) -> str:
    match = _MAX_WORDS_RE.search(user)
    max_words = int(match.group(1)) if match else 8
    n_words = min(max_words, 8)
    rng = derive_rng(mock_seed, user, index)
    words = [rng.choice(_MOCK_WORDS) for _ in range(n_words)]
    sentence = " ".join(words)
    return sentence[0].upper() + sentence[1:] + "."


def _silence_wav(seconds: int, rate: int) -> bytes:
    """Canonical 44-byte RIFF/WAVE header plus 16-bit mono silence."""
    n_samples = seconds * rate
    payload = n_samples * 2
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + payload, b"WAVE",
        b"fmt ", 16, 1, 1, rate, rate * 2, 2, 16,
        b"data", payload,
    )
    return header + b"\x00" * payload


def _post_with_retry(cfg: ClientConfig, **kwargs) -> requests.Response:
    """POST cfg.endpoint_url, retrying 429/5xx and connection errors."""
    last_status: int | None = None
    last_error = "no attempt made"
    for attempt in range(cfg.retry_limit + 1):
        try:
            resp = requests.post(cfg.endpoint_url, timeout=60, **kwargs)
        except requests.RequestException as exc:
            last_error = f"connection error: {exc}"
        else:
            if resp.status_code < 400:
                return resp
            last_status = resp.status_code
            last_error = f"HTTP {resp.status_code}"
            if resp.status_code != 429 and resp.status_code < 500:
                break
        if attempt < cfg.retry_limit:
            time.sleep(cfg.backoff_base * (2**attempt))
    raise TransportError(
        f"request to {cfg.endpoint_url} failed after retries: {last_error}", last_status
    )
