"""Declarative run configuration: one YAML file, strict keys, CLI overrides.

Every experiment is a grid point over (strategy, ratio, repr_mode); keeping
the whole run in one file with flag overrides keeps those grids scriptable.
Unknown keys are rejected rather than ignored, and each run directory gets a
frozen JSON copy of the fully resolved config.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .promptgen import GenerationConfig
from .strategies import TrainPlan
from .synthesis import DEFAULT_VOICES, ClientConfig


@dataclass
class ChatSettings:
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    api_key_env_var: str = "OPENAI_API_KEY"
    max_concurrent: int = 4
    retry_limit: int = 3
    backoff_base: float = 0.5
    mock_mode: bool = True
    mock_seed: int | None = None  # falls back to the global seed
    model_name: str = "gpt-4"
    temperature: float = 1.0

    def client(self, default_seed: int) -> ClientConfig:
        return ClientConfig(
            endpoint_url=self.endpoint_url,
            api_key_env_var=self.api_key_env_var,
            max_concurrent=self.max_concurrent,
            retry_limit=self.retry_limit,
            backoff_base=self.backoff_base,
            mock_mode=self.mock_mode,
            mock_seed=self.mock_seed if self.mock_seed is not None else default_seed,
        )


@dataclass
class TtsSettings:
    endpoint_url: str = ""
    api_key_env_var: str = "AZURE_SPEECH_KEY"
    max_concurrent: int = 4
    retry_limit: int = 3
    backoff_base: float = 0.5
    mock_mode: bool = True
    mock_seed: int | None = None
    voices: list[str] = field(default_factory=lambda: list(DEFAULT_VOICES))

    def client(self, default_seed: int) -> ClientConfig:
        return ClientConfig(
            endpoint_url=self.endpoint_url,
            api_key_env_var=self.api_key_env_var,
            max_concurrent=self.max_concurrent,
            retry_limit=self.retry_limit,
            backoff_base=self.backoff_base,
            mock_mode=self.mock_mode,
            mock_seed=self.mock_seed if self.mock_seed is not None else default_seed,
        )


@dataclass
class BlobSettings:
    n_per_class: int = 25
    n_synthetic: int = 50
    dims: int = 12
    t_range: list[int] = field(default_factory=lambda: [10, 40])
    class_separation: float = 5.0
    noise_std: float = 1.0
    domain_shift: float = 3.0
    n_layers: int = 1


@dataclass
class CorpusSettings:
    manifest: str | None = None
    blob: BlobSettings = field(default_factory=BlobSettings)


@dataclass
class RunConfig:
    seed: int = 42
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    chat: ChatSettings = field(default_factory=ChatSettings)
    tts: TtsSettings = field(default_factory=TtsSettings)
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    train: TrainPlan = field(default_factory=TrainPlan)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str)


_SECTION_TYPES = {
    "generation": GenerationConfig,
    "chat": ChatSettings,
    "tts": TtsSettings,
    "corpus": CorpusSettings,
    "train": TrainPlan,
}


def load_config(path: str | Path | None) -> RunConfig:
    """Load a YAML config file; missing file fields keep their defaults."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must contain a mapping at the top level")
    return config_from_dict(data)


def config_from_dict(data: dict) -> RunConfig:
    known = {"seed"} | set(_SECTION_TYPES)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")

    cfg = RunConfig()
    if "seed" in data:
        cfg.seed = _expect_int(data["seed"], "seed")
    for name, cls in _SECTION_TYPES.items():
        if name in data:
            setattr(cfg, name, _build_section(cls, data[name], name))

    # The training seed follows the global seed unless the file pins one.
    if "train" not in data or "seed" not in (data.get("train") or {}):
        cfg.train.seed = cfg.seed
    cfg.generation.validate()
    return cfg


def _build_section(cls, data, section: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"config section {section!r} must be a mapping")
    field_map = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(field_map))
    if unknown:
        raise ConfigError(f"unknown keys in config section {section!r}: {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key == "blob":
            value = _build_section(BlobSettings, value, f"{section}.blob")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section {section!r}: {exc}") from exc


def _expect_int(value, name: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"config key {name!r} must be an integer")
    return value


def freeze_config(cfg: RunConfig, run_dir: str | Path) -> Path:
    """Write the resolved config into the run directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    target = run_dir / "config.json"
    target.write_text(cfg.to_json() + "\n", encoding="utf-8")
    return target
