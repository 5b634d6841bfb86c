"""Run configuration: one JSON file validated with pydantic.

Unknown keys are rejected at every level so typos fail loudly. Relative
paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .evaluation import Method
from .gateway import ConfigurationError
from .qa import QuestionType
from .serde import parse_time


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SourceConfig(_Strict):
    kind: Literal["local", "atom"] = "local"
    path: Optional[str] = None
    endpoint: Optional[str] = None
    max_results: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _needs_path(self) -> "SourceConfig":
        if self.kind == "local" and not self.path:
            raise ValueError("a local source needs 'path'")
        return self


class SelectionConfig(_Strict):
    categories: list[str] = Field(min_length=1)
    window: tuple[str, str]
    keywords: list[str] = Field(default_factory=list)
    keyword_scope: Literal["full_text", "title"] = "full_text"
    source: SourceConfig

    @field_validator("window")
    @classmethod
    def _window_order(cls, v: tuple[str, str]) -> tuple[str, str]:
        start, end = (parse_time(x) for x in v)
        if start > end:
            raise ValueError("window start is after window end")
        return v


class BackendConfig(_Strict):
    kind: Literal["mock", "http"] = "mock"
    script: Optional[str] = None
    responders: Optional[Literal["synthetic"]] = None
    base_url: Optional[str] = None
    api_key_env: str = "MODEL_API_KEY"
    chat_model: Optional[str] = None
    embed_model: Optional[str] = None
    timeout: float = Field(default=60.0, gt=0)
    max_attempts: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def _http_fields(self) -> "BackendConfig":
        if self.kind == "http" and not self.chat_model:
            raise ValueError("an http backend needs 'chat_model'")
        return self


class AlignmentConfig(_Strict):
    tau: float = Field(default=0.85, gt=0, le=1)
    normalize_threshold: float = Field(default=0.6, ge=0, le=1)


class HNSWConfig(_Strict):
    m: int = Field(default=16, ge=2)
    ef_construction: int = Field(default=200, ge=1)
    ef_search: int = Field(default=100, ge=1)


class ChunkConfig(_Strict):
    limit: int = Field(default=1000, ge=1)
    overlap: int = Field(default=100, ge=0)

    @model_validator(mode="after")
    def _overlap_below_limit(self) -> "ChunkConfig":
        if self.overlap >= self.limit:
            raise ValueError("overlap must be smaller than limit")
        return self


class GenerationConfig(_Strict):
    targets: dict[str, int]
    k_range: tuple[int, int] = (1, 3)
    degree_percentile: float = Field(default=0.9, gt=0, lt=1)
    max_attempts: int = Field(default=1000, ge=1)
    exemplars: int = Field(default=2, ge=1)

    @field_validator("targets")
    @classmethod
    def _known_types(cls, v: dict[str, int]) -> dict[str, int]:
        for name, n in v.items():
            QuestionType(name)
            if n < 0:
                raise ValueError(f"target for {name} is negative")
        return v


class QCConfig(_Strict):
    dedup_threshold: float = Field(default=0.92, gt=0, le=1)


class EvaluationConfig(_Strict):
    methods: list[str] = Field(default_factory=lambda: ["IO", "CoT", "SC", "RAG", "OneHopKG", "RagPlusOneHopKG"])
    runs: int = Field(default=5, ge=1)
    top_k: int = Field(default=3, ge=1)
    sc_samples: int = Field(default=5, ge=3)
    sc_temperature: float = Field(default=0.7, ge=0)
    recovery_threshold: float = Field(default=0.75, gt=0, le=1)

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, v: list[str]) -> list[str]:
        for name in v:
            Method(name)
        if len(set(v)) != len(v):
            raise ValueError("duplicate method names")
        return v

    @field_validator("sc_samples")
    @classmethod
    def _odd_samples(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("sc_samples must be odd")
        return v


class SeedsConfig(_Strict):
    # no defaults: every stochastic stage must be seeded explicitly
    sampling: int
    hnsw: int


class ForgeConfig(_Strict):
    domain_id: str = Field(min_length=1)
    selection: SelectionConfig
    backend: BackendConfig = BackendConfig()
    schema_path: str = Field(alias="schema")
    facts: Optional[str] = None
    alignment: AlignmentConfig = AlignmentConfig()
    hnsw: HNSWConfig = HNSWConfig()
    chunk: ChunkConfig = ChunkConfig()
    generation: GenerationConfig
    qc: QCConfig = QCConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    seeds: SeedsConfig
    out: str = "forge-out"
    base_dir: str = Field(default=".", exclude=True)

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.out)

    def base_url(self) -> str:
        url = self.backend.base_url or os.environ.get("MODEL_BASE_URL", "")
        if self.backend.kind == "http" and not url:
            raise ConfigurationError("http backend needs 'base_url' or MODEL_BASE_URL")
        return url

    def api_key(self) -> str:
        key = os.environ.get(self.backend.api_key_env, "")
        if self.backend.kind == "http" and not key:
            raise ConfigurationError(f"environment variable {self.backend.api_key_env} is not set")
        return key


def load_config(path: str | Path) -> ForgeConfig:
    """Read and validate ``path``; raises :class:`ConfigurationError` with every problem listed."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    data["base_dir"] = str(path.resolve().parent)
    try:
        return ForgeConfig.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise ConfigurationError(f"{path}: {problems}") from None
