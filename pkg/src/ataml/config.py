"""Experiment configuration: JSON files validated by pydantic, flags on top."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .encoders import TcnConfig
from .learner import SIGMOID, SOFTMAX
from .meta import MetaConfig
from .model import ModelConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSettings(_Strict):
    vocab_size: int = 100
    n_classes: int = 20
    phrase_len: int = 3
    docs_per_class: int = 20
    noise_rate: float = Field(1.0, ge=0.0, le=1.0)
    doc_len: tuple[int, int] = (12, 20)
    seed: int = 0


class CorpusSettings(_Strict):
    kind: Literal["synth", "jsonl"] = "synth"
    path: Optional[str] = None
    multi_label: bool = False
    max_len: int = Field(256, ge=1)
    per_class: int = Field(20, ge=2)
    train_per_class: int = Field(5, ge=1)
    split_seed: int = 0
    split_fractions: tuple[float, float, float] = (0.6, 0.15, 0.25)
    split_counts: Optional[tuple[int, int, int]] = None
    synth: SynthSettings = Field(default_factory=SynthSettings)

    @model_validator(mode="after")
    def _path_for_files(self):
        if self.kind == "jsonl" and not self.path:
            raise ValueError("corpus.path is required for a jsonl corpus")
        return self


class EmbeddingSettings(_Strict):
    path: Optional[str] = None
    dim: int = Field(300, ge=1)
    scale: float = Field(0.05, gt=0.0)
    seed: int = 0


class ModelSettings(_Strict):
    encoder: Literal["tcn", "bilstm", "none"] = "tcn"
    attention: bool = True
    channels: int = Field(64, ge=1)
    layers: int = Field(2, ge=1)
    kernel_size: int = Field(3, ge=1)
    dilation: int = Field(3, ge=1)
    leaky_slope: float = 0.01
    dropout: float = Field(0.5, ge=0.0, lt=1.0)
    residual: bool = True
    lstm_hidden: int = Field(128, ge=1)
    train_embeddings: bool = False


class MetaSettings(_Strict):
    algorithm: Literal["maml", "ataml", "pretrain", "random"] = "ataml"
    inner_steps: int = Field(5, ge=1)
    inner_lr: float = Field(0.1, gt=0.0)
    meta_lr: float = Field(1e-3, gt=0.0)
    meta_batch: int = Field(4, ge=1)
    first_order: bool = False
    clip_norm: float = Field(1.0, gt=0.0)
    freeze_attention_slow: bool = False
    test_steps: int = Field(25, ge=0)
    test_lr: Optional[float] = None
    iterations: int = Field(1000, ge=0)
    val_every: int = Field(10, ge=1)
    val_episodes: int = Field(20, ge=0)
    patience: int = Field(50, ge=1)
    finetune_dropout: bool = False


class EpisodeSettings(_Strict):
    way: int = Field(5, ge=1)
    shot: int = Field(1, ge=1)
    query_per_class: int = Field(15, ge=1)
    test_episodes: int = Field(100, ge=0)


class Variant(_Strict):
    """One row family of the comparison table."""

    name: str
    algorithm: Literal["maml", "ataml", "pretrain", "random"]
    encoder: Literal["tcn", "bilstm", "none"] = "tcn"
    attention: bool = True
    freeze_attention_slow: bool = False


class BenchSettings(_Strict):
    variants: list[Variant] = Field(default_factory=list)
    ways: list[int] = Field(default_factory=lambda: [5])
    shots: list[int] = Field(default_factory=lambda: [1])


class ExperimentConfig(_Strict):
    seed: int = 0
    corpus: CorpusSettings = Field(default_factory=CorpusSettings)
    embeddings: EmbeddingSettings = Field(default_factory=EmbeddingSettings)
    model: ModelSettings = Field(default_factory=ModelSettings)
    meta: MetaSettings = Field(default_factory=MetaSettings)
    episodes: EpisodeSettings = Field(default_factory=EpisodeSettings)
    bench: BenchSettings = Field(default_factory=BenchSettings)

    # -- derived objects ---------------------------------------------------
    @property
    def head(self) -> str:
        return SIGMOID if self.corpus.multi_label else SOFTMAX

    def model_config_(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            encoder=m.encoder,
            attention=m.attention,
            head=self.head,
            d_emb=self.embeddings.dim,
            tcn=TcnConfig(
                layers=m.layers,
                kernel_size=m.kernel_size,
                dilation=m.dilation,
                channels=m.channels,
                leaky_slope=m.leaky_slope,
                dropout_rate=m.dropout,
                residual=m.residual,
            ),
            lstm_hidden=m.lstm_hidden,
            train_embeddings=m.train_embeddings,
        )

    def meta_config(self) -> MetaConfig:
        s = self.meta
        return MetaConfig(
            algorithm=s.algorithm,
            inner_steps=s.inner_steps,
            inner_lr=s.inner_lr,
            meta_lr=s.meta_lr,
            meta_batch=s.meta_batch,
            first_order=s.first_order,
            clip_norm=s.clip_norm,
            freeze_attention_slow=s.freeze_attention_slow,
            test_steps=s.test_steps,
            test_lr=s.test_lr,
            val_every=s.val_every,
            val_episodes=s.val_episodes,
            patience=s.patience,
            finetune_dropout=s.finetune_dropout,
        )

    def with_variant(self, v: Variant, way: int, shot: int) -> "ExperimentConfig":
        data = self.model_dump()
        data["meta"].update(algorithm=v.algorithm, freeze_attention_slow=v.freeze_attention_slow)
        data["model"].update(encoder=v.encoder, attention=v.attention)
        data["episodes"].update(way=way, shot=shot)
        return ExperimentConfig.model_validate(data)

    # -- identity ----------------------------------------------------------
    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Hash of everything that shapes the trained weights.

        Episode settings, the seed and the bench grid are left out so a
        checkpoint can be evaluated on other way/shot settings or episode
        streams.  The fine-tune settings stay in because validation during
        training uses them to pick the saved weights.
        """
        d = self.model_dump(mode="json")
        core = {"corpus": d["corpus"], "embeddings": d["embeddings"], "model": d["model"], "meta": d["meta"]}
        blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class ConfigError(ValueError):
    pass


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Defaults, then the JSON file, then dotted-key ``overrides`` (flags)."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
