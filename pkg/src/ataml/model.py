"""Base learner assembly: embeddings -> encoder -> attention -> head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .autodiff import ContractViolation, Tensor
from .encoders import (
    PAD_ID,
    StateSequence,
    TcnConfig,
    bilstm_forward,
    embed,
    init_bilstm,
    init_tcn,
    tcn_forward,
)
from .learner import SIGMOID, SOFTMAX, attend, logits, mean_pool

TCN = "tcn"
BILSTM = "bilstm"
NONE = "none"

ATT_KEY = "att.theta"
HEAD_W = "head.w"
HEAD_B = "head.b"
EMB_KEY = "emb"


@dataclass
class ModelConfig:
    encoder: str = TCN
    attention: bool = True
    head: str = SOFTMAX
    d_emb: int = 300
    tcn: TcnConfig = field(default_factory=TcnConfig)
    lstm_hidden: int = 128
    lstm_dropout: float = 0.0
    train_embeddings: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.encoder not in (TCN, BILSTM, NONE):
            raise ContractViolation(f"unknown encoder {self.encoder!r}")
        if self.head not in (SOFTMAX, SIGMOID):
            raise ContractViolation(f"unknown head {self.head!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def state_dim(self) -> int:
        if self.encoder == TCN:
            return self.tcn.channels
        if self.encoder == BILSTM:
            return 2 * self.lstm_hidden
        return self.d_emb

    def label(self) -> str:
        base = {TCN: "TCN", BILSTM: "LSTM", NONE: "E"}[self.encoder]
        return f"{base} (A)" if self.attention else base


@dataclass
class PartitionedParams:
    """Shared encoder weights and task-specific attention/head weights."""

    shared: dict
    task_specific: dict

    def __post_init__(self):
        overlap = set(self.shared) & set(self.task_specific)
        if overlap:
            raise ContractViolation(f"parameters in both partitions: {sorted(overlap)}")
        self._shared_names = frozenset(self.shared)
        self._task_names = frozenset(self.task_specific)

    @property
    def shared_names(self) -> frozenset:
        return self._shared_names

    @property
    def task_names(self) -> frozenset:
        return self._task_names

    def all(self) -> dict:
        return {**self.shared, **self.task_specific}

    def partition_of(self, name: str) -> str:
        if name in self._shared_names:
            return "shared"
        if name in self._task_names:
            return "task"
        raise KeyError(name)

    def copy(self) -> "PartitionedParams":
        return PartitionedParams(
            {k: v.copy(requires_grad=True) for k, v in self.shared.items()},
            {k: v.copy(requires_grad=True) for k, v in self.task_specific.items()},
        )

    def arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.all().items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, v in self.all().items():
            v.data = np.array(arrays[k], dtype=v.dtype, copy=True)

    def replace(self, name: str, tensor: Tensor) -> None:
        if name in self._shared_names:
            self.shared[name] = tensor
        elif name in self._task_names:
            self.task_specific[name] = tensor
        else:
            raise KeyError(name)


class Model:
    """Stateless forward functions over an explicit parameter mapping."""

    def __init__(self, cfg: ModelConfig, embeddings: np.ndarray):
        if embeddings.shape[1] != cfg.d_emb:
            raise ContractViolation(f"embedding dim {embeddings.shape[1]} != configured d_emb {cfg.d_emb}")
        self.cfg = cfg
        self.embeddings = np.asarray(embeddings, dtype=cfg.np_dtype)
        self.embeddings[PAD_ID] = 0.0

    # -- parameters ----------------------------------------------------
    def init_task_params(self, n_way: int, rng: np.random.Generator) -> dict:
        d = self.cfg.state_dim()
        dt = self.cfg.np_dtype
        out = {
            HEAD_W: Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, n_way)).astype(dt), requires_grad=True),
            HEAD_B: Tensor(np.zeros(n_way, dtype=dt), requires_grad=True),
        }
        if self.cfg.attention:
            out[ATT_KEY] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), d).astype(dt), requires_grad=True)
        return out

    def init_params(self, n_way: int, rng: np.random.Generator) -> PartitionedParams:
        cfg = self.cfg
        dt = cfg.np_dtype
        shared: dict = {}
        if cfg.train_embeddings:
            shared[EMB_KEY] = Tensor(self.embeddings.copy(), requires_grad=True)
        if cfg.encoder == TCN:
            raw = init_tcn(cfg.d_emb, cfg.tcn, rng, dt)
        elif cfg.encoder == BILSTM:
            raw = init_bilstm(cfg.d_emb, cfg.lstm_hidden, rng, dt)
        else:
            raw = {}
        shared.update({k: Tensor(v, requires_grad=True) for k, v in raw.items()})
        return PartitionedParams(shared, self.init_task_params(n_way, rng))

    # -- forward -------------------------------------------------------
    def encode(
        self,
        params: Mapping[str, Tensor],
        ids: np.ndarray,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> StateSequence:
        table = params.get(EMB_KEY, self.embeddings)
        seq = embed(ids, table)
        if self.cfg.encoder == TCN:
            return tcn_forward(seq, params, self.cfg.tcn, train, rng)
        if self.cfg.encoder == BILSTM:
            return bilstm_forward(seq, params, train, self.cfg.lstm_dropout, rng)
        return seq

    def head(self, params: Mapping[str, Tensor], seq: StateSequence):
        """Logits (B, N) and raw attention scores (B, T) or None."""
        if self.cfg.attention:
            c, alphas = attend(seq, params[ATT_KEY])
        else:
            c, alphas = mean_pool(seq), None
        return logits(c, params[HEAD_W], params[HEAD_B]), alphas

    def forward(self, params, ids, train: bool = False, rng=None):
        return self.head(params, self.encode(params, ids, train, rng))
