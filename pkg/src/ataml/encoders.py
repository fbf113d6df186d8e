"""Token embedding plus the two sequence encoders (dilated causal TCN, BiLSTM)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import ContractViolation, ShapeError, Tensor, ops

log = logging.getLogger(__name__)

PAD = "<pad>"
OOV = "<unk>"
PAD_ID = 0
OOV_ID = 1


@dataclass
class EmbeddingTable:
    """Token -> row lookup. Row ``pad_row`` is all zeros."""

    vocab: dict
    matrix: np.ndarray
    pad_row: int = PAD_ID
    oov_row: int = OOV_ID

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.vocab):
            raise ShapeError(f"{len(self.vocab)} tokens but {self.matrix.shape[0]} embedding rows")
        self.matrix[self.pad_row] = 0.0

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.vocab)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.vocab.get(t, self.oov_row) for t in tokens]

    @classmethod
    def random(cls, tokens: Sequence[str], dim: int = 300, seed: int = 0, scale: float = 0.05):
        """Uniform(-scale, scale) rows; used when no pretrained file is available."""
        vocab = {PAD: PAD_ID, OOV: OOV_ID}
        for tok in tokens:
            if tok not in vocab:
                vocab[tok] = len(vocab)
        rng = np.random.default_rng(seed)
        matrix = rng.uniform(-scale, scale, size=(len(vocab), dim))
        return cls(vocab, matrix)


def load_embeddings(
    path: str | Path,
    restrict_to: Optional[set] = None,
    fallback_seed: int = 0,
) -> tuple[EmbeddingTable, int]:
    """Read GloVe-style text vectors: ``token f1 f2 ...`` per line.

    The dimension is taken from the first well-formed line.  Returns the table
    and the number of malformed lines skipped.  Tokens in ``restrict_to`` that
    are missing from the file get small random rows.
    """
    vocab = {PAD: PAD_ID, OOV: OOV_ID}
    rows: list[np.ndarray] = []
    dim = None
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                skipped += 1
                continue
            tok, vals = parts[0], parts[1:]
            try:
                vec = np.asarray([float(v) for v in vals], dtype=np.float64)
            except ValueError:
                skipped += 1
                continue
            if dim is None:
                dim = vec.size
            if vec.size != dim or tok in vocab:
                skipped += 1
                continue
            if restrict_to is not None and tok not in restrict_to:
                continue
            vocab[tok] = len(vocab)
            rows.append(vec)
    if dim is None:
        raise ValueError(f"no embedding vectors found in {path}")
    if skipped:
        log.warning("skipped %d malformed embedding lines in %s", skipped, path)
    rng = np.random.default_rng(fallback_seed)
    extra = []
    if restrict_to:
        for tok in sorted(restrict_to):
            if tok not in vocab:
                vocab[tok] = len(vocab)
                extra.append(rng.uniform(-0.05, 0.05, dim))
    special = [np.zeros(dim), rng.uniform(-0.05, 0.05, dim)]
    matrix = np.vstack(special + rows + extra)
    return EmbeddingTable(vocab, matrix), skipped


@dataclass
class StateSequence:
    """Batched encoder states (B, T, d) with a (B, T) mask of real tokens."""

    states: Tensor
    mask: np.ndarray

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def embed(token_ids: np.ndarray, table, pad_row: int = PAD_ID) -> StateSequence:
    """Gather embedding rows for a (B, T) or (T,) id array.

    ``table`` is an ndarray (frozen) or a Tensor (trainable).
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    matrix = table if isinstance(table, Tensor) else Tensor(np.asarray(table))
    n = matrix.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ContractViolation(f"token id out of range [0, {n})")
    mask = ids != pad_row
    out = ops.take(matrix, ids, axis=0)
    if not mask.all():
        out = ops.mul(out, Tensor(mask[..., None].astype(out.dtype)))
    return StateSequence(out, mask)


def _masked(x: Tensor, mask: np.ndarray) -> Tensor:
    if mask.all():
        return x
    return ops.mul(x, Tensor(mask[..., None].astype(x.dtype)))


# ---------------------------------------------------------------- TCN


@dataclass
class TcnConfig:
    layers: int = 2
    kernel_size: int = 3
    dilation: int = 3
    channels: int = 64
    leaky_slope: float = 0.01
    dropout_rate: float = 0.5
    residual: bool = True
    dilations: Optional[list] = None  # per-layer override

    def __post_init__(self):
        if self.kernel_size < 1 or self.dilation < 1 or self.layers < 1:
            raise ContractViolation("kernel_size, dilation and layers must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractViolation("dropout_rate must be in [0, 1)")
        if self.dilations is not None and len(self.dilations) != self.layers:
            raise ContractViolation("dilations must list one value per layer")

    def layer_dilations(self) -> list[int]:
        return list(self.dilations) if self.dilations else [self.dilation] * self.layers

    def receptive_field(self) -> int:
        return 1 + sum((self.kernel_size - 1) * d for d in self.layer_dilations())

    def blocks(self) -> list[list[int]]:
        """Layer indices grouped into residual blocks of two convolutions."""
        idx = list(range(self.layers))
        return [idx[i : i + 2] for i in range(0, self.layers, 2)]


def init_tcn(d_in: int, cfg: TcnConfig, rng: np.random.Generator, dtype=np.float64) -> dict:
    params = {}
    c_in = d_in
    for i in range(cfg.layers):
        fan_in = cfg.kernel_size * c_in
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(cfg.kernel_size, c_in, cfg.channels))
        params[f"tcn.conv{i}.w"] = w.astype(dtype)
        params[f"tcn.conv{i}.b"] = np.zeros(cfg.channels, dtype=dtype)
        c_in = cfg.channels
    if cfg.residual:
        c_in = d_in
        for bi, block in enumerate(cfg.blocks()):
            if c_in != cfg.channels:
                w = rng.normal(0.0, 1.0 / np.sqrt(c_in), size=(c_in, cfg.channels))
                params[f"tcn.proj{bi}.w"] = w.astype(dtype)
            c_in = cfg.channels
    return params


def tcn_forward(
    seq: StateSequence,
    params: Mapping[str, Tensor],
    cfg: TcnConfig,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> StateSequence:
    """Stacked dilated causal convolutions with leaky ReLU, dropout and residual blocks."""
    x = seq.states
    if x.shape[1] == 0:
        raise ContractViolation("empty sequence")
    if train_mode and cfg.dropout_rate > 0 and rng is None:
        raise ContractViolation("train_mode with dropout needs an rng")
    dil = cfg.layer_dilations()
    h = x
    for bi, block in enumerate(cfg.blocks()):
        block_in = h
        for i in block:
            w = params[f"tcn.conv{i}.w"]
            if w.shape[1] != h.shape[-1]:
                raise ShapeError(f"tcn layer {i} expects {w.shape[1]} channels, got {h.shape[-1]}")
            h = ops.add(ops.conv1d_causal(h, w, dil[i]), params[f"tcn.conv{i}.b"])
            h = ops.leaky_relu(h, cfg.leaky_slope)
            if train_mode:
                h = ops.dropout(h, cfg.dropout_rate, rng)
        if cfg.residual:
            proj = params.get(f"tcn.proj{bi}.w")
            skip = ops.matmul(block_in, proj) if proj is not None else block_in
            h = ops.leaky_relu(ops.add(h, skip), cfg.leaky_slope)
        h = _masked(h, seq.mask)
    return StateSequence(h, seq.mask)


# ---------------------------------------------------------------- BiLSTM


def init_bilstm(d_in: int, hidden: int, rng: np.random.Generator, dtype=np.float64) -> dict:
    params = {}
    for d in ("fw", "bw"):
        params[f"lstm.{d}.wx"] = rng.normal(0, 1 / np.sqrt(d_in), (d_in, 4 * hidden)).astype(dtype)
        params[f"lstm.{d}.wh"] = rng.normal(0, 1 / np.sqrt(hidden), (hidden, 4 * hidden)).astype(dtype)
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden : 2 * hidden] = 1.0  # forget gate
        params[f"lstm.{d}.b"] = b
    return params


def lstm_scan(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """Unidirectional LSTM over (B, T, d); gate order i, f, g, o."""
    bsz, steps, _ = x.shape
    hidden = wh.shape[0]
    xw = ops.add(ops.matmul(x, wx), b)
    h = Tensor(np.zeros((bsz, hidden), dtype=x.dtype))
    c = Tensor(np.zeros((bsz, hidden), dtype=x.dtype))
    outs = []
    for t in range(steps):
        z = ops.add(xw[:, t, :], ops.matmul(h, wh))
        i = ops.sigmoid(z[:, :hidden])
        f = ops.sigmoid(z[:, hidden : 2 * hidden])
        g = ops.tanh(z[:, 2 * hidden : 3 * hidden])
        o = ops.sigmoid(z[:, 3 * hidden :])
        c = ops.add(ops.mul(f, c), ops.mul(i, g))
        h = ops.mul(o, ops.tanh(c))
        outs.append(h)
    return ops.stack(outs, axis=1)


def _reverse_index(mask: np.ndarray) -> np.ndarray:
    """Flat gather index reversing each row's real prefix; pads stay in place."""
    bsz, steps = mask.shape
    idx = np.tile(np.arange(steps), (bsz, 1))
    for r, n in enumerate(mask.sum(axis=1)):
        idx[r, :n] = np.arange(n)[::-1]
    return idx + np.arange(bsz)[:, None] * steps


def bilstm_forward(
    seq: StateSequence,
    params: Mapping[str, Tensor],
    train_mode: bool = False,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> StateSequence:
    x = seq.states
    bsz, steps, d = x.shape
    if steps == 0:
        raise ContractViolation("empty sequence")
    if params["lstm.fw.wx"].shape[0] != d:
        raise ShapeError(f"lstm expects {params['lstm.fw.wx'].shape[0]} features, got {d}")
    fw = lstm_scan(x, params["lstm.fw.wx"], params["lstm.fw.wh"], params["lstm.fw.b"])
    rev = _reverse_index(seq.mask)
    x_rev = ops.take(ops.reshape(x, (bsz * steps, d)), rev, axis=0)
    bw = lstm_scan(x_rev, params["lstm.bw.wx"], params["lstm.bw.wh"], params["lstm.bw.b"])
    hidden = bw.shape[-1]
    bw = ops.take(ops.reshape(bw, (bsz * steps, hidden)), rev, axis=0)
    h = ops.concat([fw, bw], axis=-1)
    if train_mode and dropout_rate > 0:
        h = ops.dropout(h, dropout_rate, rng)
    return StateSequence(_masked(h, seq.mask), seq.mask)
