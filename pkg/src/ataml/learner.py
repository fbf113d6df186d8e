"""Feedforward attention over encoder states and the classification heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import ContractViolation, ShapeError, Tensor, ops
from .encoders import StateSequence

SOFTMAX = "softmax"
SIGMOID = "sigmoid"


@dataclass
class AttentionTrace:
    """Per-token attention scores exactly as produced by the forward pass."""

    tokens: list
    alphas: list
    label: object = None
    prediction: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.tokens) != len(self.alphas):
            raise ContractViolation("one alpha per token is required")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, record: dict) -> "AttentionTrace":
        return cls(
            tokens=list(record["tokens"]),
            alphas=list(record["alphas"]),
            label=record.get("label"),
            prediction=record.get("prediction"),
            meta=dict(record.get("meta", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def attend(seq: StateSequence, theta_att: Tensor) -> tuple[Tensor, Tensor]:
    """Document vectors and raw attention scores.

    alpha_t = theta_att . s_t (no normalisation over positions), the states are
    rescaled by alpha_t and averaged over the real (unmasked) positions.
    Returns c of shape (B, d) and alphas of shape (B, T); masked alphas are 0.
    """
    states = seq.states
    if theta_att.ndim != 1 or theta_att.shape[0] != states.shape[-1]:
        raise ShapeError(f"attention vector {theta_att.shape} vs state dim {states.shape[-1]}")
    counts = seq.mask.sum(axis=1)
    if np.any(counts == 0):
        raise ContractViolation("cannot attend over a fully masked sequence")
    alphas = ops.inner(states, theta_att)  # (B, T)
    weighted = ops.mul(states, ops.reshape(alphas, alphas.shape + (1,)))
    inv_t = Tensor((1.0 / counts).astype(states.dtype)[:, None])
    c = ops.mul(ops.sum(weighted, axis=1), inv_t)
    return c, alphas


def mean_pool(seq: StateSequence) -> Tensor:
    """Plain average of real positions; the no-attention variant."""
    counts = seq.mask.sum(axis=1)
    if np.any(counts == 0):
        raise ContractViolation("cannot pool a fully masked sequence")
    inv_t = Tensor((1.0 / counts).astype(seq.states.dtype)[:, None])
    return ops.mul(ops.sum(seq.states, axis=1), inv_t)


def logits(c: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if c.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"head shapes: c {c.shape}, W {w.shape}, b {b.shape}")
    return ops.add(ops.matmul(c, w), b)


def classify(c: Tensor, w: Tensor, b: Tensor, head_kind: str = SOFTMAX) -> Tensor:
    """Class probabilities: a simplex (softmax) or independent Bernoullis (sigmoid)."""
    z = logits(c, w, b)
    if head_kind == SOFTMAX:
        return ops.softmax(z, axis=-1)
    if head_kind == SIGMOID:
        return ops.sigmoid(z)
    raise ContractViolation(f"unknown head kind {head_kind!r}")


def loss(z: Tensor, labels: np.ndarray, head_kind: str = SOFTMAX) -> Tensor:
    """Cross-entropy from logits.

    softmax: labels are class indices (B,) or one-hot (B, N); mean over batch.
    sigmoid: labels are a binary (B, N) matrix; mean over batch and labels.
    """
    labels = np.asarray(labels)
    n = z.shape[-1]
    if head_kind == SOFTMAX:
        if labels.ndim == 1:
            if labels.size and (labels.min() < 0 or labels.max() >= n):
                raise ContractViolation(f"label index outside the {n} ways")
            onehot = np.eye(n, dtype=z.dtype)[labels]
        else:
            onehot = labels.astype(z.dtype)
        if onehot.shape != z.shape:
            raise ContractViolation(f"labels {onehot.shape} do not match predictions {z.shape}")
        return ops.softmax_cross_entropy(z, onehot)
    if head_kind == SIGMOID:
        if labels.shape != z.shape:
            raise ContractViolation(f"labels {labels.shape} do not match predictions {z.shape}")
        return ops.sigmoid_cross_entropy(z, labels.astype(z.dtype))
    raise ContractViolation(f"unknown head kind {head_kind!r}")


def predict_multilabel(probs, threshold: float = 0.5) -> list[set]:
    """Label j is on iff p_j > threshold (ties are negative)."""
    p = np.atleast_2d(probs.data if isinstance(probs, Tensor) else np.asarray(probs))
    return [set(np.flatnonzero(row > threshold).tolist()) for row in p]


def predict_single(z) -> np.ndarray:
    arr = z.data if isinstance(z, Tensor) else np.asarray(z)
    return np.argmax(arr, axis=-1)


def traces_from_batch(
    tokens: Sequence[Sequence[str]],
    alphas: np.ndarray,
    mask: np.ndarray,
    labels: Sequence,
    predictions: Sequence,
    meta: Optional[dict] = None,
) -> list[AttentionTrace]:
    """Build traces from forward-pass alphas without recomputing anything."""
    out = []
    for r, toks in enumerate(tokens):
        n = int(mask[r].sum())
        out.append(
            AttentionTrace(
                tokens=list(toks[:n]),
                alphas=[float(a) for a in alphas[r, :n]],
                label=labels[r],
                prediction=predictions[r],
                meta=dict(meta or {}),
            )
        )
    return out
