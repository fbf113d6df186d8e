"""MAML and ATAML meta-training, baselines and meta-test fine-tuning."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .autodiff import (
    AdamState,
    ContractViolation,
    Tape,
    Tensor,
    adam_step,
    backward_through_backward,
    clip_global_norm,
    global_norm_value,
    grad,
    no_grad,
    ops,
)
from .encoders import StateSequence
from .learner import SIGMOID, predict_multilabel, predict_single
from .learner import loss as head_loss
from .metrics import ConfusionCounts, accuracy, macro_f1, micro_f1
from .model import ATT_KEY, Model, PartitionedParams
from .tasks import Episode, pad_batch

log = logging.getLogger(__name__)

MAML = "maml"
ATAML = "ataml"
PRETRAIN = "pretrain"
RANDOM = "random"
ALGORITHMS = (MAML, ATAML, PRETRAIN, RANDOM)


@dataclass
class MetaConfig:
    algorithm: str = ATAML
    inner_steps: int = 5
    inner_lr: float = 0.1
    meta_lr: float = 1e-3
    meta_batch: int = 4
    first_order: bool = False
    clip_norm: float = 1.0
    freeze_attention_slow: bool = False
    test_steps: int = 25
    test_lr: Optional[float] = None
    val_every: int = 10
    val_episodes: int = 20
    patience: int = 50
    finetune_dropout: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ContractViolation(f"unknown algorithm {self.algorithm!r}")
        if self.inner_steps < 1:
            raise ContractViolation("inner_steps must be >= 1")
        if self.inner_lr <= 0 or self.meta_lr <= 0:
            raise ContractViolation("learning rates must be positive")
        if self.meta_batch < 1:
            raise ContractViolation("meta_batch must be >= 1")

    @property
    def fine_tune_lr(self) -> float:
        return self.test_lr if self.test_lr is not None else self.inner_lr

    @property
    def adapts_shared(self) -> bool:
        """Whether task adaptation touches the shared encoder weights."""
        return self.algorithm != ATAML


@dataclass
class AdaptedParams:
    fast: dict  # name -> Tensor, full parameter mapping for the forward pass
    episode: str
    steps: int
    support_losses: list = field(default_factory=list)


class NonFiniteGradient(FloatingPointError):
    pass


def _labels(episode: Episode, which: str) -> np.ndarray:
    return episode.support_labels if which == "support" else episode.query_labels


def _head_kind(model: Model) -> str:
    return model.cfg.head


# ---------------------------------------------------------------- inner loop


def _encode_episode(model, params, episode, train, rng):
    """Shared-encoder states for support and query in one batched pass."""
    docs = list(episode.support) + list(episode.query)
    seq = model.encode(params, pad_batch(docs), train, rng)
    ns = len(episode.support)
    sup = StateSequence(ops.index(seq.states, slice(0, ns)), seq.mask[:ns])
    qry = StateSequence(ops.index(seq.states, slice(ns, None)), seq.mask[ns:])
    return sup, qry


def inner_adapt(
    model: Model,
    params: PartitionedParams,
    episode: Episode,
    cfg: MetaConfig,
    rng: np.random.Generator,
    differentiable: bool = True,
    steps: Optional[int] = None,
    lr: Optional[float] = None,
    adapt_shared: Optional[bool] = None,
    support_states: Optional[StateSequence] = None,
    train: bool = True,
) -> AdaptedParams:
    """Plain gradient descent on the support loss, starting from ``params``.

    MAML-style adaptation updates every parameter; ATAML-style adaptation
    updates only the task-specific ones and reads the shared ones unchanged.
    With ``differentiable`` the updates are recorded so a later loss can be
    differentiated back to the slow weights (detached in first-order mode).
    Without it, adaptation works on detached copies.  ``train`` switches
    encoder dropout on for the support passes.
    """
    if not episode.support:
        raise ContractViolation("empty support set")
    steps = cfg.inner_steps if steps is None else steps
    lr = cfg.inner_lr if lr is None else lr
    adapt_shared = cfg.adapts_shared if adapt_shared is None else adapt_shared
    names = sorted(params.all()) if adapt_shared else sorted(params.task_names)
    labels = episode.support_labels
    kind = _head_kind(model)

    if differentiable:
        fast = params.all()
        create_graph = not cfg.first_order
    else:
        fast = {k: Tensor(v.data.copy(), requires_grad=k in names) for k, v in params.all().items()}
        create_graph = False

    ids = pad_batch(episode.support)
    if not adapt_shared and support_states is None:
        support_states = model.encode(fast, ids, train, rng)
    losses = []
    for _ in range(steps):
        seq = support_states if not adapt_shared else model.encode(fast, ids, train, rng)
        z, _ = model.head(fast, seq)
        loss = head_loss(z, labels, kind)
        losses.append(float(loss.data))
        targets = {k: fast[k] for k in names}
        g = grad(loss, targets, create_graph=create_graph)
        if differentiable:
            for k in names:
                fast[k] = ops.sub(fast[k], ops.scale(g[k], lr))
        else:
            for k in names:
                fast[k] = Tensor(fast[k].data - lr * g[k].data, requires_grad=True)
    return AdaptedParams(fast, episode.uid, steps, losses)


def meta_episode_loss(
    model: Model,
    params: PartitionedParams,
    episodes: Sequence[Episode],
    cfg: MetaConfig,
    rng: np.random.Generator,
) -> tuple[Tensor, list]:
    """Sum over tasks of the query loss under adapted weights."""
    if not episodes:
        raise ContractViolation("at least one episode is required")
    kind = _head_kind(model)
    total = None
    details = []
    for ep in episodes:
        if not ep.query:
            raise ContractViolation(f"episode {ep.uid!r} has an empty query set")
        if cfg.adapts_shared:
            adapted = inner_adapt(model, params, ep, cfg, rng)
            qseq = model.encode(adapted.fast, pad_batch(ep.query), True, rng)
        else:
            sup, qseq = _encode_episode(model, params.all(), ep, True, rng)
            adapted = inner_adapt(model, params, ep, cfg, rng, support_states=sup)
        z, _ = model.head(adapted.fast, qseq)
        lq = head_loss(z, ep.query_labels, kind)
        details.append(adapted)
        total = lq if total is None else ops.add(total, lq)
    return total, details


@dataclass
class StepInfo:
    loss: float
    grad_norm: float
    tape_nodes: int


def meta_targets(params: PartitionedParams, cfg: MetaConfig) -> dict:
    targets = params.all()
    if cfg.freeze_attention_slow:
        targets.pop(ATT_KEY, None)
    return targets


def _check_finite(grads: Mapping[str, Tensor]) -> None:
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name].data)):
            raise NonFiniteGradient(f"non-finite meta-gradient in parameter {name!r}")


def meta_step(
    model: Model,
    params: PartitionedParams,
    episodes: Sequence[Episode],
    cfg: MetaConfig,
    opt_state: AdamState,
    rng: np.random.Generator,
) -> StepInfo:
    """One outer update: meta-gradient, global-norm clip, Adam (in place)."""
    with Tape() as tape:
        lmeta, _ = meta_episode_loss(model, params, episodes, cfg, rng)
        targets = meta_targets(params, cfg)
        grads = backward_through_backward(lmeta, targets)
        n_nodes = len(tape)
    _check_finite(grads)
    norm = global_norm_value(grads)
    with no_grad():
        grads = clip_global_norm(grads, cfg.clip_norm)
    adam_step(targets, grads, opt_state, cfg.meta_lr)
    return StepInfo(float(lmeta.data), norm, n_nodes)


# ---------------------------------------------------------------- evaluation


@dataclass
class EpisodeResult:
    uid: str
    way: int
    shot: int
    accuracy: Optional[float]
    micro_f1: float
    macro_f1: float
    counts: ConfusionCounts
    predictions: list
    gold: list
    alphas: Optional[np.ndarray]
    mask: np.ndarray
    support_losses: list

    def metric(self, name: str) -> float:
        return {"accuracy": self.accuracy, "micro_f1": self.micro_f1, "macro_f1": self.macro_f1}[name]


def evaluate_query(model: Model, fast: Mapping[str, Tensor], episode: Episode, uid: str = "", losses=None) -> EpisodeResult:
    with no_grad():
        z, alphas = model.forward(fast, pad_batch(episode.query), train=False)
    mask = pad_batch(episode.query) != 0
    n = episode.way
    if model.cfg.head == SIGMOID:
        probs = 1.0 / (1.0 + np.exp(-z.data))
        pred_sets = predict_multilabel(probs)
        gold = np.asarray(episode.query_labels)
        gold_sets = [set(np.flatnonzero(r > 0.5).tolist()) for r in gold]
        counts = ConfusionCounts.from_sets(pred_sets, gold_sets, n)
        preds = [sorted(p) for p in pred_sets]
        gold_out = [sorted(g) for g in gold_sets]
        acc = None
    else:
        pred = predict_single(z)
        gold = np.asarray(episode.query_labels)
        counts = ConfusionCounts.from_single(pred, gold, n)
        acc = accuracy(pred, gold)
        preds, gold_out = pred.tolist(), gold.tolist()
    return EpisodeResult(
        uid or episode.uid,
        episode.way,
        episode.shot,
        acc,
        micro_f1(counts),
        macro_f1(counts),
        counts,
        preds,
        gold_out,
        None if alphas is None else alphas.data.copy(),
        mask,
        list(losses or []),
    )


def meta_test(
    model: Model,
    params: PartitionedParams,
    episode: Episode,
    cfg: MetaConfig,
    rng: np.random.Generator,
    steps: Optional[int] = None,
    reinit_task: bool = False,
) -> EpisodeResult:
    """Fine-tune a copy on the support set, then score the query set.

    ATAML fine-tunes only the task-specific weights with the encoder frozen;
    every other algorithm fine-tunes all weights.  ``params`` is never mutated.
    """
    steps = cfg.test_steps if steps is None else steps
    start = params
    if reinit_task or any(v.shape[-1] != episode.way for k, v in params.task_specific.items() if k.startswith("head.")):
        start = PartitionedParams(dict(params.shared), model.init_task_params(episode.way, rng))
    adapt_shared = cfg.algorithm != ATAML
    if steps == 0:
        fast = {k: Tensor(v.data.copy()) for k, v in start.all().items()}
        return evaluate_query(model, fast, episode)
    adapted = inner_adapt(
        model,
        start,
        episode,
        cfg,
        rng,
        differentiable=False,
        steps=steps,
        lr=cfg.fine_tune_lr,
        adapt_shared=adapt_shared,
        train=cfg.finetune_dropout,
    )
    return evaluate_query(model, adapted.fast, episode, losses=adapted.support_losses)


def validation_metric(results: Sequence[EpisodeResult], multi_label: bool) -> float:
    if multi_label:
        return float(np.mean([r.micro_f1 for r in results]))
    return float(np.mean([r.accuracy for r in results]))


# ---------------------------------------------------------------- training loops


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (iteration, L_meta, val_metric, wallclock_ms)
    best_iteration: int = 0
    best_metric: float = float("-inf")
    stopped_early: bool = False

    def append(self, iteration, loss, val, ms):
        self.rows.append((iteration, loss, val, ms))


def _run_validation(model, params, val_episodes, cfg, seed):
    rng = np.random.default_rng(seed)
    res = [meta_test(model, params, ep, cfg, rng) for ep in val_episodes]
    multi = bool(val_episodes and val_episodes[0].multi_label)
    return validation_metric(res, multi)


def meta_train(
    model: Model,
    params: PartitionedParams,
    episodes: Iterable[Episode],
    cfg: MetaConfig,
    budget: int,
    rng: np.random.Generator,
    val_episodes: Optional[Sequence[Episode]] = None,
    val_seed: int = 0,
    on_best: Optional[Callable[[int, PartitionedParams], None]] = None,
    opt_state: Optional[AdamState] = None,
    start_iteration: int = 0,
) -> tuple[PartitionedParams, TrainLog]:
    """Sample S tasks, take a meta step, repeat; keep the best validated weights.

    PRETRAIN and RANDOM are dispatched to their own procedures.
    """
    if cfg.algorithm == RANDOM:
        return params, TrainLog()
    if cfg.algorithm == PRETRAIN:
        return pretrain_baseline(model, params, episodes, cfg, budget, rng)
    trainlog = TrainLog()
    if budget <= 0:
        return params, trainlog
    opt_state = opt_state or AdamState()
    it_source = iter(episodes)
    best = params.arrays()
    since_best = 0
    if val_episodes:
        trainlog.best_metric = _run_validation(model, params, val_episodes, cfg, val_seed)
        trainlog.best_iteration = start_iteration
        trainlog.append(start_iteration, float("nan"), trainlog.best_metric, 0.0)
    t0 = time.perf_counter()
    for it in range(start_iteration + 1, start_iteration + budget + 1):
        batch = [next(it_source) for _ in range(cfg.meta_batch)]
        info = meta_step(model, params, batch, cfg, opt_state, rng)
        val = float("nan")
        if val_episodes and (it - start_iteration) % cfg.val_every == 0:
            val = _run_validation(model, params, val_episodes, cfg, val_seed)
            if val > trainlog.best_metric:
                trainlog.best_metric = val
                trainlog.best_iteration = it
                best = params.arrays()
                since_best = 0
                if on_best is not None:
                    on_best(it, params)
            else:
                since_best += cfg.val_every
        trainlog.append(it, info.loss, val, (time.perf_counter() - t0) * 1000.0)
        if val_episodes and since_best >= cfg.patience:
            trainlog.stopped_early = True
            log.info("early stop at iteration %d (best %d)", it, trainlog.best_iteration)
            break
    if val_episodes:
        params.load_arrays(best)
    return params, trainlog


def pretrain_baseline(
    model: Model,
    params: PartitionedParams,
    episodes: Iterable[Episode],
    cfg: MetaConfig,
    budget: int,
    rng: np.random.Generator,
) -> tuple[PartitionedParams, TrainLog]:
    """Ordinary multi-task training on support+query of sampled tasks."""
    trainlog = TrainLog()
    if budget <= 0:
        return params, trainlog
    opt_state = AdamState()
    kind = _head_kind(model)
    it_source = iter(episodes)
    t0 = time.perf_counter()
    for it in range(1, budget + 1):
        batch = [next(it_source) for _ in range(cfg.meta_batch)]
        total = None
        with Tape():
            fast = params.all()
            for ep in batch:
                docs = list(ep.support) + list(ep.query)
                labels = np.concatenate([ep.support_labels, ep.query_labels], axis=0)
                z, _ = model.forward(fast, pad_batch(docs), True, rng)
                l = head_loss(z, labels, kind)
                total = l if total is None else ops.add(total, l)
            grads = grad(total, fast)
        _check_finite(grads)
        with no_grad():
            grads = clip_global_norm(grads, cfg.clip_norm)
        adam_step(fast, grads, opt_state, cfg.meta_lr)
        trainlog.append(it, float(total.data), float("nan"), (time.perf_counter() - t0) * 1000.0)
    return params, trainlog
