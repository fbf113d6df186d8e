"""Glue between configuration, data, training, evaluation and output files."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import AdamState
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, Variant
from .encoders import EmbeddingTable, load_embeddings
from .learner import AttentionTrace
from .meta import (
    ATAML,
    PRETRAIN,
    RANDOM,
    EpisodeResult,
    TrainLog,
    meta_test,
    meta_train,
)
from .metrics import aggregate
from .model import Model, PartitionedParams
from .tasks import (
    Corpus,
    EpisodeStream,
    MetaSplit,
    MiniCorpus,
    build_mini_corpus,
    ingest_corpus,
    make_meta_split,
    synth_tasks,
)

log = logging.getLogger(__name__)

# offsets into the seed space, one per random stream
_INIT, _TRAIN, _VAL, _TEST, _FINETUNE, _DROPOUT = range(6)


def sub_seed(seed: int, stream: int, *extra: int) -> int:
    ss = np.random.SeedSequence([seed, stream, *extra])
    return int(ss.generate_state(1)[0])


@dataclass
class Setup:
    cfg: ExperimentConfig
    corpus: Corpus
    mini: MiniCorpus
    split: MetaSplit
    model: Model
    phrase_spans: dict = field(default_factory=dict)


def build_corpus(cfg: ExperimentConfig) -> tuple[Corpus, MetaSplit, dict]:
    c = cfg.corpus
    if c.kind == "synth":
        s = c.synth
        synth = synth_tasks(
            vocab_size=s.vocab_size,
            n_classes=s.n_classes,
            phrase_len=s.phrase_len,
            docs_per_class=s.docs_per_class,
            noise_rate=s.noise_rate,
            seed=s.seed,
            doc_len=tuple(s.doc_len),
            multi_label=c.multi_label,
            split_counts=c.split_counts,
        )
        return synth.corpus, synth.split, synth.phrase_spans
    corpus = ingest_corpus(c.path, "jsonl", max_len=c.max_len)
    split = make_meta_split(range(len(corpus.label_names)), seed=c.split_seed, fractions=c.split_fractions, counts=c.split_counts)
    return corpus, split, {}


def build_embeddings(cfg: ExperimentConfig, corpus: Corpus) -> np.ndarray:
    e = cfg.embeddings
    tokens = corpus.id_to_token()
    if e.path:
        table, skipped = load_embeddings(e.path, restrict_to=tokens, fallback_seed=e.seed)
        if skipped:
            log.warning("embedding loader skipped %d malformed lines", skipped)
        if table.dim != e.dim:
            raise ValueError(f"embedding file has dimension {table.dim}, config says {e.dim}")
        # reorder rows to the corpus vocabulary
        return np.stack([table.matrix[table.vocab.get(t, table.oov_row)] for t in tokens])
    return EmbeddingTable.random(tokens, e.dim, seed=e.seed, scale=e.scale).matrix


def setup(cfg: ExperimentConfig) -> Setup:
    corpus, split, spans = build_corpus(cfg)
    c = cfg.corpus
    mini = build_mini_corpus(corpus, c.per_class, c.train_per_class, not c.multi_label, seed=c.split_seed)
    model = Model(cfg.model_config_(), build_embeddings(cfg, corpus))
    return Setup(cfg, corpus, mini, split, model, spans)


def _stream(s: Setup, partition: str, seed: int, stream: int, tag: str) -> EpisodeStream:
    e = s.cfg.episodes
    return EpisodeStream(
        s.mini, s.split.partition(partition), e.way, e.shot, sub_seed(seed, stream, e.way, e.shot), e.query_per_class, tag
    )


def init_params(s: Setup) -> PartitionedParams:
    rng = np.random.default_rng(sub_seed(s.cfg.seed, _INIT))
    return s.model.init_params(s.cfg.episodes.way, rng)


# ---------------------------------------------------------------- training


@dataclass
class TrainOutcome:
    params: PartitionedParams
    log: TrainLog
    seconds: float
    checkpoint: Optional[Path] = None


def write_train_log(path: Path, trainlog: TrainLog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "L_meta", "val_metric", "wallclock_ms"])
        for it, loss, val, ms in trainlog.rows:
            w.writerow([it, "" if loss != loss else f"{loss:.8f}", "" if val != val else f"{val:.6f}", f"{ms:.1f}"])


def train(s: Setup, out_dir: Optional[Path] = None, resume: bool = False) -> TrainOutcome:
    """Meta-train (or pretrain) from the config; RANDOM returns a fresh init.

    With ``out_dir`` the best-validated weights go to ``model.ckpt``, the final
    state (with optimizer moments) to ``last.ckpt`` and the log to
    ``train_log.csv``.
    """
    cfg = s.cfg
    mc = cfg.meta_config()
    chash = cfg.config_hash()
    params = init_params(s)
    opt = AdamState()
    start = 0
    if resume and out_dir is not None and (out_dir / "last.ckpt").exists():
        ck = load_checkpoint(out_dir / "last.ckpt")
        if ck.config_hash != chash:
            raise ValueError(f"cannot resume: checkpoint hash {ck.config_hash} differs from config {chash}")
        params = ck.to_params()
        opt = ck.adam or AdamState()
        start = ck.iteration
        log.info("resuming from iteration %d", start)
    train_stream = _stream(s, "train", cfg.seed, _TRAIN, "train-")
    # skip the episodes an earlier run already consumed
    for _ in range(start * mc.meta_batch):
        next(train_stream)
    val_eps = []
    if cfg.meta.val_episodes and mc.algorithm not in (RANDOM, PRETRAIN) and len(s.split.val_classes) >= cfg.episodes.way:
        val_eps = _stream(s, "val", cfg.seed, _VAL, "val-").take(cfg.meta.val_episodes)
    rng = np.random.default_rng(sub_seed(cfg.seed, _DROPOUT, start))
    best_path = out_dir / "model.ckpt" if out_dir is not None else None

    def on_best(it, p):
        if best_path is not None:
            save_checkpoint(best_path, p, chash, it, cfg.seed)

    t0 = time.perf_counter()
    params, trainlog = meta_train(
        s.model,
        params,
        train_stream,
        mc,
        max(cfg.meta.iterations - start, 0),
        rng,
        val_episodes=val_eps,
        val_seed=sub_seed(cfg.seed, _FINETUNE, 1),
        on_best=on_best,
        opt_state=opt,
        start_iteration=start,
    )
    seconds = time.perf_counter() - t0
    if out_dir is not None:
        last_it = trainlog.rows[-1][0] if trainlog.rows else start
        save_checkpoint(out_dir / "last.ckpt", params, chash, last_it, cfg.seed, adam=opt)
        save_checkpoint(best_path, params, chash, trainlog.best_iteration if val_eps else last_it, cfg.seed)
        write_train_log(out_dir / "train_log.csv", trainlog)
    return TrainOutcome(params, trainlog, seconds, best_path)


# ---------------------------------------------------------------- evaluation


def sample_test_episodes(s: Setup, n: int, partition: str = "test"):
    """Evaluation episodes; the "val" partition replays the validation episodes of training."""
    if partition == "val":
        return _stream(s, "val", s.cfg.seed, _VAL, "val-").take(n)
    return _stream(s, partition, s.cfg.seed, _TEST, f"{partition}-").take(n)


def evaluate(
    s: Setup, params: PartitionedParams, n_episodes: Optional[int] = None, partition: str = "test"
) -> list[EpisodeResult]:
    cfg = s.cfg
    mc = cfg.meta_config()
    n = cfg.episodes.test_episodes if n_episodes is None else n_episodes
    if n == 0:
        log.warning("evaluating zero episodes")
        return []
    episodes = sample_test_episodes(s, n, partition)
    rng = np.random.default_rng(sub_seed(cfg.seed, _FINETUNE, 1 if partition == "val" else 0))
    if mc.algorithm == RANDOM:
        # a fresh initialization per episode, fine-tuned end to end
        init_rng = np.random.default_rng(sub_seed(cfg.seed, _INIT, 7))
        return [meta_test(s.model, s.model.init_params(ep.way, init_rng), ep, mc, rng) for ep in episodes]
    reinit = mc.algorithm == PRETRAIN
    return [meta_test(s.model, params, ep, mc, rng, reinit_task=reinit) for ep in episodes]


def metric_names(cfg: ExperimentConfig) -> list[str]:
    if cfg.corpus.multi_label:
        return ["micro_f1", "macro_f1"]
    return ["accuracy", "micro_f1", "macro_f1"]


def variant_labels(cfg: ExperimentConfig) -> tuple[str, str]:
    enc = {"tcn": "TCN", "bilstm": "LSTM", "none": "E"}[cfg.model.encoder]
    if not cfg.model.attention:
        att = "none"
    elif cfg.meta.freeze_attention_slow:
        att = "frozen"
    else:
        att = "A"
    return enc, att


def result_rows(cfg: ExperimentConfig, results: list[EpisodeResult]) -> list[dict]:
    enc, att = variant_labels(cfg)
    rows = []
    for m in metric_names(cfg):
        agg = aggregate([r.metric(m) for r in results], m)
        rows.append(
            {
                "algorithm": cfg.meta.algorithm,
                "encoder": enc,
                "attention": att,
                "way": cfg.episodes.way,
                "shot": cfg.episodes.shot,
                "metric": m,
                "mean": agg.mean,
                "ci95": agg.ci95,
                "episodes": agg.n,
                "seed": cfg.seed,
            }
        )
    return rows


def traces_for(s: Setup, episodes, results: list[EpisodeResult]) -> list[AttentionTrace]:
    """Attention traces of every query document, straight from the evaluation pass."""
    names = s.corpus.label_names
    out = []
    for ep, res in zip(episodes, results):
        if res.alphas is None:
            continue
        for r, doc in enumerate(ep.query):
            n = int(res.mask[r].sum())
            gold, pred = res.gold[r], res.predictions[r]
            if ep.multi_label:
                gold = [names[ep.slot_map[j]] for j in gold]
                pred = [names[ep.slot_map[j]] for j in pred]
            else:
                gold, pred = names[ep.slot_map[gold]], names[ep.slot_map[pred]]
            out.append(
                AttentionTrace(
                    tokens=list(doc.words[:n]),
                    alphas=[float(a) for a in res.alphas[r, :n]],
                    label=gold,
                    prediction=pred,
                    meta={"episode": ep.uid, "doc": doc.id},
                )
            )
    return out


def episode_records(results: list[EpisodeResult]) -> list[dict]:
    return [
        {
            "episode": r.uid,
            "way": r.way,
            "shot": r.shot,
            "accuracy": r.accuracy,
            "micro_f1": r.micro_f1,
            "macro_f1": r.macro_f1,
            "predictions": r.predictions,
            "gold": r.gold,
            "support_losses": r.support_losses,
        }
        for r in results
    ]


def load_params(s: Setup, path: Path, force: bool = False) -> tuple[PartitionedParams, Checkpoint]:
    ck = load_checkpoint(path)
    expected = s.cfg.config_hash()
    if ck.config_hash != expected and not force:
        raise HashMismatch(f"checkpoint hash {ck.config_hash} does not match config hash {expected}")
    return ck.to_params(), ck


class HashMismatch(ValueError):
    pass


# ---------------------------------------------------------------- bench


DEFAULT_VARIANTS = [
    Variant(name="random TCN(A)", algorithm="random", encoder="tcn", attention=True),
    Variant(name="pretrained TCN(A)", algorithm="pretrain", encoder="tcn", attention=True),
    Variant(name="MAML TCN", algorithm="maml", encoder="tcn", attention=False),
    Variant(name="MAML TCN(A)", algorithm="maml", encoder="tcn", attention=True),
    Variant(name="ATAML E(A)", algorithm="ataml", encoder="none", attention=True),
    Variant(name="ATAML TCN(-)", algorithm="ataml", encoder="tcn", attention=True, freeze_attention_slow=True),
    Variant(name="ATAML TCN(A)", algorithm="ataml", encoder="tcn", attention=True),
]


@dataclass
class BenchCell:
    variant: Variant
    cfg: ExperimentConfig
    results: list
    rows: list
    train_seconds: float
    eval_seconds: float
    setup: Optional[Setup] = None
    params: Optional[PartitionedParams] = None


def run_bench(cfg: ExperimentConfig, progress=None) -> list[BenchCell]:
    variants = cfg.bench.variants or DEFAULT_VARIANTS
    cells = []
    for way in cfg.bench.ways:
        for shot in cfg.bench.shots:
            for v in variants:
                vc = cfg.with_variant(v, way, shot)
                s = setup(vc)
                outcome = train(s)
                t0 = time.perf_counter()
                results = evaluate(s, outcome.params)
                dt = time.perf_counter() - t0
                rows = result_rows(vc, results)
                cells.append(BenchCell(v, vc, results, rows, outcome.seconds, dt, s, outcome.params))
                if progress is not None:
                    progress(cells[-1])
    return cells


def dump_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
