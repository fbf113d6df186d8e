"""Corpora, mini-corpus construction, meta-splits and N-way K-shot episodes."""

from __future__ import annotations

import itertools
import json
import logging
import math
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import ContractViolation
from .encoders import OOV, OOV_ID, PAD, PAD_ID

log = logging.getLogger(__name__)

MAX_LEN = 256
_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, punctuation replaced by spaces, whitespace split."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class Document:
    id: str
    tokens: tuple  # token ids
    labels: frozenset  # label ids
    words: tuple = ()  # surface tokens, same length as tokens

    def __post_init__(self):
        if not self.tokens:
            raise ContractViolation(f"document {self.id!r} has no tokens")
        if not self.labels:
            raise ContractViolation(f"document {self.id!r} has no labels")


@dataclass
class Corpus:
    documents: list
    label_names: list  # label id -> name
    vocab: dict  # token -> id, includes <pad>/<unk>

    def by_label(self) -> dict:
        out: dict = {}
        for i, d in enumerate(self.documents):
            for lab in d.labels:
                out.setdefault(lab, []).append(i)
        return out

    def id_to_token(self) -> list:
        inv = [""] * len(self.vocab)
        for tok, i in self.vocab.items():
            inv[i] = tok
        return inv


def _base_vocab() -> dict:
    return {PAD: PAD_ID, OOV: OOV_ID}


def ingest_corpus(
    path: str | Path,
    fmt: str = "jsonl",
    vocab: Optional[dict] = None,
    max_len: int = MAX_LEN,
) -> Corpus:
    """Read ``{"id", "text", "labels"}`` lines into Documents.

    With ``vocab`` given, unknown tokens map to the OOV row; otherwise the
    vocabulary is grown from the corpus.  Malformed lines and empty texts are
    skipped (counted in the log).
    """
    if fmt != "jsonl":
        raise CorpusError(f"unsupported corpus format {fmt!r}")
    grow = vocab is None
    vocab = dict(vocab) if vocab is not None else _base_vocab()
    labels: dict = {}
    docs = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                doc_id = str(rec["id"])
                text = rec["text"]
                labs = rec["labels"]
                if not isinstance(text, str) or not isinstance(labs, list) or not labs:
                    raise ValueError("bad field types")
            except (ValueError, KeyError, TypeError):
                skipped += 1
                continue
            words = tokenize(text)[:max_len]
            if not words:
                skipped += 1
                continue
            ids = []
            for w in words:
                if w not in vocab and grow:
                    vocab[w] = len(vocab)
                ids.append(vocab.get(w, OOV_ID))
            lab_ids = frozenset(labels.setdefault(str(l), len(labels)) for l in labs)
            docs.append(Document(doc_id, tuple(ids), lab_ids, tuple(words)))
    if skipped:
        log.warning("skipped %d malformed or empty lines in %s", skipped, path)
    if not docs:
        raise CorpusError(f"no valid documents in {path}")
    names = [None] * len(labels)
    for name, i in labels.items():
        names[i] = name
    return Corpus(docs, names, vocab)


def write_jsonl(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in corpus.documents:
            rec = {
                "id": d.id,
                "text": " ".join(d.words),
                "labels": sorted(corpus.label_names[l] for l in d.labels),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------- mini corpus


@dataclass
class MiniCorpus:
    corpus: Corpus
    train_pool: dict  # label -> list of doc indices
    test_pool: dict
    single_label: bool
    seed: int
    dropped: list = field(default_factory=list)

    @property
    def labels(self) -> list:
        return sorted(self.train_pool)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "single_label": self.single_label,
            "train_pool": {str(k): [self.corpus.documents[i].id for i in v] for k, v in sorted(self.train_pool.items())},
            "test_pool": {str(k): [self.corpus.documents[i].id for i in v] for k, v in sorted(self.test_pool.items())},
            "dropped": sorted(self.dropped),
            "label_names": list(self.corpus.label_names),
        }


def build_mini_corpus(
    corpus: Corpus,
    per_class: int = 20,
    train_per_class: int = 5,
    single_label: bool = True,
    seed: int = 0,
) -> MiniCorpus:
    """Sample ~``per_class`` documents per label and split them train/test.

    Single-label mode first discards documents carrying more than one label.
    Labels with fewer than ``train_per_class + 1`` documents are dropped.
    """
    rng = np.random.default_rng(seed)
    by_label: dict = {}
    for i, d in enumerate(corpus.documents):
        if single_label and len(d.labels) != 1:
            continue
        for lab in d.labels:
            by_label.setdefault(lab, []).append(i)
    train_pool, test_pool, dropped = {}, {}, []
    for lab in sorted(by_label):
        idx = by_label[lab]
        if len(idx) < train_per_class + 1:
            dropped.append(lab)
            continue
        chosen = [idx[j] for j in rng.permutation(len(idx))[:per_class]]
        train_pool[lab] = chosen[:train_per_class]
        test_pool[lab] = chosen[train_per_class:]
    if dropped:
        log.info("dropped %d labels with too few documents", len(dropped))
    if not train_pool:
        raise CorpusError("no class has enough documents for the mini corpus")
    if not single_label:
        counts = {lab: len(train_pool[lab]) + len(test_pool[lab]) for lab in train_pool}
        log.info("multi-label mini corpus class sizes: %s", counts)
    return MiniCorpus(corpus, train_pool, test_pool, single_label, seed, dropped)


# ---------------------------------------------------------------- meta split


@dataclass(frozen=True)
class MetaSplit:
    train_classes: tuple
    val_classes: tuple
    test_classes: tuple

    def __post_init__(self):
        a, b, c = map(set, (self.train_classes, self.val_classes, self.test_classes))
        if a & b or a & c or b & c:
            raise ContractViolation("meta-split partitions overlap")

    def partition(self, name: str) -> tuple:
        return {"train": self.train_classes, "val": self.val_classes, "test": self.test_classes}[name]

    def to_json(self) -> dict:
        return {k: list(map(int, getattr(self, f"{k}_classes"))) for k in ("train", "val", "test")}

    @classmethod
    def from_json(cls, rec: dict) -> "MetaSplit":
        return cls(tuple(rec["train"]), tuple(rec["val"]), tuple(rec["test"]))


def make_meta_split(
    labels: Sequence[int],
    seed: int = 0,
    fractions: tuple = (0.6, 0.15, 0.25),
    counts: Optional[tuple] = None,
) -> MetaSplit:
    """Partition labels into meta-train/val/test, by explicit counts or fractions."""
    labels = sorted(labels)
    n = len(labels)
    if counts is None:
        n_val = int(round(fractions[1] * n))
        n_test = int(round(fractions[2] * n))
        n_train = n - n_val - n_test
        counts = (n_train, n_val, n_test)
    if sum(counts) > n or min(counts) < 0:
        raise ContractViolation(f"split counts {counts} do not fit {n} labels")
    perm = [labels[i] for i in np.random.default_rng(seed).permutation(n)]
    a, b, c = counts
    return MetaSplit(tuple(sorted(perm[:a])), tuple(sorted(perm[a : a + b])), tuple(sorted(perm[a + b : a + b + c])))


# ---------------------------------------------------------------- episodes


@dataclass
class Episode:
    way: int
    shot: int
    support: list  # Documents
    query: list
    support_labels: np.ndarray  # (n,) slot indices, or (n, N) binary for multi-label
    query_labels: np.ndarray
    slot_map: list  # slot -> global label id
    multi_label: bool = False
    uid: str = ""


def sample_episode(
    mini: MiniCorpus,
    classes: Sequence[int],
    way: int,
    shot: int,
    rng: np.random.Generator,
    query_per_class: int = 15,
    uid: str = "",
) -> Episode:
    classes = [c for c in classes if c in mini.train_pool]
    if len(classes) < way:
        raise ContractViolation(f"need {way} classes, partition has {len(classes)}")
    chosen = [classes[i] for i in rng.choice(len(classes), size=way, replace=False)]
    docs = mini.corpus.documents
    for c in chosen:
        if len(mini.train_pool[c]) < shot:
            raise ContractViolation(f"class {c} has {len(mini.train_pool[c])} training docs, need {shot}")
    support_idx, query_idx = [], []
    support_lab, query_lab = [], []
    for slot, c in enumerate(chosen):
        pool = mini.train_pool[c]
        s = [pool[i] for i in rng.choice(len(pool), size=shot, replace=False)]
        tpool = mini.test_pool[c]
        nq = min(query_per_class, len(tpool))
        q = [tpool[i] for i in rng.choice(len(tpool), size=nq, replace=False)]
        support_idx += s
        query_idx += q
        support_lab += [slot] * len(s)
        query_lab += [slot] * len(q)
    if not mini.single_label:
        return _multilabel_episode(mini, chosen, shot, support_idx, query_idx, uid)
    return Episode(
        way,
        shot,
        [docs[i] for i in support_idx],
        [docs[i] for i in query_idx],
        np.asarray(support_lab, dtype=np.int64),
        np.asarray(query_lab, dtype=np.int64),
        chosen,
        False,
        uid,
    )


def _multilabel_episode(mini, chosen, shot, support_idx, query_idx, uid) -> Episode:
    docs = mini.corpus.documents
    slot_of = {c: s for s, c in enumerate(chosen)}
    support_idx = list(dict.fromkeys(support_idx))
    support_ids = {docs[i].id for i in support_idx}
    query_idx = [i for i in dict.fromkeys(query_idx) if docs[i].id not in support_ids]

    def vec(i):
        v = np.zeros(len(chosen), dtype=np.float64)
        for lab in docs[i].labels:
            if lab in slot_of:
                v[slot_of[lab]] = 1.0
        return v

    return Episode(
        len(chosen),
        shot,
        [docs[i] for i in support_idx],
        [docs[i] for i in query_idx],
        np.array([vec(i) for i in support_idx]),
        np.array([vec(i) for i in query_idx]).reshape(-1, len(chosen)),
        chosen,
        True,
        uid,
    )


class EpisodeStream:
    """Reproducible episode source for one meta-split partition."""

    def __init__(self, mini: MiniCorpus, classes, way: int, shot: int, seed: int, query_per_class: int = 15, tag: str = ""):
        self.mini = mini
        self.classes = list(classes)
        self.way = way
        self.shot = shot
        self.query_per_class = query_per_class
        self.rng = np.random.default_rng(seed)
        self.tag = tag
        self.count = 0

    def __iter__(self):
        return self

    def __next__(self) -> Episode:
        ep = sample_episode(
            self.mini, self.classes, self.way, self.shot, self.rng, self.query_per_class, uid=f"{self.tag}{self.count}"
        )
        self.count += 1
        return ep

    def take(self, n: int) -> list:
        return [next(self) for _ in range(n)]


def pad_batch(docs: Sequence[Document], pad_id: int = PAD_ID) -> np.ndarray:
    """Right-pad token ids into a (B, T) array."""
    width = max(len(d.tokens) for d in docs)
    out = np.full((len(docs), width), pad_id, dtype=np.int64)
    for r, d in enumerate(docs):
        out[r, : len(d.tokens)] = d.tokens
    return out


# ---------------------------------------------------------------- synthetic tasks


@dataclass
class SynthCorpus:
    corpus: Corpus
    split: MetaSplit
    phrases: dict  # label id -> tuple of phrase token strings
    phrase_spans: dict  # doc id -> list of (start, end) phrase windows


def _phrase_inventory(n_classes: int, phrase_len: int, rng: np.random.Generator, min_share: int) -> list:
    """Distinct token sets of size ``phrase_len`` over a small shared inventory.

    The inventory is the smallest one that offers enough distinct sets, so
    phrase tokens are reused across classes (each used by >= ``min_share``
    classes when phrase_len > 1).
    """
    m = phrase_len
    while math.comb(m, phrase_len) < n_classes:
        m += 1
    if phrase_len > 1:
        m = max(m, phrase_len + 1)
    for _ in range(1000):
        combos = list(itertools.combinations(range(m), phrase_len))
        pick = [combos[i] for i in rng.permutation(len(combos))[:n_classes]]
        uses = np.zeros(m, dtype=int)
        for c in pick:
            uses[list(c)] += 1
        if phrase_len == 1 or uses.min() >= min_share:
            return [tuple(int(t) for t in rng.permutation(c)) for c in pick], m
    raise CorpusError("could not build a shared phrase inventory")


def synth_tasks(
    vocab_size: int = 100,
    n_classes: int = 20,
    phrase_len: int = 3,
    docs_per_class: int = 20,
    noise_rate: float = 1.0,
    seed: int = 0,
    doc_len: tuple = (12, 20),
    multi_label: bool = False,
    split_counts: Optional[tuple] = None,
) -> SynthCorpus:
    """Phrase-detection corpus: each class is signalled by one contiguous phrase.

    Class phrases are orderings of distinct token sets drawn from a small
    shared inventory, so no single token identifies a class.  Each document
    holds one intact copy of its class phrase at a random offset; every other
    position is a uniform vocabulary token with probability ``noise_rate`` and
    otherwise continues the phrase periodically.  In multi-label mode half
    the documents carry a second class phrase.
    """
    if vocab_size <= n_classes * phrase_len:
        raise ContractViolation("vocab_size must exceed n_classes * phrase_len")
    rng = np.random.default_rng(seed)
    phrases_idx, inventory = _phrase_inventory(n_classes, phrase_len, rng, min_share=2)
    if inventory > vocab_size:
        raise ContractViolation("vocab_size smaller than the phrase inventory")
    words = [f"w{i}" for i in range(vocab_size)]
    vocab = _base_vocab()
    for w in words:
        vocab[w] = len(vocab)
    phrases = {c: tuple(words[t] for t in p) for c, p in enumerate(phrases_idx)}
    lo, hi = doc_len
    docs, spans = [], {}
    for c in range(n_classes):
        for j in range(docs_per_class):
            extra = None
            if multi_label and rng.random() < 0.5:
                extra = int(rng.choice([k for k in range(n_classes) if k != c]))
            n_phr = 1 if extra is None else 2
            length = int(rng.integers(max(lo, phrase_len * n_phr), max(hi, phrase_len * n_phr) + 1))
            toks, doc_spans = _synth_doc(length, [phrases[c]] + ([phrases[extra]] if extra is not None else []), noise_rate, words, rng)
            labels = frozenset([c] if extra is None else [c, extra])
            doc_id = f"c{c}-d{j}"
            docs.append(Document(doc_id, tuple(vocab[t] for t in toks), labels, tuple(toks)))
            spans[doc_id] = doc_spans
    corpus = Corpus(docs, [f"class{c}" for c in range(n_classes)], vocab)
    if split_counts is None:
        split = make_meta_split(range(n_classes), seed=seed)
    else:
        split = make_meta_split(range(n_classes), seed=seed, counts=tuple(split_counts))
    return SynthCorpus(corpus, split, phrases, spans)


def _synth_doc(length, phrase_list, noise_rate, words, rng):
    slots = []
    # place phrases left to right at random non-overlapping offsets
    total = sum(len(p) for p in phrase_list)
    gaps = rng.multinomial(length - total, [1.0 / (len(phrase_list) + 1)] * (len(phrase_list) + 1))
    pos = 0
    for p, g in zip(phrase_list, gaps):
        pos += int(g)
        slots.append((pos, pos + len(p), p))
        pos += len(p)
    toks = [None] * length
    first_start, _, first = slots[0]
    for i in range(length):
        if rng.random() < noise_rate:
            toks[i] = words[int(rng.integers(len(words)))]
        else:
            toks[i] = first[(i - first_start) % len(first)]
    for start, end, p in slots:
        toks[start:end] = list(p)
    return toks, [(s, e) for s, e, _ in slots]


def token_class_counts(synth: SynthCorpus) -> dict:
    """Number of distinct classes whose phrase contains each phrase token."""
    counts: dict = {}
    for c, phrase in synth.phrases.items():
        for tok in set(phrase):
            counts[tok] = counts.get(tok, 0) + 1
    return counts
