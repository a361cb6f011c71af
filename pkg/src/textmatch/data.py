"""Tokenization, vocabulary, embeddings, dataset loading, batching, metrics.

Everything here is deterministic: re-running ingestion on the same files
yields byte-identical vocabularies, splits and batches (given the same
shuffle seed).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

log = logging.getLogger(__name__)

DATASET_NAMES = ("snli", "scitail", "quora", "wikiqa")

# Word tokens: runs of unicode word characters (underscore excluded), with
# internal apostrophes kept ("don't" stays one token). Everything else is a
# separator, so punctuation-only tokens never survive.
_TOKEN_RE = re.compile(r"[^\W_]+(?:'[^\W_]+)*", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens with punctuation stripped."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Example:
    seq_a: list[str]
    seq_b: list[str]
    label: int
    group_id: str | None = None


class Vocabulary:
    """token -> index map; index 0 is reserved for pad/OOV."""

    def __init__(self, tokens):
        ordered = sorted(set(tokens))
        self._index = {tok: i for i, tok in enumerate(ordered, start=1)}
        self.tokens = ordered

    def __len__(self) -> int:
        return len(self.tokens) + 1  # incl. reserved index 0

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        return self._index.get(token, 0)

    def encode(self, tokens) -> np.ndarray:
        return np.array([self.index(t) for t in tokens], dtype=np.int64)


def build_vocab(train_examples, all_examples=None, embedding_tokens=None) -> Vocabulary:
    """Training tokens, plus tokens from any split that are covered by the
    embedding file. Tokens outside both sets stay OOV (index 0)."""
    toks = {t for ex in train_examples for t in ex.seq_a + ex.seq_b}
    if embedding_tokens is not None and all_examples is not None:
        for ex in all_examples:
            for t in ex.seq_a + ex.seq_b:
                if t in embedding_tokens:
                    toks.add(t)
    return Vocabulary(toks)


@dataclass
class EmbeddingTable:
    """Frozen lookup table; row 0 is the zero pad/OOV vector."""

    matrix: np.ndarray
    frozen: bool = True

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        self.matrix[0] = 0.0

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def random(cls, vocab_size: int, dim: int, rng: np.random.Generator) -> "EmbeddingTable":
        matrix = rng.normal(0.0, 1.0, size=(vocab_size, dim)).astype(np.float32)
        return cls(matrix)


def embedding_tokens(path) -> set[str]:
    """First field of every line in a pretrained-vector file."""
    toks = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                toks.add(line.split(" ", 1)[0])
    return toks


def load_embeddings(path, vocab: Vocabulary, dim: int | None = None) -> EmbeddingTable:
    """Copy pretrained rows for in-vocabulary tokens; missing tokens stay zero."""
    matrix: np.ndarray | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2 or not parts[0]:
                if not line.strip():
                    continue
                raise ValueError(f"{path}:{lineno}: malformed embedding line")
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
            if len(values) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(values)}")
            if matrix is None:
                matrix = np.zeros((len(vocab), dim), dtype=np.float32)
            idx = vocab.index(token)
            if idx != 0:
                try:
                    matrix[idx] = [float(v) for v in values]
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: bad float ({exc})") from exc
    if matrix is None:
        raise ValueError(f"{path}: empty embedding file")
    return EmbeddingTable(matrix)


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    """How to read one dataset: file format, label mapping, metric."""

    name: str
    label_map: dict[str, int]
    skip_labels: set = field(default_factory=set)
    num_classes: int = 2
    ranking: bool = False          # candidates carry a group id, metric is MAP/MRR
    metric: str = "accuracy"


def builtin_dataset_spec(name: str, label_map_path=None) -> DatasetSpec:
    if name not in DATASET_NAMES:
        raise ValueError(f"unknown dataset {name!r}, expected one of {DATASET_NAMES}")
    if label_map_path is not None:
        with open(label_map_path, encoding="utf-8") as fh:
            raw = json.load(fh)
    else:
        raw = json.loads(resources.files("textmatch.configs").joinpath(f"labels_{name}.json").read_text())
    ranking = name == "wikiqa"
    return DatasetSpec(
        name=name,
        label_map=dict(raw["labels"]),
        skip_labels=set(raw.get("skip", [])),
        num_classes=int(raw["num_classes"]),
        ranking=ranking,
        metric="map_mrr" if ranking else "accuracy",
    )


def _make_example(spec: DatasetSpec, text_a, text_b, label_str, group_id, where) -> Example | None:
    if label_str in spec.skip_labels:
        return None
    if label_str not in spec.label_map:
        raise ValueError(f"{where}: unknown label {label_str!r} for dataset {spec.name}")
    seq_a, seq_b = tokenize(text_a), tokenize(text_b)
    if not seq_a or not seq_b:
        log.warning("%s: example reduced to zero tokens, skipping", where)
        return None
    return Example(seq_a, seq_b, spec.label_map[label_str], group_id)


def load_split(path, spec: DatasetSpec) -> list[Example]:
    """Read one split.

    snli/scitail accept JSON-lines records with sentence1/sentence2/gold_label
    fields or the tab-separated form "sentence1<TAB>sentence2<TAB>gold_label".
    quora/wikiqa use "label<TAB>seq_a<TAB>seq_b[<TAB>group_id]".
    """
    examples: list[Example] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            if spec.name in ("snli", "scitail"):
                if line.lstrip().startswith("{"):
                    rec = json.loads(line)
                    ex = _make_example(spec, rec["sentence1"], rec["sentence2"],
                                       rec["gold_label"], None, where)
                else:
                    parts = line.split("\t")
                    if len(parts) != 3:
                        raise ValueError(f"{where}: expected 3 tab-separated fields, got {len(parts)}")
                    ex = _make_example(spec, parts[0], parts[1], parts[2], None, where)
            else:
                parts = line.split("\t")
                if len(parts) not in (3, 4):
                    raise ValueError(f"{where}: expected 3 or 4 tab-separated fields, got {len(parts)}")
                group = parts[3] if len(parts) == 4 else None
                ex = _make_example(spec, parts[1], parts[2], parts[0], group, where)
            if ex is not None:
                examples.append(ex)
    return examples


@dataclass
class LoadedData:
    """One dataset fully ingested, ready for training and evaluation."""

    spec: DatasetSpec
    train: list[Example]
    dev: list[Example]
    test: list[Example]
    vocab: Vocabulary
    embeddings: EmbeddingTable


def load_dataset(spec: DatasetSpec, train_path, dev_path, test_path=None,
                 embedding_path=None, embed_dim: int = 300, embed_seed: int = 0) -> LoadedData:
    """Load splits, build the vocabulary and the frozen embedding table.

    Without a pretrained-vector file the table is random (still frozen),
    seeded by ``embed_seed``, which keeps toy runs reproducible.
    """
    train = load_split(train_path, spec)
    dev = load_split(dev_path, spec)
    test = load_split(test_path, spec) if test_path else []
    if embedding_path:
        emb_toks = embedding_tokens(embedding_path)
        vocab = build_vocab(train, train + dev + test, emb_toks)
        table = load_embeddings(embedding_path, vocab, dim=None)
    else:
        vocab = build_vocab(train)
        rng = np.random.default_rng(np.random.SeedSequence([embed_seed, 0xE4B]))
        table = EmbeddingTable.random(len(vocab), embed_dim, rng)
    return LoadedData(spec, train, dev, test, vocab, table)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids_a: np.ndarray        # [B, La_max] int64, 0-padded at the tail
    ids_b: np.ndarray
    mask_a: np.ndarray       # [B, La_max] bool, True on valid positions
    mask_b: np.ndarray
    labels: np.ndarray       # [B] int64
    group_ids: list | None = None

    def __len__(self) -> int:
        return self.ids_a.shape[0]


def _pad_block(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    longest = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), longest), dtype=np.int64)
    mask = np.zeros((len(seqs), longest), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def make_batches(examples, vocab: Vocabulary, batch_size: int,
                 shuffle: bool = False, seed: int = 0) -> list[Batch]:
    """Pad each batch to its own maximum lengths. Deterministic given seed."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(examples))
    if shuffle:
        np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C])).shuffle(order)
    batches = []
    for start in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        ids_a, mask_a = _pad_block([vocab.encode(ex.seq_a) for ex in chunk])
        ids_b, mask_b = _pad_block([vocab.encode(ex.seq_b) for ex in chunk])
        labels = np.array([ex.label for ex in chunk], dtype=np.int64)
        groups = [ex.group_id for ex in chunk] if any(ex.group_id is not None for ex in chunk) else None
        batches.append(Batch(ids_a, ids_b, mask_a, mask_b, labels, groups))
    return batches


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    return float((predictions == labels).mean())


def map_mrr(scores, labels, group_ids) -> tuple[float, float]:
    """Mean average precision and mean reciprocal rank over question groups.

    Candidates are ranked by score, descending, ties kept in original order.
    Groups without any relevant candidate are excluded from both metrics.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not (len(scores) == len(labels) == len(group_ids)):
        raise ValueError("scores, labels and group_ids must have equal lengths")
    if len(scores) == 0:
        raise ValueError("map_mrr needs at least one candidate")
    groups: dict = {}
    for i, gid in enumerate(group_ids):
        groups.setdefault(gid, []).append(i)
    ap_values, rr_values = [], []
    for members in groups.values():
        ranked = sorted(members, key=lambda i: (-scores[i], i))
        relevant_ranks = [r for r, i in enumerate(ranked, start=1) if labels[i]]
        if not relevant_ranks:
            continue
        ap_values.append(sum(k / r for k, r in enumerate(relevant_ranks, start=1)) / len(relevant_ranks))
        rr_values.append(1.0 / relevant_ranks[0])
    if not ap_values:
        raise ValueError("no group has a relevant candidate")
    return float(np.mean(ap_values)), float(np.mean(rr_values))
