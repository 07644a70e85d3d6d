"""Corpus ingestion, tokenization, batching, and synthetic fixtures.

Pair files are UTF-8, one record per line: ``query<TAB>document`` with
an optional third column carrying an explicit document key.  Without
one, the key is a content hash of the document text, which also dedupes
identical documents appearing under several queries.

Batches carry in-batch negatives implicitly: every document whose
record is outside a query's positive group is a negative for that
query.  Records sharing a query text -- or pointing at the same
document key -- are merged into one positive group so they are never
each other's negatives.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1

_WORD_RE = re.compile(r"[a-z0-9]+")


class CorpusError(Exception):
    """Unreadable or structurally broken corpus input."""


@dataclass
class PairRecord:
    query: str
    document: str
    key: str
    split: str | None = None
    explicit_key: bool = field(default=False, repr=False)

    def __post_init__(self):
        if not self.query or not self.document:
            raise CorpusError("pair texts must be non-empty")


def content_key(document: str) -> str:
    return hashlib.sha1(document.encode("utf-8")).hexdigest()[:16]


def derived_seed(seed: int, component: str) -> int:
    """Stable per-component seed: hash of the component name mixed with seed."""
    digest = hashlib.sha256(f"{seed}:{component}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# -- pair files ------------------------------------------------------------

def load_pairs(path, fmt: str = "tsv") -> list[PairRecord]:
    """Read one PairRecord per line; order preserved.

    Malformed lines are skipped and counted; more than 10% malformed is
    fatal.  ``fmt`` is ``tsv`` (query<TAB>document[<TAB>key]) or
    ``jsonl`` ({"query":..., "document":..., "key":..., "split":...}).
    """
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise CorpusError(f"cannot read pair file {path}: {exc}") from exc
    if lines and lines[-1] == "":
        lines.pop()
    records, malformed = [], 0
    for line in lines:
        rec = _parse_line(line, fmt)
        if rec is None:
            malformed += 1
        else:
            records.append(rec)
    if malformed:
        log.warning("%d malformed lines skipped in %s", malformed, path)
    total = len(records) + malformed
    if total and malformed > 0.1 * total:
        raise CorpusError(f"{malformed}/{total} malformed lines in {path}")
    return records


def _parse_line(line: str, fmt: str):
    if not line.strip():
        return None
    if fmt == "tsv":
        parts = line.split("\t")
        if len(parts) < 2 or not parts[0] or not parts[1]:
            return None
        if len(parts) >= 3 and parts[2]:
            return PairRecord(parts[0], parts[1], parts[2], explicit_key=True)
        return PairRecord(parts[0], parts[1], content_key(parts[1]))
    if fmt == "jsonl":
        try:
            obj = json.loads(line)
            query, document = obj["query"], obj["document"]
        except (json.JSONDecodeError, KeyError, TypeError):
            return None
        if not query or not document:
            return None
        key = obj.get("key")
        return PairRecord(query, document, key or content_key(document),
                          split=obj.get("split"), explicit_key=key is not None)
    raise ValueError(f"unknown pair format {fmt!r}")


def dump_pairs(records, path, fmt: str = "tsv") -> None:
    """Inverse of load_pairs; a keyless tsv round-trips byte-identically."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            if fmt == "tsv":
                if rec.explicit_key:
                    fh.write(f"{rec.query}\t{rec.document}\t{rec.key}\n")
                else:
                    fh.write(f"{rec.query}\t{rec.document}\n")
            elif fmt == "jsonl":
                obj = {"query": rec.query, "document": rec.document, "key": rec.key}
                if rec.split:
                    obj["split"] = rec.split
                fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
            else:
                raise ValueError(f"unknown pair format {fmt!r}")


def distinct_documents(records) -> list[tuple[str, str]]:
    """(key, document) for each distinct key, in first-appearance order."""
    seen, out = set(), []
    for rec in records:
        if rec.key not in seen:
            seen.add(rec.key)
            out.append((rec.key, rec.document))
    return out


# -- tokenization -----------------------------------------------------------

@dataclass
class Vocab:
    words: list[str]                      # index = id; [0]=pad, [1]=unk
    index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.index:
            self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)


def build_vocab(records, min_freq: int = 1, max_size: int | None = None) -> Vocab:
    """Frequency-cutoff vocabulary over query and document text."""
    counts: dict[str, int] = {}
    for rec in records:
        for text in (rec.query, rec.document):
            for w in _WORD_RE.findall(text.lower()):
                counts[w] = counts.get(w, 0) + 1
    kept = sorted((w for w, c in counts.items() if c >= min_freq),
                  key=lambda w: (-counts[w], w))
    if max_size is not None:
        kept = kept[:max_size - 2]
    return Vocab(["<pad>", "<unk>"] + kept)


def tokenize(text: str, vocab: Vocab, max_length: int = 32) -> list[int]:
    """Deterministic word-piece-free tokenization; prefix kept on truncation."""
    words = _WORD_RE.findall(text.lower())
    ids = [vocab.index.get(w, UNK_ID) for w in words][:max_length]
    return ids or [UNK_ID]


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    query_ids: np.ndarray        # (B, T) padded with PAD_ID
    query_lens: np.ndarray       # (B,)
    doc_ids: np.ndarray
    doc_lens: np.ndarray
    alignment: np.ndarray        # (B,) positive document row per query (=arange)
    groups: np.ndarray           # (B,) positive-group labels partitioning the batch
    keys: list[str]
    epoch: int = 0

    @property
    def size(self) -> int:
        return len(self.keys)

    def validate(self) -> None:
        b = self.size
        if sorted(self.alignment.tolist()) != list(range(b)):
            raise CorpusError("alignment must be a bijection onto batch documents")
        if self.groups.shape != (b,):
            raise CorpusError("group labels must cover the batch")


def _pad(seqs) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lens.max())
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lens


def group_labels(records) -> np.ndarray:
    """Union-find over records sharing query text or document key."""
    n = len(records)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    by_query: dict[str, int] = {}
    by_key: dict[str, int] = {}
    for i, rec in enumerate(records):
        if rec.query in by_query:
            union(i, by_query[rec.query])
        else:
            by_query[rec.query] = i
        if rec.key in by_key:
            union(i, by_key[rec.key])
        else:
            by_key[rec.key] = i
    roots = [find(i) for i in range(n)]
    relabel = {r: k for k, r in enumerate(dict.fromkeys(roots))}
    return np.array([relabel[r] for r in roots], dtype=np.int64)


class BatchSource:
    """Seed-deterministic epoch-shuffled batches with in-batch negatives.

    Batch composition is a pure function of (records, batch_size, seed,
    step), so training can resume from a checkpoint mid-stream.
    """

    def __init__(self, records, vocab: Vocab, batch_size: int, seed: int,
                 max_length: int = 32):
        if batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not records:
            raise CorpusError("empty corpus")
        if batch_size > len(records):
            log.warning("batch_size %d exceeds corpus size %d; using one "
                        "smaller batch per epoch", batch_size, len(records))
        self.records = list(records)
        self.batch_size = batch_size
        self.seed = seed
        self._q_tokens = [tokenize(r.query, vocab, max_length) for r in self.records]
        self._d_tokens = [tokenize(r.document, vocab, max_length) for r in self.records]
        self.batches_per_epoch = max(1, -(-len(self.records) // batch_size))

    def _perm(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(derived_seed(self.seed, f"batch-epoch-{epoch}"))
        return rng.permutation(len(self.records))

    def batch_at(self, step: int) -> Batch:
        epoch, slot = divmod(step, self.batches_per_epoch)
        perm = self._perm(epoch)
        rows = perm[slot * self.batch_size:(slot + 1) * self.batch_size]
        recs = [self.records[i] for i in rows]
        q_ids, q_lens = _pad([self._q_tokens[i] for i in rows])
        d_ids, d_lens = _pad([self._d_tokens[i] for i in rows])
        batch = Batch(q_ids, q_lens, d_ids, d_lens,
                      alignment=np.arange(len(recs), dtype=np.int64),
                      groups=group_labels(recs),
                      keys=[r.key for r in recs], epoch=epoch)
        batch.validate()
        return batch


def make_batches(records, vocab: Vocab, batch_size: int, seed: int,
                 epochs: int = 1, max_length: int = 32):
    """Yield the batches of the first ``epochs`` epochs."""
    src = BatchSource(records, vocab, batch_size, seed, max_length)
    for step in range(epochs * src.batches_per_epoch):
        yield src.batch_at(step)


# -- synthetic clustered corpus ----------------------------------------------

def synth_corpus(n_clusters: int, docs_per_cluster: int, queries_per_doc: int,
                 vocab_size: int, seed: int,
                 doc_words: int = 12) -> list[PairRecord]:
    """Clustered corpus with disjoint per-cluster topical sub-vocabularies.

    Documents sample words from their cluster's slice only; queries are
    word subsets of their document plus extra cluster words.  Generation
    is seed-deterministic and guarantees distinct document texts.
    """
    if min(n_clusters, docs_per_cluster, queries_per_doc) < 1:
        raise ValueError("all corpus counts must be >= 1")
    if vocab_size < n_clusters * 8:
        raise CorpusError(f"vocab_size {vocab_size} < {n_clusters * 8}: "
                          "clusters need at least 8 distinct words each")
    rng = np.random.default_rng(derived_seed(seed, "synth"))
    width = vocab_size // n_clusters
    n_doc = min(doc_words, width)
    records = []
    for ci in range(n_clusters):
        slice_words = [f"w{ci * width + j:05d}" for j in range(width)]
        seen = set()
        for _ in range(docs_per_cluster):
            while True:
                words = [slice_words[k] for k in
                         rng.choice(width, size=n_doc, replace=False)]
                doc = " ".join(words)
                if doc not in seen:
                    seen.add(doc)
                    break
            key = content_key(doc)
            for _ in range(queries_per_doc):
                take = int(rng.integers(3, min(6, n_doc) + 1))
                sub = [words[k] for k in rng.choice(n_doc, size=take, replace=False)]
                extra = [slice_words[k] for k in
                         rng.choice(width, size=int(rng.integers(1, 3)), replace=False)]
                records.append(PairRecord(" ".join(sub + extra), doc, key,
                                          explicit_key=True))
    return records


def cluster_sidecar(records, n_clusters: int, docs_per_cluster: int,
                    queries_per_doc: int) -> list[tuple[str, int]]:
    """(key, cluster_id) rows for a synth corpus, one per distinct document."""
    per_cluster = docs_per_cluster * queries_per_doc
    out, seen = [], set()
    for i, rec in enumerate(records):
        if rec.key not in seen:
            seen.add(rec.key)
            out.append((rec.key, i // per_cluster))
    return out


def holdout_queries(records, fraction: float, seed: int):
    """Split off query pairs for evaluation, keeping >=1 train pair per doc.

    Only documents with several queries are eligible; one of their pairs
    moves to the held-out split.  Returns (train, heldout).
    """
    by_key: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        by_key.setdefault(rec.key, []).append(i)
    eligible = [idxs[-1] for idxs in by_key.values() if len(idxs) > 1]
    rng = np.random.default_rng(derived_seed(seed, "holdout"))
    rng.shuffle(eligible)
    n_out = min(len(eligible), int(round(fraction * len(records))))
    out_rows = set(eligible[:n_out])
    train = [r for i, r in enumerate(records) if i not in out_rows]
    held = [records[i] for i in sorted(out_rows)]
    return train, held
