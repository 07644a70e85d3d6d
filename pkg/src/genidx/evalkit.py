"""Expectation-based retrieval metrics, document splits, report assembly.

A query's beam expands to ranked identifier buckets whose sizes come
from the posting store (1000-document truncation applied per query in
beam order, and per lookup).  The expectation variants of Recall@K and
MRR@cutoff treat the documents inside the target's bucket as uniformly
randomly ordered; the closed forms below are validated against
brute-force permutation enumeration in the tests.  Deterministic
variants count the target at its natural position instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .idstore import DEFAULT_LOOKUP_LIMIT, Postings

SPLIT_EXISTING = "existing"
SPLIT_NEW_CONTENT = "new_content"
SPLIT_NEW_SEMANTIC = "new_semantic"


def expected_recall_at_k(c: int, m: int, k: int) -> float:
    """Expected Recall@K with c docs ranked before the target's bucket of
    size m, the target uniformly placed within its bucket."""
    if m < 1 or c < 0 or k < 1:
        raise ValueError("need m >= 1, c >= 0, K >= 1")
    if c >= k:
        return 0.0
    if c + m <= k:
        return 1.0
    return (k - c) / m


def expected_mrr(c: int, m: int, cutoff: int = 10) -> float:
    """Expected reciprocal rank under the same convention; ranks beyond
    the cutoff contribute zero."""
    if m < 1 or c < 0 or cutoff < 1:
        raise ValueError("need m >= 1, c >= 0, cutoff >= 1")
    top = min(m, max(0, cutoff - c))
    return sum(1.0 / (c + j) for j in range(1, top + 1)) / m


@dataclass
class Bucket:
    doc_id: tuple
    size: int
    contains_target: bool
    target_position: int = 0     # 1-based natural position when contained


@dataclass
class RankedBuckets:
    """Beam-ordered identifier buckets for one query."""

    buckets: list = field(default_factory=list)

    @property
    def total_docs(self) -> int:
        return sum(b.size for b in self.buckets)

    def target_location(self) -> tuple[int, int, int] | None:
        """(docs before bucket, bucket size, natural position) or None."""
        before = 0
        for b in self.buckets:
            if b.contains_target:
                return before, b.size, b.target_position
            before += b.size
        return None


def expand_buckets(ranked_ids, store: Postings, target_key: str,
                   per_query_limit: int = DEFAULT_LOOKUP_LIMIT,
                   per_lookup_limit: int = DEFAULT_LOOKUP_LIMIT) -> RankedBuckets:
    """Expand beam-ranked identifiers through the store into buckets.

    Buckets are truncated per lookup and again once the per-query budget
    runs out; a bucket straddling the budget keeps only its prefix.
    """
    out = RankedBuckets()
    budget = per_query_limit
    for doc_id, _ in ranked_ids:
        if budget <= 0:
            break
        keys = store.lookup(doc_id, limit=min(per_lookup_limit, budget))
        if not keys:
            continue
        contains = target_key in keys
        pos = keys.index(target_key) + 1 if contains else 0
        out.buckets.append(Bucket(tuple(doc_id), len(keys), contains, pos))
        budget -= len(keys)
    return out


@dataclass
class Metrics:
    n_queries: int = 0
    recall_expected: dict = field(default_factory=dict)
    recall_deterministic: dict = field(default_factory=dict)
    mrr_expected: float = 0.0
    mrr_deterministic: float = 0.0
    docs_per_query: float = 0.0
    unique_ids: int = 0
    empty_query_misses: int = 0
    per_split: dict = field(default_factory=dict)

    def validate(self) -> None:
        for series in (self.recall_expected, self.recall_deterministic):
            ks = sorted(series)
            for a, b in zip(ks, ks[1:]):
                if series[a] > series[b] + 1e-12:
                    raise AssertionError(f"recall not monotone in K: {series}")
            for v in series.values():
                if not -1e-12 <= v <= 1 + 1e-12:
                    raise AssertionError(f"recall outside [0,1]: {series}")

    def to_dict(self) -> dict:
        out = {
            "n_queries": self.n_queries,
            "recall_expected": {str(k): v for k, v in
                                sorted(self.recall_expected.items())},
            "recall_deterministic": {str(k): v for k, v in
                                     sorted(self.recall_deterministic.items())},
            "mrr10_expected": self.mrr_expected,
            "mrr10_deterministic": self.mrr_deterministic,
            "docs_per_query": self.docs_per_query,
            "unique_ids": self.unique_ids,
            "empty_query_misses": self.empty_query_misses,
        }
        if self.per_split:
            out["per_split"] = {name: m.to_dict()
                                for name, m in sorted(self.per_split.items())}
        return out


def _aggregate(per_query: list[dict], ks, cutoff: int) -> Metrics:
    m = Metrics(n_queries=len(per_query))
    if not per_query:
        m.recall_expected = {k: 0.0 for k in ks}
        m.recall_deterministic = {k: 0.0 for k in ks}
        return m
    for k in ks:
        m.recall_expected[k] = float(np.mean([q["re"][k] for q in per_query]))
        m.recall_deterministic[k] = float(np.mean([q["rd"][k] for q in per_query]))
    m.mrr_expected = float(np.mean([q["me"] for q in per_query]))
    m.mrr_deterministic = float(np.mean([q["md"] for q in per_query]))
    m.docs_per_query = float(np.mean([q["dq"] for q in per_query]))
    m.empty_query_misses = sum(q.get("empty", 0) for q in per_query)
    m.validate()
    return m


def score_query(buckets: RankedBuckets, ks, cutoff: int = 10) -> dict:
    """Per-query metric contributions from one bucket expansion."""
    loc = buckets.target_location()
    row = {"dq": buckets.total_docs}
    if loc is None:
        row["re"] = {k: 0.0 for k in ks}
        row["rd"] = {k: 0.0 for k in ks}
        row["me"] = 0.0
        row["md"] = 0.0
        return row
    before, size, pos = loc
    rank = before + pos
    row["re"] = {k: expected_recall_at_k(before, size, k) for k in ks}
    row["rd"] = {k: 1.0 if rank <= k else 0.0 for k in ks}
    row["me"] = expected_mrr(before, size, cutoff)
    row["md"] = 1.0 / rank if rank <= cutoff else 0.0
    return row


def evaluate_rankings(rankings, store: Postings, target_keys,
                      ks=(1, 5, 10), cutoff: int = 10,
                      split_labels: dict | None = None,
                      per_query_limit: int = DEFAULT_LOOKUP_LIMIT) -> Metrics:
    """Aggregate metrics over per-query beam rankings.

    ``rankings`` holds one ranked (doc_id, log_prob) list per query (an
    empty list marks a query that could not be processed and counts as a
    miss); ``target_keys`` the gold document key per query.
    """
    rows, row_splits = [], []
    for ranked, target in zip(rankings, target_keys):
        if not ranked:
            row = {"re": {k: 0.0 for k in ks}, "rd": {k: 0.0 for k in ks},
                   "me": 0.0, "md": 0.0, "dq": 0, "empty": 1}
        else:
            row = score_query(
                expand_buckets(ranked, store, target,
                               per_query_limit=per_query_limit), ks, cutoff)
        rows.append(row)
        row_splits.append(split_labels.get(target) if split_labels else None)
    metrics = _aggregate(rows, ks, cutoff)
    metrics.unique_ids = store.unique_id_count()
    if split_labels:
        for name in sorted(set(s for s in row_splits if s is not None)):
            sub = [r for r, s in zip(rows, row_splits) if s == name]
            metrics.per_split[name] = _aggregate(sub, ks, cutoff)
            metrics.per_split[name].unique_ids = metrics.unique_ids
    return metrics


def classify_new_docs(train_keys, train_ids, assignments) -> dict:
    """Label evaluation documents against the training corpus.

    existing: key seen in training; new_content: unseen key whose
    assigned identifier is a training identifier; new_semantic: unseen
    key with an out-of-distribution identifier.
    """
    train_keys = set(train_keys)
    train_ids = {tuple(i) for i in train_ids}
    labels = {}
    for key, doc_id in assignments:
        if key in train_keys:
            labels[key] = SPLIT_EXISTING
        elif tuple(doc_id) in train_ids:
            labels[key] = SPLIT_NEW_CONTENT
        else:
            labels[key] = SPLIT_NEW_SEMANTIC
    return labels


def report_text(metrics: Metrics, config_hash: str = "",
                store_stats: dict | None = None) -> str:
    """Structured-text metrics report (JSON document)."""
    doc = {"metrics": metrics.to_dict(), "config_hash": config_hash}
    if store_stats:
        doc["store"] = store_stats
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def histogram_csv(hist: dict[int, int]) -> str:
    """``size,count`` lines for plotting, ascending by size."""
    lines = ["size,count"]
    lines += [f"{size},{count}" for size, count in sorted(hist.items())]
    return "\n".join(lines) + "\n"
