"""One-to-many identifier -> document store with trie view and analytics.

Posting lists keep corpus insertion order ("natural order"); lookups
truncate deterministically to the order prefix, with an optional seeded
random-sample mode behind a flag.  The persistence format is a flat
sorted text file (identifier codes, then insertion sequence), which is
byte-stable across runs with the same assignments; the trie is rebuilt
on load.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from .ids import DocId, IdSpace, format_docid, parse_docid

log = logging.getLogger(__name__)

DEFAULT_LOOKUP_LIMIT = 1000


@dataclass
class Postings:
    space: IdSpace
    _lists: dict = field(default_factory=dict)     # DocId -> [keys]
    _members: dict = field(default_factory=dict)   # DocId -> set(keys)
    total_documents: int = 0
    rejected: int = 0

    def insert(self, doc_id, key: str) -> bool:
        """Add one assignment; duplicates of the same (id, key) are no-ops."""
        if not self.space.is_valid(doc_id):
            self.rejected += 1
            log.warning("rejected malformed identifier %r for %s", doc_id, key)
            return False
        doc_id = tuple(int(c) for c in doc_id)
        members = self._members.setdefault(doc_id, set())
        if key in members:
            return False
        members.add(key)
        self._lists.setdefault(doc_id, []).append(key)
        self.total_documents += 1
        return True

    def lookup(self, doc_id, limit: int = DEFAULT_LOOKUP_LIMIT,
               sample_rng=None) -> list[str]:
        """First ``limit`` keys in natural order; unknown id -> empty list.

        With ``sample_rng`` the truncation switches to a seeded random
        subsample (order preserved among the survivors).
        """
        keys = self._lists.get(tuple(int(c) for c in doc_id), [])
        if len(keys) <= limit:
            return list(keys)
        if sample_rng is None:
            return keys[:limit]
        chosen = sorted(sample_rng.choice(len(keys), size=limit, replace=False))
        return [keys[i] for i in chosen]

    def posting_size(self, doc_id) -> int:
        return len(self._lists.get(tuple(int(c) for c in doc_id), []))

    def unique_id_count(self) -> int:
        return sum(1 for keys in self._lists.values() if keys)

    def utilization_histogram(self) -> dict[int, int]:
        """posting size -> number of identifiers with that size."""
        hist: dict[int, int] = {}
        for keys in self._lists.values():
            if keys:
                hist[len(keys)] = hist.get(len(keys), 0) + 1
        return hist

    def items(self):
        return self._lists.items()

    def ids(self):
        return self._lists.keys()


def build(assignments, space: IdSpace) -> Postings:
    """Group (doc_id, key) pairs into postings, preserving input order."""
    store = Postings(space)
    for doc_id, key in assignments:
        store.insert(doc_id, key)
    return store


def save(store: Postings, path) -> None:
    """Write ``c1,c2,...<TAB>key`` lines sorted by codes, then insertion."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id in sorted(store.ids()):
            for key in store.lookup(doc_id, limit=store.total_documents + 1):
                fh.write(f"{format_docid(doc_id)}\t{key}\n")


def load(path, space: IdSpace) -> Postings:
    store = Postings(space)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                id_text, key = line.split("\t")
                doc_id = parse_docid(id_text)
            except ValueError:
                store.rejected += 1
                log.warning("skipping malformed index line %r", line)
                continue
            store.insert(doc_id, key)
    return store


def export_prefix_tree(store: Postings, max_depth: int | None = None,
                       min_posting: int = 1, sample_keys: int = 5) -> dict:
    """Nested node records of the identifier trie.

    Leaves carry posting sizes and up to ``sample_keys`` sample document
    keys; identifiers with postings below ``min_posting`` are dropped.
    ``max_depth`` cuts the tree early, aggregating sizes at the cut.
    """
    depth = store.space.length if max_depth is None else min(max_depth,
                                                             store.space.length)
    root: dict = {"code": None, "children": {}}
    for doc_id in sorted(store.ids()):
        size = store.posting_size(doc_id)
        if size < min_posting:
            continue
        node = root
        for level in range(depth):
            code = doc_id[level]
            node = node["children"].setdefault(code, {"code": code,
                                                      "children": {}})
        node["size"] = node.get("size", 0) + size
        samples = node.setdefault("samples", [])
        for key in store.lookup(doc_id, limit=sample_keys):
            if len(samples) < sample_keys:
                samples.append(key)
        node["leaves"] = node.get("leaves", 0) + 1

    def finish(node):
        kids = [finish(child) for _, child in sorted(node["children"].items())]
        out = {"code": node["code"]}
        if kids:
            out["children"] = kids
        for extra in ("size", "samples", "leaves"):
            if extra in node:
                out[extra] = node[extra]
        return out

    return finish(root)


def tree_leaf_count(tree: dict) -> int:
    """Distinct identifiers represented in an exported tree."""
    if "children" not in tree:
        return tree.get("leaves", 0)
    return sum(tree_leaf_count(c) for c in tree["children"]) \
        + tree.get("leaves", 0)


def save_tree(tree: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_tree(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
