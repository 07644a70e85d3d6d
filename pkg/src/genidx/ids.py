"""Identifier-space layout shared by the indexer, decoder, and store.

An identifier is a tuple of ``length`` integer codes; the code at
position i (1-based) lives in the slice ``[codes_per_pos*(i-1)+1,
codes_per_pos*i]``.  The decoder vocabulary adds begin/end markers, so
its size is ``length * codes_per_pos + 2`` (1026 at the default 4x256
layout).  Text form is comma-separated codes in slice order, e.g.
``24,426,703,876``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DocId = tuple  # L integer codes, position i in its slice


@dataclass(frozen=True)
class IdSpace:
    length: int = 4
    codes_per_pos: int = 256

    def __post_init__(self):
        if self.length < 1 or self.codes_per_pos < 1:
            raise ValueError("identifier layout extents must be >= 1")

    @property
    def n_codes(self) -> int:
        return self.length * self.codes_per_pos

    @property
    def vocab_size(self) -> int:
        # numeric codes + begin + end markers
        return self.n_codes + 2

    @property
    def bos(self) -> int:
        return 0

    @property
    def eos(self) -> int:
        return self.n_codes + 1

    def slice_bounds(self, position: int) -> tuple[int, int]:
        """Inclusive code bounds for a 1-based position."""
        if not 1 <= position <= self.length:
            raise ValueError(f"position {position} outside 1..{self.length}")
        lo = self.codes_per_pos * (position - 1) + 1
        return lo, lo + self.codes_per_pos - 1

    def is_valid(self, doc_id) -> bool:
        if len(doc_id) != self.length:
            return False
        for i, c in enumerate(doc_id, start=1):
            lo, hi = self.slice_bounds(i)
            if not lo <= int(c) <= hi:
                return False
        return True

    def validate(self, doc_id) -> DocId:
        if not self.is_valid(doc_id):
            raise ValueError(f"invalid identifier {doc_id!r} for layout "
                             f"{self.length}x{self.codes_per_pos}")
        return tuple(int(c) for c in doc_id)

    def rows_to_ids(self, local_argmax: np.ndarray) -> list[DocId]:
        """Local per-position argmax indices (B, L) -> global-code tuples."""
        arr = np.asarray(local_argmax)
        offsets = np.arange(self.length) * self.codes_per_pos + 1
        codes = arr + offsets
        return [tuple(int(c) for c in row) for row in codes]


def format_docid(doc_id) -> str:
    return ",".join(str(int(c)) for c in doc_id)


def parse_docid(text: str) -> DocId:
    try:
        return tuple(int(p) for p in text.strip().split(","))
    except ValueError as exc:
        raise ValueError(f"malformed identifier text {text!r}") from exc
