"""Encoder and autoregressive identifier decoder.

The encoder is a small bag-of-words network: learned token embeddings,
masked mean pooling, two affine layers with a tanh nonlinearity, then
L2 normalization -- every representation leaves with unit norm.  Mean
pooling makes the encoder order-invariant by construction.

The decoder conditions on the query representation plus learned
embeddings of the generated prefix codes (empty slots reuse the begin
marker's row index).  Each identifier position owns a two-layer head
scoring the full identifier vocabulary, mirroring the per-position
structure of the indexing module; training uses the unmasked
distribution, while inference masks each step to its position slice
and renormalizes, so every emitted identifier is valid by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .ids import DocId, IdSpace


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    dim: int = 128
    enc_hidden: int = 128
    code_emb: int = 32
    dec_hidden: int = 128


class Encoder:
    def __init__(self, dims: ModelDims):
        self.dims = dims

    def init_params(self, rng) -> dict:
        d = self.dims
        return {
            "enc.emb": rng.standard_normal((d.vocab_size, d.dim)),
            "enc.w1": rng.standard_normal((d.dim, d.enc_hidden)) / np.sqrt(d.dim),
            "enc.b1": np.zeros(d.enc_hidden),
            "enc.w2": rng.standard_normal((d.enc_hidden, d.dim)) / np.sqrt(d.enc_hidden),
            "enc.b2": np.zeros(d.dim),
        }

    def build(self, ids: np.ndarray, lens: np.ndarray) -> dc.Expr:
        """Unit-norm representations (B, dim) of padded token id rows."""
        return dc.l2_normalize(self.build_prenorm(ids, lens))

    def build_prenorm(self, ids: np.ndarray, lens: np.ndarray) -> dc.Expr:
        ids = np.atleast_2d(ids)
        lens = np.asarray(lens).reshape(-1)
        mask = (np.arange(ids.shape[1])[None, :] < lens[:, None]).astype(np.float64)
        emb = dc.embed(dc.var("enc.emb"), ids)
        summed = dc.scale_rows(emb, dc.const(mask)).sum(axis=1)
        pooled = dc.scale_rows(summed, dc.const(1.0 / lens.astype(np.float64)))
        h = dc.tanh(pooled @ dc.var("enc.w1") + dc.var("enc.b1"))
        return h @ dc.var("enc.w2") + dc.var("enc.b2")

    def encode(self, params: dict, ids: np.ndarray, lens) -> np.ndarray:
        lens = np.asarray(lens).reshape(-1)
        if (lens < 1).any():
            raise ValueError("encode requires non-empty token sequences")
        return dc.forward(self.build(ids, lens), params)


@dataclass
class DecoderState:
    """Query conditioning summary plus the generated identifier prefix."""

    query_rep: np.ndarray
    prefix: tuple = ()


class Decoder:
    def __init__(self, dims: ModelDims, space: IdSpace):
        self.dims = dims
        self.space = space

    def init_params(self, rng) -> dict:
        d = self.dims
        in_dim = d.dim + (self.space.length - 1) * d.code_emb
        params = {"dec.code_emb": rng.standard_normal((self.space.vocab_size,
                                                       d.code_emb))}
        for i in range(self.space.length):
            params[f"dec.p{i}.w1"] = rng.standard_normal(
                (in_dim, d.dec_hidden)) / np.sqrt(in_dim)
            params[f"dec.p{i}.b1"] = np.zeros(d.dec_hidden)
            params[f"dec.p{i}.w2"] = 0.1 * rng.standard_normal(
                (d.dec_hidden, self.space.vocab_size))
            params[f"dec.p{i}.b2"] = np.zeros(self.space.vocab_size)
        return params

    # -- graph builders -----------------------------------------------------

    def build_step_logits(self, e_q: dc.Expr, row_of_query: np.ndarray,
                          slot_ids: np.ndarray, position: int) -> dc.Expr:
        """Unmasked vocabulary logits for N states at one 0-based position.

        ``row_of_query[n]`` selects the query representation row for
        state n; ``slot_ids`` is (N, length-1) of prefix codes padded
        with the begin marker.
        """
        n = slot_ids.shape[0]
        reps = dc.embed(e_q, row_of_query)
        slots = dc.embed(dc.var("dec.code_emb"), slot_ids).reshape(
            (n, slot_ids.shape[1] * self.dims.code_emb))
        x = dc.concat_last([reps, slots])
        h = dc.tanh(x @ dc.var(f"dec.p{position}.w1")
                    + dc.var(f"dec.p{position}.b1"))
        return h @ dc.var(f"dec.p{position}.w2") + dc.var(f"dec.p{position}.b2")

    def teacher_slot_ids(self, gold: np.ndarray, position: int) -> np.ndarray:
        """Prefix-slot rows for one teacher-forced step."""
        gold = np.atleast_2d(gold)
        b = gold.shape[0]
        slots = np.zeros((b, max(self.space.length - 1, 1)), dtype=np.int64)
        if position:
            slots[:, :position] = gold[:, :position]
        return slots

    def build_teacher_logits(self, e_q: dc.Expr, gold: np.ndarray) -> list:
        """Per-position unmasked logits (B, vocab), teacher-forced on gold."""
        gold = np.atleast_2d(gold)
        rows = np.arange(gold.shape[0])
        return [self.build_step_logits(e_q, rows,
                                       self.teacher_slot_ids(gold, i), i)
                for i in range(self.space.length)]

    # -- inference ------------------------------------------------------------

    def _slot_matrix(self, prefixes: np.ndarray) -> np.ndarray:
        n, got = prefixes.shape
        slots = np.zeros((n, max(self.space.length - 1, 1)), dtype=np.int64)
        if got:
            slots[:, :got] = prefixes
        return slots

    def step_log_probs(self, params: dict, reps: np.ndarray,
                       prefixes: np.ndarray, row_of_query: np.ndarray) -> np.ndarray:
        """Masked, renormalized log-probs over the next position's slice."""
        position = prefixes.shape[1] + 1
        lo, hi = self.space.slice_bounds(position)
        logits = dc.forward(
            self.build_step_logits(dc.const(np.atleast_2d(reps)),
                                   row_of_query, self._slot_matrix(prefixes),
                                   position - 1),
            params)
        sliced = logits[:, lo:hi + 1]
        shifted = sliced - sliced.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def decode_distribution(self, params: dict, state: DecoderState) -> np.ndarray:
        """Inference distribution over the full identifier vocabulary.

        Entries outside the next position's slice (and the markers) are
        masked to zero, then the row is renormalized.
        """
        got = len(state.prefix)
        if got >= self.space.length:
            raise ValueError("sequence complete: prefix already has "
                             f"{got} codes")
        for pos, code in enumerate(state.prefix, start=1):
            lo, hi = self.space.slice_bounds(pos)
            if not lo <= code <= hi:
                raise ValueError(f"prefix code {code} outside slice {lo}..{hi}")
        lp = self.step_log_probs(
            params, np.atleast_2d(state.query_rep),
            np.array([state.prefix], dtype=np.int64), np.array([0]))
        lo, hi = self.space.slice_bounds(got + 1)
        full = np.zeros(self.space.vocab_size)
        full[lo:hi + 1] = np.exp(lp[0])
        return full / full.sum()

    def beam_search_batch(self, params: dict, reps: np.ndarray,
                          beam: int, max_len: int | None = None) -> list:
        """Ranked (DocId, log-prob) lists for a batch of query representations.

        Scores sort non-increasing; exact ties break by lexicographic
        code order.  Emitted identifiers respect the slice layout via
        the inference mask.
        """
        if beam < 1:
            raise ValueError("beam must be >= 1")
        reps = np.atleast_2d(reps)
        steps = self.space.length if max_len is None else min(max_len, self.space.length)
        q = reps.shape[0]
        lp = np.zeros((q, 1))
        codes = np.zeros((q, 1, 0), dtype=np.int64)
        for t in range(steps):
            nb = codes.shape[1]
            flat_prefix = codes.reshape(q * nb, t)
            rows = np.repeat(np.arange(q), nb)
            step_lp = self.step_log_probs(params, reps, flat_prefix, rows)
            v = self.space.codes_per_pos
            lo, _ = self.space.slice_bounds(t + 1)
            cand_lp = (lp[:, :, None] + step_lp.reshape(q, nb, v)).reshape(q, nb * v)
            new_code = np.broadcast_to(np.arange(lo, lo + v), (q, nb, v)).reshape(q, nb * v)
            prefix_cols = [np.repeat(codes[:, :, j], v, axis=1) for j in range(t)]
            keep = min(beam, nb * v)
            # primary: descending log-prob; ties: lexicographic code order
            keys = tuple([new_code] + prefix_cols[::-1] + [-cand_lp])
            order = np.lexsort(keys, axis=1)[:, :keep]
            lp = np.take_along_axis(cand_lp, order, axis=1)
            picked = [np.take_along_axis(c, order, axis=1) for c in prefix_cols]
            picked.append(np.take_along_axis(new_code, order, axis=1))
            codes = np.stack(picked, axis=2)
        return [[(tuple(int(c) for c in codes[i, r]), float(lp[i, r]))
                 for r in range(codes.shape[1])] for i in range(q)]

    def beam_search(self, params: dict, query_rep: np.ndarray,
                    beam: int, max_len: int | None = None) -> list[tuple[DocId, float]]:
        return self.beam_search_batch(params, query_rep[None, :], beam, max_len)[0]

    def greedy(self, params: dict, query_rep: np.ndarray) -> DocId:
        """Stepwise argmax decoding (ties to lowest code)."""
        prefix: tuple = ()
        rep = np.atleast_2d(query_rep)
        for t in range(self.space.length):
            lp = self.step_log_probs(params, rep,
                                     np.array([prefix], dtype=np.int64),
                                     np.array([0]))[0]
            lo, _ = self.space.slice_bounds(t + 1)
            prefix = prefix + (lo + int(lp.argmax()),)
        return prefix
