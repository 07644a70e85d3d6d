"""Semantic indexing: dense representation -> distribution over codes.

Three interchangeable implementations share one contract: given a
unit-norm representation they produce one probability simplex over
``codes_per_pos`` slice-local codes per identifier position, and the
whole map is differentiable with respect to the input and the module
parameters.

* ``MlpIndexer``     -- an independent two-layer softmax network per
  position (O(1) inference).
* ``PqIndexer``      -- the input is split into one sub-vector per
  position; each sub-vector is costed against its group's centroids and
  the position simplex is the row of a balanced Sinkhorn assignment.
* ``RqIndexer``      -- staged residual quantization: each stage costs
  the running residual against a full-dimension codebook; selection is
  nearest-vector, simplexes are Sinkhorn rows of the stage costs.

The Sinkhorn solver runs in the log domain with a fixed number of
unrolled iterations, so gradients flow through the whole iteration.
Row marginals are 1 per item (assignment distributions); column
marginals are pulled toward the uniform ``batch/codes`` balance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .ids import DocId, IdSpace


@dataclass(frozen=True)
class SinkhornParams:
    epsilon: float = 0.003
    iterations: int = 100

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("sinkhorn epsilon must be > 0")
        if self.iterations < 1:
            raise ValueError("sinkhorn needs at least one iteration")


def sinkhorn(cost: dc.Expr, n_rows: int, n_cols: int,
             params: SinkhornParams) -> dc.Expr:
    """Row-conditional balanced assignment of an (n_rows, n_cols) cost expr.

    Each iteration applies a column scaling toward the uniform
    ``n_rows/n_cols`` marginal and then a row scaling, so the returned
    plan has rows summing to exactly 1 and columns approaching balance
    as iterations grow.  Log-domain updates guard against underflow.
    """
    log_kernel = cost * (-1.0 / params.epsilon)
    log_col_target = float(np.log(n_rows / n_cols))
    # row update first so per-row cost shifts are absorbed exactly; a final
    # row rescale leaves rows summing to 1 after the last column update
    with_g = log_kernel
    for _ in range(params.iterations):
        f = -dc.logsumexp(with_g, axis=1)
        g = log_col_target - dc.logsumexp(dc.shift_rows(log_kernel, f), axis=0)
        with_g = log_kernel + g
    f = -dc.logsumexp(with_g, axis=1)
    return dc.exp(dc.shift_rows(with_g, f))


def sinkhorn_matrix(cost: np.ndarray, params: SinkhornParams) -> np.ndarray:
    """Numeric convenience: solve for a concrete cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    b, v = cost.shape
    return dc.forward(sinkhorn(dc.const(cost), b, v, params), {})


def _sq_dist_cost(x: dc.Expr, x_rows: int, codebook: dc.Expr,
                  cb_sq_norms: dc.Expr) -> dc.Expr:
    """(rows, V) squared euclidean costs: |x|^2 - 2 x.C^T + |c|^2."""
    x_norms = dc.square(x).sum(axis=1)
    cross = (x @ codebook.T) * (-2.0)
    return dc.shift_rows(cross + cb_sq_norms, x_norms)


@dataclass
class IndexerOutput:
    """Graph-level products of one assignment pass."""

    dist: dc.Expr                      # (B, L, V); rows are simplexes
    quantized: dc.Expr | None = None   # (B, dim) reconstruction, PQ/RQ only
    mse: dc.Expr | None = None         # scalar batch-mean squared error
    aux: dict = field(default_factory=dict)


class _IndexerBase:
    kind = "?"

    def __init__(self, dim: int, space: IdSpace,
                 sink: SinkhornParams | None = None):
        self.dim = dim
        self.space = space
        self.sink = sink or SinkhornParams()

    def param_names(self) -> list[str]:
        return sorted(self.init_params(np.random.default_rng(0)))

    def assign(self, params: dict, e: np.ndarray, train: bool = False,
               rng=None) -> np.ndarray:
        """Numeric assignment of a batch of representations -> (B, L, V)."""
        e = np.atleast_2d(np.asarray(e, dtype=np.float64))
        out = self.build(dc.const(e), e.shape[0], train=train, rng=rng)
        return dc.forward(out.dist, params)

    def assign_ids(self, params: dict, e: np.ndarray) -> list[DocId]:
        return to_docids(self.assign(params, e), self.space)


class MlpIndexer(_IndexerBase):
    """One independent two-layer softmax network per identifier position."""

    kind = "mlp"

    def __init__(self, dim: int, space: IdSpace, hidden: int = 128,
                 dropout: float = 0.2, sink: SinkhornParams | None = None):
        super().__init__(dim, space, sink)
        self.hidden = hidden
        self.dropout = dropout

    def init_params(self, rng) -> dict:
        p = {}
        for i in range(self.space.length):
            p[f"idx.p{i}.w1"] = rng.standard_normal(
                (self.dim, self.hidden)) / np.sqrt(self.dim)
            p[f"idx.p{i}.b1"] = np.zeros(self.hidden)
            # confident random head: distribution distances start inside the
            # hinge's dynamic range instead of at the all-uniform saddle
            p[f"idx.p{i}.w2"] = 3.0 * rng.standard_normal(
                (self.hidden, self.space.codes_per_pos))
            p[f"idx.p{i}.b2"] = np.zeros(self.space.codes_per_pos)
        return p

    def build(self, e: dc.Expr, n: int, train: bool = False,
              rng=None) -> IndexerOutput:
        if train and self.dropout > 0 and rng is None:
            raise ValueError("training-mode dropout needs an rng")
        parts = []
        for i in range(self.space.length):
            h = dc.tanh(e @ dc.var(f"idx.p{i}.w1") + dc.var(f"idx.p{i}.b1"))
            if train and self.dropout > 0:
                keep = (rng.random((n, self.hidden)) >= self.dropout)
                h = h * dc.const(keep / (1.0 - self.dropout))
            parts.append(h @ dc.var(f"idx.p{i}.w2") + dc.var(f"idx.p{i}.b2"))
        logits = dc.concat_last(parts).reshape(
            (n, self.space.length, self.space.codes_per_pos))
        return IndexerOutput(dist=dc.softmax(logits))


class PqIndexer(_IndexerBase):
    """Product quantization: per-group centroids, balanced Sinkhorn rows."""

    kind = "pq"

    def __init__(self, dim: int, space: IdSpace,
                 sink: SinkhornParams | None = None):
        super().__init__(dim, space, sink)
        if dim % space.length:
            raise ValueError(f"dim {dim} not divisible into "
                             f"{space.length} sub-vectors")
        self.sub = dim // space.length

    def init_params(self, rng) -> dict:
        v = self.space.codes_per_pos
        return {f"idx.g{g}.codebook":
                rng.standard_normal((v, self.sub)) / np.sqrt(self.sub)
                for g in range(self.space.length)}

    def build(self, e: dc.Expr, n: int, train: bool = False,
              rng=None) -> IndexerOutput:
        v = self.space.codes_per_pos
        rows, selected, picks = [], [], []
        for g in range(self.space.length):
            cb = dc.var(f"idx.g{g}.codebook")
            cb_norms = dc.square(cb).sum(axis=1)
            sub = dc.slice_last(e, g * self.sub, (g + 1) * self.sub)
            cost = _sq_dist_cost(sub, n, cb, cb_norms)
            rows.append(sinkhorn(cost, n, v, self.sink))
            picks.append(dc.one_hot_argmax(rows[-1]))
            selected.append(picks[-1] @ cb)
        dist = dc.concat_last(rows).reshape((n, self.space.length, v))
        quantized = dc.concat_last(selected)
        mse = dc.square(e - quantized).sum(axis=1).mean()
        return IndexerOutput(dist=dist, quantized=quantized, mse=mse,
                             aux={"selections": picks})

    def init_from_embeddings(self, params: dict, embs: np.ndarray, rng) -> dict:
        """Replace codebooks with k-means++ seeds over embedding sub-vectors."""
        out = dict(params)
        for g in range(self.space.length):
            sub = embs[:, g * self.sub:(g + 1) * self.sub]
            out[f"idx.g{g}.codebook"] = kmeans_pp(
                sub, self.space.codes_per_pos, rng)
        return out


class RqIndexer(_IndexerBase):
    """Residual quantization: staged nearest-vector selection, Sinkhorn rows."""

    kind = "rq"

    def init_params(self, rng) -> dict:
        v = self.space.codes_per_pos
        return {f"idx.s{t}.codebook":
                rng.standard_normal((v, self.dim)) / np.sqrt(self.dim)
                for t in range(self.space.length)}

    def build(self, e: dc.Expr, n: int, train: bool = False,
              rng=None) -> IndexerOutput:
        v = self.space.codes_per_pos
        rows, residuals, picks = [], [], []
        residual = e
        quantized = None
        for t in range(self.space.length):
            cb = dc.var(f"idx.s{t}.codebook")
            cb_norms = dc.square(cb).sum(axis=1)
            cost = _sq_dist_cost(residual, n, cb, cb_norms)
            rows.append(sinkhorn(cost, n, v, self.sink))
            # nearest vector to the running residual, not the balanced argmax
            nearest = dc.one_hot_argmax(cost * (-1.0))
            picks.append(nearest)
            picked = nearest @ cb
            quantized = picked if quantized is None else quantized + picked
            residual = residual - picked
            residuals.append(residual)
        dist = dc.concat_last(rows).reshape((n, self.space.length, v))
        mse = dc.square(e - quantized).sum(axis=1).mean()
        return IndexerOutput(dist=dist, quantized=quantized, mse=mse,
                             aux={"residuals": residuals, "selections": picks})

    def init_from_embeddings(self, params: dict, embs: np.ndarray, rng) -> dict:
        """Seed stage codebooks with k-means++ over the residual stream."""
        out = dict(params)
        residual = np.asarray(embs, dtype=np.float64).copy()
        for t in range(self.space.length):
            cb = kmeans_pp(residual, self.space.codes_per_pos, rng)
            out[f"idx.s{t}.codebook"] = cb
            d = _sq_dist_matrix(residual, cb)
            residual = residual - cb[d.argmin(axis=1)]
        return out


def make_indexer(kind: str, dim: int, space: IdSpace,
                 sink: SinkhornParams | None = None, *,
                 mlp_hidden: int = 128, dropout: float = 0.2) -> _IndexerBase:
    if kind == "mlp":
        return MlpIndexer(dim, space, hidden=mlp_hidden, dropout=dropout,
                          sink=sink)
    if kind == "pq":
        return PqIndexer(dim, space, sink=sink)
    if kind == "rq":
        return RqIndexer(dim, space, sink=sink)
    raise ValueError(f"unknown indexer kind {kind!r} (want mlp|pq|rq)")


def to_docid(dist: np.ndarray, space: IdSpace) -> DocId:
    """Argmax identifier of one (L, V) distribution; ties to lowest code."""
    arr = np.asarray(dist)
    if arr.ndim != 2 or arr.shape != (space.length, space.codes_per_pos):
        raise ValueError(f"expected one ({space.length}, "
                         f"{space.codes_per_pos}) distribution, got {arr.shape}")
    return space.rows_to_ids(arr.argmax(axis=-1)[None, :])[0]


def to_docids(dist: np.ndarray, space: IdSpace) -> list[DocId]:
    arr = np.asarray(dist)
    if arr.ndim == 2:
        return [to_docid(arr, space)]
    return space.rows_to_ids(arr.argmax(axis=-1))


def _sq_dist_matrix(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :])


def kmeans_pp(points: np.ndarray, k: int, rng) -> np.ndarray:
    """k-means++ seeding: spread k centroids over the point cloud."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n < k:
        raise ValueError(f"k-means++ needs at least {k} points, got {n}")
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[int(rng.integers(n))]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:          # all mass collapsed; fall back to uniform picks
            centroids[i] = pts[int(rng.integers(n))]
        else:
            centroids[i] = pts[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, ((pts - centroids[i]) ** 2).sum(axis=1))
    return centroids
