"""Training objectives for joint identifier assignment and retrieval.

Distances between identifier distributions are summed per-row squared
Euclidean distances, so two L-row distributions are at most 2L apart.
The discrete contrastive loss is a triplet hinge on that distance; the
generation loss is teacher-forced cross-entropy over the identifier
vocabulary; the density loss penalizes soft exact-match overlap with
in-batch neighbours weighted by (detached) distribution distance; the
bottleneck loss combines InfoNCE over dense similarities with an
inverse-distance spread term; the information loss is a closed-form
Gaussian KL toward batch statistics.

Neighbour targets and density weights never carry gradient: targets are
argmax one-hots and weights are detached, which keeps the objective a
pure push on each item's own distribution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

log = logging.getLogger(__name__)

AUX_LOSSES = ("di", "bot", "ib")

LOG_PROB_FLOOR = float(np.log(1e-12))


@dataclass(frozen=True)
class Hyper:
    """Objective weights; defaults follow the reference configuration."""

    alpha: float = 3.0          # contrastive distance margin
    lam: float = 0.25           # auxiliary-criteria scale
    gamma: float = 0.05         # dense spread weight
    beta: float = 0.01          # information compression factor
    quant_weight: float = 1.0   # quantization reconstruction weight
    d_max: float | None = None  # defaults to 2L at use sites

    def d_max_for(self, length: int) -> float:
        return 2.0 * length if self.d_max is None else self.d_max


@dataclass(frozen=True)
class GaussianPrior:
    """Diagonal Gaussian prior for the information loss.

    Mean and variance default to detached statistics of the current
    batch (variance floored); ``sigma0`` is the fixed noise scale of the
    per-document Gaussian around its representation.  Explicit ``mu`` /
    ``var`` arrays override the batch estimates.
    """

    sigma0: float = 0.1
    var_floor: float = 1e-4
    mu: np.ndarray | None = None
    var: np.ndarray | None = None

    def fit(self, reps: np.ndarray) -> "GaussianPrior":
        reps = np.asarray(reps)
        if reps.shape[0] < 2:
            raise ValueError("prior estimation needs a batch of at least 2")
        return GaussianPrior(self.sigma0, self.var_floor,
                             mu=reps.mean(axis=0),
                             var=np.maximum(reps.var(axis=0), self.var_floor))


def _flatten_dist(p: dc.Expr, b: int, length: int, width: int) -> dc.Expr:
    return p.reshape((b, length * width))


def pairwise_distance(p: dc.Expr, q: dc.Expr, shape_p, shape_q) -> dc.Expr:
    """Sum over positions of squared row distances: (B_p, B_q) matrix.

    ``shape_*`` are the concrete (batch, length, width) triples of the
    two distribution stacks (graph nodes carry no static shapes).
    """
    bp, lp, wp = shape_p
    bq, lq, wq = shape_q
    if (lp, wp) != (lq, wq):
        raise ValueError(f"distribution shapes differ: {shape_p} vs {shape_q}")
    pf = _flatten_dist(p, bp, lp, wp)
    qf = _flatten_dist(q, bq, lq, wq)
    cross = (pf @ qf.T) * (-2.0)
    qn = dc.square(qf).sum(axis=1)
    pn = dc.square(pf).sum(axis=1)
    return dc.shift_rows(cross + qn, pn)


def negatives_mask(groups: np.ndarray) -> np.ndarray:
    """mask[i, j] = 1 where item j lies outside item i's positive group."""
    g = np.asarray(groups)
    return (g[:, None] != g[None, :]).astype(np.float64)


def contrastive_id_loss(dist_q: dc.Expr, dist_d: dc.Expr, shape,
                        alignment: np.ndarray, groups: np.ndarray,
                        alpha: float) -> dc.Expr:
    """Mean triplet hinge over (query, positive, in-batch negative) triples."""
    b, length, width = shape
    mask = negatives_mask(groups)
    n_triples = mask.sum()
    if n_triples == 0:
        log.warning("contrastive loss: batch is a single positive group, "
                    "no negatives available")
        return dc.const(np.float64(0.0))
    dist = pairwise_distance(dist_q, dist_d, shape, shape)
    pos_onehot = np.zeros((b, b))
    pos_onehot[np.arange(b), np.asarray(alignment)] = 1.0
    pos = (dist * dc.const(pos_onehot)).sum(axis=1)
    margins = dc.shift_rows(-dist + float(alpha), pos)
    return (dc.relu(margins) * dc.const(mask)).sum() / float(n_triples)


def gold_log_probs(logits: dc.Expr, gold: np.ndarray) -> dc.Expr:
    """Per-step gold log-probs from the step-major (L*B, vocab) logit stack."""
    gold = np.atleast_2d(gold)
    return dc.log_softmax_pick(logits, gold.T.reshape(-1))


def generation_loss_from_log_probs(picked: dc.Expr, batch_size: int) -> dc.Expr:
    """Batch mean of summed -log p(gold step); per-step log-probs below
    ln(1e-12) are clamped (their gradient stops pushing)."""
    return -dc.clip_min(picked, LOG_PROB_FLOOR).sum() / float(batch_size)


def generation_loss(logits: dc.Expr, gold: np.ndarray, vocab_size: int = 0) -> dc.Expr:
    """Teacher-forced cross-entropy over a step-major logit stack."""
    gold = np.atleast_2d(gold)
    return generation_loss_from_log_probs(gold_log_probs(logits, gold),
                                          gold.shape[0])


def density_loss(dist: dc.Expr, shape, groups: np.ndarray,
                 mode: str = "complement", d_max: float | None = None,
                 targets: dc.Expr | None = None,
                 weights: dc.Expr | None = None) -> dc.Expr:
    """Soft exact-match overlap with out-of-group neighbours, one side.

    overlap(x, x') sums, over positions, x's probability mass on x''s
    argmax code.  Per-item weights are the neighbour-mean distribution
    distance over d_max (``literal``) or its complement (default), and
    are always detached, as are the neighbour targets.  ``targets`` /
    ``weights`` may be injected for testing; they are detached here.
    """
    if mode not in ("complement", "literal"):
        raise ValueError(f"unknown density mode {mode!r}")
    b, length, width = shape
    if d_max is None:
        d_max = 2.0 * length
    mask = negatives_mask(groups)
    counts = mask.sum(axis=1)
    if targets is None:
        targets = dc.one_hot_argmax(dist)       # detached by construction
    else:
        targets = dc.stop_gradient(targets)
    pf = _flatten_dist(dist, b, length, width)
    tf = dc.stop_gradient(_flatten_dist(targets, b, length, width))
    overlap = pf @ tf.T
    if weights is None:
        d = pairwise_distance(dist, dist, shape, shape)
        mean_d = (d * dc.const(mask)).sum(axis=1) * dc.const(
            1.0 / np.maximum(counts, 1.0))
        w = mean_d * (1.0 / d_max)
        if mode == "complement":
            w = 1.0 - w
        weights = w * dc.const((counts > 0).astype(np.float64))
    weights = dc.stop_gradient(weights)
    per_item = (overlap * dc.const(mask)).sum(axis=1)
    return (weights * per_item).sum() / float(b)


def bottleneck_loss(e_q: dc.Expr, e_d: dc.Expr, b: int,
                    alignment: np.ndarray, groups: np.ndarray,
                    gamma: float, eps_dist: float = 1e-6) -> dc.Expr:
    """InfoNCE over dense similarities plus inverse-distance spread terms.

    The InfoNCE denominator runs over every in-batch document including
    the positive; spread terms average 1/(squared distance + eps) over
    unordered same-side pairs outside positive groups.
    """
    sims = e_q @ e_d.T
    pos_onehot = np.zeros((b, b))
    pos_onehot[np.arange(b), np.asarray(alignment)] = 1.0
    term1 = -(dc.log_softmax(sims) * dc.const(pos_onehot)).sum() / float(b)
    pair_mask = np.triu(negatives_mask(groups), k=1)
    spread = _inverse_distance(e_d, pair_mask, eps_dist) + \
        _inverse_distance(e_q, pair_mask, eps_dist)
    return term1 + float(gamma) * spread


def _inverse_distance(e: dc.Expr, pair_mask: np.ndarray, eps: float) -> dc.Expr:
    n_pairs = pair_mask.sum()
    if n_pairs == 0:
        return dc.const(np.float64(0.0))
    sq = dc.square(e).sum(axis=1)
    cross = (e @ e.T) * (-2.0)
    d = dc.shift_rows(cross + sq, sq)
    inv = 1.0 / (d + float(eps))
    return (inv * dc.const(pair_mask)).sum() / float(n_pairs)


def ib_loss(e_d: dc.Expr, b: int, prior: GaussianPrior, beta: float) -> dc.Expr:
    """Closed-form KL from per-document Gaussians to the batch prior.

    Per dimension: log(sigma_B/sigma0) + (sigma0^2 + (e-mu)^2) /
    (2 sigma_B^2) - 1/2, summed over dimensions, averaged over the
    batch, scaled by beta.  Batch statistics are detached.
    """
    if b < 2 and prior.mu is None:
        raise ValueError("information loss needs batch >= 2 to estimate "
                         "the prior variance")
    if prior.mu is not None:
        mu = dc.const(np.asarray(prior.mu, dtype=np.float64))
        var = dc.const(np.maximum(np.asarray(prior.var, dtype=np.float64),
                                  prior.var_floor))
    else:
        mu = dc.stop_gradient(e_d.mean(axis=0))
        var = dc.stop_gradient(
            dc.clip_min(dc.square(e_d - mu).mean(axis=0), prior.var_floor))
    s0sq = prior.sigma0 ** 2
    dev2 = dc.square(e_d - mu)
    kl = (dc.log(var) * 0.5 - float(np.log(prior.sigma0))) \
        + (dev2 + s0sq) / (var * 2.0) - 0.5
    return kl.sum(axis=1).mean() * float(beta)


@dataclass
class LossBreakdown:
    """Numeric components of one step's objective."""

    l_c: float
    l_ce: float
    l_di: float = 0.0
    l_bot: float = 0.0
    l_ib: float = 0.0
    l_quant: float = 0.0
    total: float = 0.0
    lam: float = 0.25
    quant_weight: float = 1.0
    active: tuple = AUX_LOSSES
    clamp_incidents: int = 0

    def recombine(self) -> float:
        aux = sum(getattr(self, f"l_{name}") for name in self.active)
        return self.l_c + self.l_ce + self.lam * aux \
            + self.quant_weight * self.l_quant

    def to_record(self, **extra) -> dict:
        rec = {"l_c": self.l_c, "l_ce": self.l_ce, "l_di": self.l_di,
               "l_bot": self.l_bot, "l_ib": self.l_ib,
               "l_quant": self.l_quant, "total": self.total,
               "lambda": self.lam, "active": ",".join(self.active),
               "clamp_incidents": self.clamp_incidents}
        rec.update(extra)
        return rec


def combine(l_c: dc.Expr, l_ce: dc.Expr, lam: float,
            l_di: dc.Expr | None = None, l_bot: dc.Expr | None = None,
            l_ib: dc.Expr | None = None, l_quant: dc.Expr | None = None,
            quant_weight: float = 1.0, disabled: frozenset = frozenset()) -> dc.Expr:
    """Total objective; disabled auxiliary terms contribute exactly 0."""
    unknown = set(disabled) - set(AUX_LOSSES)
    if unknown:
        raise ValueError(f"unknown loss switches {sorted(unknown)}; "
                         f"can disable {AUX_LOSSES}")
    total = l_c + l_ce
    aux = [expr for name, expr in (("di", l_di), ("bot", l_bot), ("ib", l_ib))
           if name not in disabled and expr is not None]
    if aux:
        s = aux[0]
        for a in aux[1:]:
            s = s + a
        total = total + s * float(lam)
    if l_quant is not None:
        total = total + l_quant * float(quant_weight)
    return total
