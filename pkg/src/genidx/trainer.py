"""Optimization loop: schedules, decoupled-decay Adam, checkpoints.

Every step re-derives the gold identifiers from the current indexing
module's argmax over the document distributions, so identifier
assignment and retrieval co-train fully end to end; nothing is cached
across steps.  All randomness flows from one seed through stable
per-component hashes, which makes runs bit-reproducible within a build
and lets training resume from a checkpoint mid-stream.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import criteria as cr
from . import diffcore as dc
from . import indexer as ix
from . import textdata as td
from .ids import IdSpace
from .model import Decoder, Encoder, ModelDims

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConfigError(Exception):
    """Unknown key, bad value, or inconsistent training configuration."""


class TrainingDiverged(Exception):
    """Loss became non-finite; a diagnostic dump has been written."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 256
    learning_rate: float = 1e-3    # desk-scale default; 1e-4 suits long runs
    warmup_steps: int = -1          # -1: 5% of steps
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.01
    grad_clip: float = 5.0
    lr_decay: str = "constant"      # constant | cosine
    lam: float = 0.25
    gamma: float = 0.05
    beta: float = 0.01
    alpha: float = 3.0
    sigma0: float = 0.1
    var_floor: float = 1e-4
    quant_weight: float = 1.0
    density_mode: str = "complement"
    indexer: str = "mlp"
    disable_loss: str = ""          # csv subset of di,bot,ib
    seed: int = 0
    checkpoint_interval: int = 0    # 0: final checkpoint only
    log_interval: int = 50
    steps_per_epoch: int = -1       # -1: max(corpus pass, steps/10)
    dim: int = 128
    enc_hidden: int = 128
    dec_hidden: int = 128
    code_emb: int = 32
    code_len: int = 4
    codes_per_pos: int = 256
    mlp_hidden: int = 128
    dropout: float = 0.2
    query_word_dropout: float = 0.3   # per-step query token subsampling
    self_query_steps: int = 2         # every n-th step decodes doc subsets
    sinkhorn_epsilon: float = 0.003
    sinkhorn_iterations: int = 100
    max_length: int = 32
    min_word_freq: int = 1
    probe_docs: int = 256
    dtype: str = "float32"          # training-loop arithmetic; tests use float64

    def disabled(self) -> frozenset:
        items = frozenset(p.strip() for p in self.disable_loss.split(",")
                          if p.strip())
        bad = items - set(cr.AUX_LOSSES)
        if bad:
            raise ConfigError(f"disable_loss entries {sorted(bad)} unknown; "
                              f"choose from {cr.AUX_LOSSES}")
        return items

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.warmup_steps > self.steps:
            raise ConfigError("warmup_steps must not exceed steps")
        if self.indexer not in ("mlp", "pq", "rq"):
            raise ConfigError(f"indexer {self.indexer!r} not one of mlp|pq|rq")
        if self.lr_decay not in ("constant", "cosine"):
            raise ConfigError(f"lr_decay {self.lr_decay!r} not constant|cosine")
        if self.density_mode not in ("complement", "literal"):
            raise ConfigError("density_mode must be complement|literal")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32|float64")
        self.disabled()

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}"
                 for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw: str):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    kind = _FIELDS[name].type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; unknown keys are fatal."""
    cfg = base or TrainConfig()
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        name, raw = (p.strip() for p in line.split("=", 1))
        updates[name] = _coerce(name, raw)
    cfg = cfg.replace(**updates)
    cfg.validate()
    return cfg


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def apply_overrides(cfg: TrainConfig, pairs) -> TrainConfig:
    """key=value overrides (CLI --set); keys must name config fields."""
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        name, raw = (p.strip() for p in pair.split("=", 1))
        updates[name] = _coerce(name, raw)
    out = cfg.replace(**updates)
    out.validate()
    return out


# -- schedules ----------------------------------------------------------------

LAM_INITIAL = 0.01


def lambda_schedule(step: int, steps_per_epoch: int, lam_target: float) -> float:
    """Linear from 0.01 at step 0 to the target at one epoch, then flat."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if steps_per_epoch <= 0 or step >= steps_per_epoch:
        return lam_target
    frac = step / steps_per_epoch
    return LAM_INITIAL + (lam_target - LAM_INITIAL) * frac


def lr_schedule(step: int, warmup: int, base_lr: float,
                decay: str = "constant", total_steps: int = 0) -> float:
    """Linear 0 -> base over warmup; constant after (cosine behind a flag)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if decay == "cosine" and total_steps > warmup:
        frac = (step - warmup) / (total_steps - warmup)
        return base_lr * 0.5 * (1.0 + float(np.cos(np.pi * min(frac, 1.0))))
    return base_lr


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 weight_decay: float = 0.01, eps: float = 1e-8):
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1 - b1 ** self.t
        bc2 = 1 - b2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = m / bc1
            update /= np.sqrt(v / bc2) + self.eps
            p = params[name] * (1.0 - lr * self.weight_decay)
            p -= lr * update
            params[name] = p


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


def _subsample_tokens(ids: np.ndarray, lens: np.ndarray, rate: float, rng):
    """Drop query tokens at random, keeping at least one per row.

    Held-out queries are unseen word subsets; training on random
    sub-subsets keeps the encoder robust to that variation instead of
    memorizing the exact training phrasings.
    """
    rows = []
    for i in range(ids.shape[0]):
        row = ids[i, :lens[i]]
        keep = row[rng.random(len(row)) >= rate]
        rows.append(keep if len(keep) else row[:1])
    out_lens = np.array([len(r) for r in rows], dtype=np.int64)
    out = np.zeros((len(rows), max(int(out_lens.max()), 1)), dtype=ids.dtype)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out, out_lens


# -- model bundle --------------------------------------------------------------

@dataclass
class ModelBundle:
    """Everything needed to run the trained system outside the loop."""

    config: TrainConfig
    vocab: td.Vocab
    params: dict
    step: int = 0

    def __post_init__(self):
        self.space = IdSpace(self.config.code_len, self.config.codes_per_pos)
        dims = ModelDims(vocab_size=len(self.vocab), dim=self.config.dim,
                         enc_hidden=self.config.enc_hidden,
                         code_emb=self.config.code_emb,
                         dec_hidden=self.config.dec_hidden)
        self.dims = dims
        self.encoder = Encoder(dims)
        self.decoder = Decoder(dims, self.space)
        self.indexer = ix.make_indexer(
            self.config.indexer, self.config.dim, self.space,
            sink=ix.SinkhornParams(self.config.sinkhorn_epsilon,
                                   self.config.sinkhorn_iterations),
            mlp_hidden=self.config.mlp_hidden, dropout=self.config.dropout)

    def tokenize(self, text: str) -> list[int]:
        return td.tokenize(text, self.vocab, self.config.max_length)

    def encode_token_rows(self, rows: list[list[int]]) -> np.ndarray:
        ids, lens = td._pad(rows)
        return self.encoder.encode(self.params, ids, lens)

    def encode_texts(self, texts) -> np.ndarray:
        return self.encode_token_rows([self.tokenize(t) for t in texts])

    def assign_documents(self, docs, chunk: int = 8192):
        """(doc_id, key) per (key, text) document, deterministic chunking."""
        out = []
        docs = list(docs)
        for lo in range(0, len(docs), chunk):
            part = docs[lo:lo + chunk]
            reps = self.encode_texts([text for _, text in part])
            ids = self.indexer.assign_ids(self.params, reps)
            out.extend((doc_id, key) for doc_id, (key, _) in zip(ids, part))
        return out

    def query_is_empty(self, text: str) -> bool:
        """True when no query token is in-vocabulary."""
        return all(t == td.UNK_ID for t in self.tokenize(text))

    def rank_queries(self, texts, beam: int) -> list:
        """Ranked (doc_id, log_prob) per query; unusable queries get []."""
        texts = list(texts)
        usable = [i for i, t in enumerate(texts) if not self.query_is_empty(t)]
        results: list = [[] for _ in texts]
        if usable:
            reps = self.encode_texts([texts[i] for i in usable])
            ranked = self.decoder.beam_search_batch(self.params, reps, beam)
            for i, r in zip(usable, ranked):
                results[i] = r
        return results


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, bundle: ModelBundle, opt: AdamW | None = None) -> None:
    """Versioned binary dump; round-trip load is bit-exact."""
    arrays = {f"param/{k}": v for k, v in bundle.params.items()}
    if opt is not None:
        arrays.update({f"adam_m/{k}": v for k, v in opt.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in opt.v.items()})
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": bundle.step,
        "adam_t": opt.t if opt else 0,
        "config": {f.name: getattr(bundle.config, f.name)
                   for f in dataclasses.fields(TrainConfig)},
        "config_hash": bundle.config.config_hash(),
        "vocab": bundle.vocab.words,
        "rng": {"seed": bundle.config.seed, "step": bundle.step},
    }
    arrays["meta"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8).copy()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ModelBundle, AdamW]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"checkpoint version {meta['version']} "
                              f"unsupported (want {CHECKPOINT_VERSION})")
        params, m, v = {}, {}, {}
        for key in data.files:
            if key.startswith("param/"):
                params[key[6:]] = data[key]
            elif key.startswith("adam_m/"):
                m[key[7:]] = data[key]
            elif key.startswith("adam_v/"):
                v[key[7:]] = data[key]
    cfg = TrainConfig(**meta["config"])
    bundle = ModelBundle(cfg, td.Vocab(meta["vocab"]), params,
                         step=meta["step"])
    opt = AdamW(cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay)
    opt.m, opt.v, opt.t = m, v, meta["adam_t"]
    return bundle, opt


# -- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    bundle: ModelBundle
    metrics: list
    checkpoint_path: str | None = None
    metrics_path: str | None = None


def init_params(cfg: TrainConfig, vocab: td.Vocab) -> dict:
    space = IdSpace(cfg.code_len, cfg.codes_per_pos)
    dims = ModelDims(vocab_size=len(vocab), dim=cfg.dim,
                     enc_hidden=cfg.enc_hidden, code_emb=cfg.code_emb,
                     dec_hidden=cfg.dec_hidden)
    params = {}
    params.update(Encoder(dims).init_params(
        np.random.default_rng(td.derived_seed(cfg.seed, "params-encoder"))))
    params.update(Decoder(dims, space).init_params(
        np.random.default_rng(td.derived_seed(cfg.seed, "params-decoder"))))
    idx = ix.make_indexer(cfg.indexer, cfg.dim, space,
                          mlp_hidden=cfg.mlp_hidden, dropout=cfg.dropout)
    params.update(idx.init_params(
        np.random.default_rng(td.derived_seed(cfg.seed, "params-indexer"))))
    return params


def _resolve(cfg: TrainConfig, n_records: int) -> TrainConfig:
    out = cfg
    if cfg.warmup_steps < 0:
        out = out.replace(warmup_steps=max(1, cfg.steps // 20))
    if cfg.steps_per_epoch < 0:
        # a desk-scale corpus pass is a handful of batches; stretch the
        # ramp of the auxiliary criteria to a tenth of the run instead
        bpe = max(1, -(-n_records // cfg.batch_size))
        out = out.replace(steps_per_epoch=max(bpe, cfg.steps // 10))
    out.validate()
    return out


class _Run:
    """Mutable state of one training run."""

    def __init__(self, cfg: TrainConfig, records, resume: tuple | None = None):
        cfg = _resolve(cfg, len(records))
        self.cfg = cfg
        self.disabled = cfg.disabled()
        if resume is None:
            vocab = td.build_vocab(records, cfg.min_word_freq)
            params = {k: v.astype(cfg.dtype)
                      for k, v in init_params(cfg, vocab).items()}
            self.bundle = ModelBundle(cfg, vocab, params, step=0)
            self.opt = AdamW(cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay)
        else:
            self.bundle, self.opt = resume
            if self.bundle.config.config_hash() != cfg.config_hash():
                log.warning("resume config differs from checkpoint config")
            self.bundle.config = cfg
        self.source = td.BatchSource(records, self.bundle.vocab,
                                     cfg.batch_size, cfg.seed, cfg.max_length)
        docs = td.distinct_documents(records)
        self.probe_rows = [self.bundle.tokenize(text)
                           for _, text in docs[:cfg.probe_docs]]
        if cfg.indexer in ("pq", "rq") and resume is None:
            self._seed_codebooks(docs)
        self.selection_counts = np.zeros(
            (cfg.code_len, cfg.codes_per_pos), dtype=np.int64)
        self.metrics: list[dict] = []
        self.last_parts: cr.LossBreakdown | None = None

    def _seed_codebooks(self, docs, cap: int = 4096):
        rows = [self.bundle.tokenize(text) for _, text in docs[:cap]]
        reps = np.concatenate(
            [self.bundle.encode_token_rows(rows[lo:lo + 512])
             for lo in range(0, len(rows), 512)])
        rng = np.random.default_rng(
            td.derived_seed(self.cfg.seed, "codebook-init"))
        seeded = self.bundle.indexer.init_from_embeddings(
            self.bundle.params, reps, rng)
        self.bundle.params = {k: np.asarray(v, dtype=self.cfg.dtype)
                              for k, v in seeded.items()}
        log.info("seeded %s codebooks from %d document embeddings",
                 self.cfg.indexer, len(rows))

    # -- one optimization step ------------------------------------------------

    def step(self, step_index: int) -> cr.LossBreakdown:
        cfg = self.cfg
        bundle = self.bundle
        batch = self.source.batch_at(step_index)
        if batch.size < 2:
            log.warning("step %d: batch of size %d skipped", step_index,
                        batch.size)
            return self.last_parts or cr.LossBreakdown(0.0, 0.0)
        lam = lambda_schedule(step_index, cfg.steps_per_epoch, cfg.lam)
        lr = lr_schedule(step_index, cfg.warmup_steps, cfg.learning_rate,
                         cfg.lr_decay, cfg.steps)
        b = batch.size
        drop_rng = np.random.default_rng(
            td.derived_seed(cfg.seed, f"dropout-{step_index}"))
        # alternate steps swap the query side for subsets of the documents
        # themselves (pseudo-queries in the expansion sense): the identifier
        # map and the decoder then see the whole neighbourhood that unseen
        # queries of a document land in, not just its observed phrasings
        if cfg.self_query_steps > 0 and step_index % cfg.self_query_steps:
            q_ids, q_lens = _subsample_tokens(
                batch.doc_ids, batch.doc_lens,
                max(cfg.query_word_dropout, 0.3), drop_rng)
        else:
            q_ids, q_lens = batch.query_ids, batch.query_lens
            if cfg.query_word_dropout > 0:
                q_ids, q_lens = _subsample_tokens(q_ids, q_lens,
                                                  cfg.query_word_dropout,
                                                  drop_rng)

        e_q = bundle.encoder.build(q_ids, q_lens)
        e_d = bundle.encoder.build(batch.doc_ids, batch.doc_lens)
        out_d = bundle.indexer.build(e_d, b, train=True, rng=drop_rng)
        out_q = bundle.indexer.build(e_q, b, train=True, rng=drop_rng)

        sess = dc.Session(bundle.params, dtype=cfg.dtype)
        # gold identifiers come from the dropout-free assignment so the
        # decoder is not chasing per-step mask noise; shares the e_d subgraph
        if cfg.indexer == "mlp" and cfg.dropout > 0:
            dist_for_gold = bundle.indexer.build(e_d, b, train=False).dist
        else:
            dist_for_gold = out_d.dist
        gold_dist_val = sess.eval(dist_for_gold)
        gold = np.array(ix.to_docids(gold_dist_val, bundle.space), dtype=np.int64)
        # quantizer-side selections drive dead-code accounting; the balanced
        # assignment rows put mass everywhere, so they never look dead
        for pos, pick in enumerate(out_d.aux.get("selections", ())):
            self.selection_counts[pos] += np.bincount(
                sess.eval(pick).argmax(axis=-1), minlength=cfg.codes_per_pos)

        shape = (b, cfg.code_len, cfg.codes_per_pos)
        step_logits = bundle.decoder.build_teacher_logits(e_q, gold)
        picked_lp = dc.concat_last(
            [dc.log_softmax_pick(lg, gold[:, i])
             for i, lg in enumerate(step_logits)])
        l_ce = cr.generation_loss_from_log_probs(picked_lp, b)
        l_c = cr.contrastive_id_loss(out_q.dist, out_d.dist, shape,
                                     batch.alignment, batch.groups, cfg.alpha)
        l_di = l_bot = l_ib = None
        if "di" not in self.disabled:
            l_di = cr.density_loss(out_d.dist, shape, batch.groups,
                                   cfg.density_mode) \
                + cr.density_loss(out_q.dist, shape, batch.groups,
                                  cfg.density_mode)
        if "bot" not in self.disabled:
            l_bot = cr.bottleneck_loss(e_q, e_d, b, batch.alignment,
                                       batch.groups, cfg.gamma)
        if "ib" not in self.disabled:
            prior = cr.GaussianPrior(cfg.sigma0, cfg.var_floor)
            l_ib = cr.ib_loss(e_d, b, prior, cfg.beta)
        l_quant = None
        if out_d.mse is not None:
            l_quant = out_d.mse + out_q.mse
        total = cr.combine(l_c, l_ce, lam, l_di, l_bot, l_ib, l_quant,
                           cfg.quant_weight, self.disabled)

        zero = dc.const(np.float64(0.0))
        part_exprs = [l_c, l_ce, l_di or zero, l_bot or zero, l_ib or zero,
                      l_quant or zero, picked_lp]
        try:
            total_val = sess.eval(total)
            vals = sess.eval_many(part_exprs)
            grads = sess.grad(total, sorted(bundle.params))
        except dc.NonFiniteError as exc:
            raise TrainingDiverged(f"step {step_index}: {exc}") from exc
        if not np.isfinite(total_val):
            raise TrainingDiverged(f"step {step_index}: non-finite total loss")

        clip_global_norm(grads, cfg.grad_clip)
        self.opt.step(bundle.params, grads, lr)
        bundle.step = step_index + 1

        parts = cr.LossBreakdown(
            l_c=float(vals[0]), l_ce=float(vals[1]), l_di=float(vals[2]),
            l_bot=float(vals[3]), l_ib=float(vals[4]), l_quant=float(vals[5]),
            total=float(total_val), lam=lam, quant_weight=cfg.quant_weight,
            active=tuple(n for n in cr.AUX_LOSSES if n not in self.disabled),
            clamp_incidents=int((vals[6] < cr.LOG_PROB_FLOOR).sum()))
        self.last_parts = parts

        if cfg.indexer in ("pq", "rq") and \
                (step_index + 1) % self.source.batches_per_epoch == 0:
            self._reseed_dead_codes(sess, out_d, e_d, step_index)
        return parts

    def _reseed_dead_codes(self, sess, out_d, e_d, step_index: int) -> None:
        """Move centroids unselected for a whole epoch onto batch vectors."""
        cfg = self.cfg
        rng = np.random.default_rng(
            td.derived_seed(cfg.seed, f"reseed-{step_index}"))
        e_val = sess.eval(e_d)
        moved = 0
        for pos in range(cfg.code_len):
            dead = np.flatnonzero(self.selection_counts[pos] == 0)
            if dead.size == 0:
                continue
            if cfg.indexer == "pq":
                sub = self.bundle.indexer.sub
                source = e_val[:, pos * sub:(pos + 1) * sub]
                name = f"idx.g{pos}.codebook"
            else:
                residuals = out_d.aux["residuals"]
                source = e_val if pos == 0 else sess.eval(residuals[pos - 1])
                name = f"idx.s{pos}.codebook"
            cb = self.bundle.params[name].copy()
            for code in dead:
                cb[code] = source[int(rng.integers(source.shape[0]))]
            self.bundle.params[name] = cb
            moved += dead.size
        if moved:
            log.info("step %d: reseeded %d dead centroids", step_index, moved)
        self.selection_counts[:] = 0

    def probe_unique_ids(self) -> int:
        if not self.probe_rows:
            return 0
        reps = self.bundle.encode_token_rows(self.probe_rows)
        ids = self.bundle.indexer.assign_ids(self.bundle.params, reps)
        return len(set(ids))


def train(cfg: TrainConfig, records, out_dir=None,
          resume: tuple | None = None) -> TrainResult:
    """Run the loop; emit metrics records and (optionally) artifacts.

    With ``out_dir`` the run writes ``checkpoint.npz``, ``metrics.jsonl``,
    and the resolved ``config.cfg``; on divergence it dumps the last good
    checkpoint plus ``diverged.json`` before raising.
    """
    cfg.validate()
    run = _Run(cfg, records, resume=resume)
    cfg = run.cfg
    metrics_fh = None
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.cfg"), "w",
                  encoding="utf-8") as fh:
            fh.write(cfg.to_text())
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "a",
                          encoding="utf-8")
        ckpt_path = os.path.join(out_dir, "checkpoint.npz")

    def emit(step_index: int, parts: cr.LossBreakdown):
        record = parts.to_record(
            step=step_index,
            lr=lr_schedule(step_index, cfg.warmup_steps, cfg.learning_rate,
                           cfg.lr_decay, cfg.steps),
            unique_probe_ids=run.probe_unique_ids())
        run.metrics.append(record)
        if metrics_fh:
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_fh.flush()

    try:
        for step_index in range(run.bundle.step, cfg.steps):
            try:
                parts = run.step(step_index)
            except TrainingDiverged as exc:
                if out_dir is not None:
                    save_checkpoint(os.path.join(out_dir, "diverged.npz"),
                                    run.bundle, run.opt)
                    dump = {"error": str(exc), "step": step_index,
                            "last_metrics": run.metrics[-3:]}
                    with open(os.path.join(out_dir, "diverged.json"), "w",
                              encoding="utf-8") as fh:
                        json.dump(dump, fh, indent=2)
                raise
            if (step_index + 1) % cfg.log_interval == 0 \
                    or step_index + 1 == cfg.steps:
                emit(step_index, parts)
            if ckpt_path and cfg.checkpoint_interval > 0 \
                    and (step_index + 1) % cfg.checkpoint_interval == 0:
                save_checkpoint(ckpt_path, run.bundle, run.opt)
        if ckpt_path:
            save_checkpoint(ckpt_path, run.bundle, run.opt)
    finally:
        if metrics_fh:
            metrics_fh.close()
    return TrainResult(run.bundle, run.metrics, ckpt_path,
                       metrics_path=(os.path.join(out_dir, "metrics.jsonl")
                                     if out_dir else None))


def params_hash(params: dict) -> str:
    """Order-independent content hash of a parameter set."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()
