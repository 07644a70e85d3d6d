"""Schedules, optimizer, config parsing, determinism, checkpoints."""

import json

import numpy as np
import pytest

from genidx import indexer as ix
from genidx import textdata as td
from genidx import trainer as tr


class TestLambdaSchedule:
    def test_starts_at_initial_value(self):
        assert tr.lambda_schedule(0, 100, 0.25) == pytest.approx(0.01)

    def test_reaches_target_at_epoch(self):
        assert tr.lambda_schedule(100, 100, 0.25) == pytest.approx(0.25)

    def test_midpoint_interpolation(self):
        assert tr.lambda_schedule(50, 100, 0.25) == pytest.approx(0.13)

    def test_zero_epoch_is_immediate(self):
        assert tr.lambda_schedule(0, 0, 0.25) == 0.25

    def test_constant_after_epoch(self):
        assert tr.lambda_schedule(101, 100, 0.25) == 0.25
        assert tr.lambda_schedule(10_000, 100, 0.25) == 0.25

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            tr.lambda_schedule(-1, 100, 0.25)


class TestLrSchedule:
    def test_zero_at_start(self):
        assert tr.lr_schedule(0, 100, 1e-4) == 0.0

    def test_base_at_warmup_end(self):
        assert tr.lr_schedule(100, 100, 1e-4) == pytest.approx(1e-4)

    def test_half_at_half_warmup(self):
        assert tr.lr_schedule(50, 100, 1e-4) == pytest.approx(5e-5)

    def test_constant_after_warmup(self):
        assert tr.lr_schedule(5000, 100, 1e-4) == pytest.approx(1e-4)

    def test_cosine_decays_to_zero(self):
        lr = tr.lr_schedule(1000, 100, 1e-4, decay="cosine", total_steps=1000)
        assert lr == pytest.approx(0.0, abs=1e-12)
        mid = tr.lr_schedule(550, 100, 1e-4, decay="cosine", total_steps=1000)
        assert 0 < mid < 1e-4


class TestConfig:
    def test_text_roundtrip(self):
        cfg = tr.TrainConfig(steps=123, lam=0.5, indexer="pq")
        again = tr.parse_config_text(cfg.to_text())
        assert again == cfg

    def test_unknown_key_fatal(self):
        with pytest.raises(tr.ConfigError, match="unknown config key"):
            tr.parse_config_text("stepz = 100\n")

    def test_bad_value_fatal(self):
        with pytest.raises(tr.ConfigError, match="bad value"):
            tr.parse_config_text("steps = many\n")

    def test_comments_and_blanks_ignored(self):
        cfg = tr.parse_config_text("# a comment\n\nsteps = 7  # trailing\n")
        assert cfg.steps == 7

    def test_overrides(self):
        cfg = tr.apply_overrides(tr.TrainConfig(), ["steps=9", "indexer=rq"])
        assert cfg.steps == 9 and cfg.indexer == "rq"

    def test_override_unknown_key_fatal(self):
        with pytest.raises(tr.ConfigError):
            tr.apply_overrides(tr.TrainConfig(), ["nope=1"])

    def test_validation_rules(self):
        with pytest.raises(tr.ConfigError):
            tr.TrainConfig(steps=10, warmup_steps=11).validate()
        with pytest.raises(tr.ConfigError):
            tr.TrainConfig(indexer="vq").validate()
        with pytest.raises(tr.ConfigError):
            tr.TrainConfig(disable_loss="di,xx").validate()
        with pytest.raises(tr.ConfigError):
            tr.TrainConfig(batch_size=1).validate()

    def test_disabled_set(self):
        assert tr.TrainConfig(disable_loss="di, ib").disabled() == {"di", "ib"}

    def test_hash_tracks_content(self):
        a = tr.TrainConfig()
        b = tr.TrainConfig(steps=3)
        assert a.config_hash() != b.config_hash()
        assert a.config_hash() == tr.TrainConfig().config_hash()


class TestAdamW:
    def test_zero_gradient_only_decays(self):
        opt = tr.AdamW(weight_decay=0.1)
        params = {"w": np.full(3, 2.0)}
        opt.step(params, {"w": np.zeros(3)}, lr=0.5)
        np.testing.assert_allclose(params["w"], 2.0 * (1 - 0.5 * 0.1))

    def test_matches_reference_formula(self):
        opt = tr.AdamW(beta1=0.9, beta2=0.999, weight_decay=0.0)
        params = {"w": np.array([1.0])}
        g = np.array([0.5])
        opt.step(params, {"w": g}, lr=0.1)
        mhat = (0.1 * 0.5) / (1 - 0.9)
        vhat = (0.001 * 0.25) / (1 - 0.999)
        expected = 1.0 - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
        np.testing.assert_allclose(params["w"], expected)

    def test_clip_global_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        norm = tr.clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        assert total == pytest.approx(1.0)

    def test_clip_inactive_below_threshold(self):
        grads = {"a": np.array([0.3])}
        tr.clip_global_norm(grads, 5.0)
        np.testing.assert_allclose(grads["a"], 0.3)


def tiny_config(**kw):
    base = dict(steps=8, batch_size=8, dim=16, enc_hidden=16, dec_hidden=16,
                code_emb=4, mlp_hidden=16, codes_per_pos=8, code_len=4,
                log_interval=4, probe_docs=8, seed=3,
                sinkhorn_iterations=20, sinkhorn_epsilon=0.05)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_corpus():
    return td.synth_corpus(4, 8, 2, 256, seed=5)


class TestTrainLoop:
    def test_smoke_all_losses_finite_and_logged(self, tiny_corpus):
        res = tr.train(tiny_config(), tiny_corpus)
        assert len(res.metrics) == 2
        for rec in res.metrics:
            for key in ("l_c", "l_ce", "l_di", "l_bot", "l_ib", "total",
                        "lambda", "lr", "unique_probe_ids"):
                assert key in rec
                assert np.isfinite(rec[key]) if isinstance(rec[key], float) else True

    def test_same_seed_identical_hash_and_log(self, tiny_corpus, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        res_a = tr.train(tiny_config(), tiny_corpus, out_dir=out_a)
        res_b = tr.train(tiny_config(), tiny_corpus, out_dir=out_b)
        assert tr.params_hash(res_a.bundle.params) == \
            tr.params_hash(res_b.bundle.params)
        assert (out_a / "metrics.jsonl").read_bytes() == \
            (out_b / "metrics.jsonl").read_bytes()

    def test_different_seed_differs(self, tiny_corpus):
        a = tr.train(tiny_config(seed=1), tiny_corpus)
        b = tr.train(tiny_config(seed=2), tiny_corpus)
        assert tr.params_hash(a.bundle.params) != tr.params_hash(b.bundle.params)

    def test_disabling_aux_reduces_to_base_objective(self, tiny_corpus):
        res = tr.train(tiny_config(disable_loss="di,bot,ib"), tiny_corpus)
        for rec in res.metrics:
            assert rec["l_di"] == rec["l_bot"] == rec["l_ib"] == 0.0
            assert rec["total"] == pytest.approx(rec["l_c"] + rec["l_ce"],
                                                 rel=1e-6)

    def test_gold_targets_respect_slices(self, tiny_corpus):
        res = tr.train(tiny_config(), tiny_corpus)
        bundle = res.bundle
        docs = td.distinct_documents(tiny_corpus)[:10]
        for doc_id, _ in bundle.assign_documents(docs):
            assert bundle.space.is_valid(doc_id)

    @pytest.mark.parametrize("kind", ["pq", "rq"])
    def test_quantizers_train_and_emit_mse(self, tiny_corpus, kind):
        res = tr.train(tiny_config(indexer=kind, steps=6, log_interval=3),
                       tiny_corpus)
        assert res.metrics[-1]["l_quant"] > 0.0
        assert np.isfinite(res.metrics[-1]["total"])

    def test_dead_codes_reseeded(self, tiny_corpus, caplog):
        import logging
        run = tr._Run(tiny_config(indexer="rq"), tiny_corpus)
        run.source.batches_per_epoch = 1      # epoch boundary every step
        poisoned = run.bundle.params["idx.s0.codebook"].copy()
        poisoned[0] = 1e6                      # unreachable: never selected
        run.bundle.params["idx.s0.codebook"] = poisoned
        with caplog.at_level(logging.INFO, logger="genidx.trainer"):
            run.step(0)
        assert "reseeded" in caplog.text
        moved = run.bundle.params["idx.s0.codebook"][0]
        assert np.abs(moved).max() < 100.0     # now an in-batch vector

    def test_lambda_in_log_follows_schedule(self, tiny_corpus):
        cfg = tiny_config(steps=8, log_interval=2)
        res = tr.train(cfg, tiny_corpus)
        spe = max(max(1, -(-len(tiny_corpus) // cfg.batch_size)), cfg.steps // 10)
        for rec in res.metrics:
            assert rec["lambda"] == pytest.approx(
                tr.lambda_schedule(rec["step"], spe, cfg.lam))

    def test_divergence_writes_diagnostics(self, tiny_corpus, tmp_path,
                                           monkeypatch):
        def boom(self, step_index):
            raise tr.TrainingDiverged("step 0: synthetic blowup")
        monkeypatch.setattr(tr._Run, "step", boom)
        with pytest.raises(tr.TrainingDiverged):
            tr.train(tiny_config(), tiny_corpus, out_dir=tmp_path / "run")
        dump = json.loads((tmp_path / "run" / "diverged.json").read_text())
        assert "blowup" in dump["error"]
        assert (tmp_path / "run" / "diverged.npz").exists()


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tiny_corpus, tmp_path):
        res = tr.train(tiny_config(), tiny_corpus)
        path = tmp_path / "ckpt.npz"
        tr.save_checkpoint(path, res.bundle)
        loaded, _ = tr.load_checkpoint(path)
        assert loaded.step == res.bundle.step
        assert loaded.config == res.bundle.config
        assert loaded.vocab.words == res.bundle.vocab.words
        for name, arr in res.bundle.params.items():
            np.testing.assert_array_equal(loaded.params[name], arr)
        assert tr.params_hash(loaded.params) == tr.params_hash(res.bundle.params)

    def test_resume_reproduces_uninterrupted_run(self, tiny_corpus, tmp_path):
        cfg = tiny_config(steps=8)
        full = tr.train(cfg, tiny_corpus)

        half_cfg = cfg.replace(steps=4)
        half = tr.train(half_cfg, tiny_corpus, out_dir=tmp_path / "half")
        bundle, opt = tr.load_checkpoint(tmp_path / "half" / "checkpoint.npz")
        resumed = tr.train(cfg, tiny_corpus, resume=(bundle, opt))
        assert tr.params_hash(resumed.bundle.params) == \
            tr.params_hash(full.bundle.params)

    def test_bad_version_rejected(self, tiny_corpus, tmp_path):
        res = tr.train(tiny_config(steps=2, log_interval=2), tiny_corpus)
        path = tmp_path / "ckpt.npz"
        tr.save_checkpoint(path, res.bundle)
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
        meta = json.loads(bytes(arrays["meta"]).decode())
        meta["version"] = 99
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(path, **arrays)
        with pytest.raises(tr.ConfigError, match="version"):
            tr.load_checkpoint(path)


class TestBundle:
    def test_rank_queries_marks_unusable(self, tiny_corpus):
        res = tr.train(tiny_config(steps=2, log_interval=2), tiny_corpus)
        rankings = res.bundle.rank_queries(
            [tiny_corpus[0].query, "xylophone quark"], beam=3)
        assert len(rankings[0]) == 3
        assert rankings[1] == []

    def test_assign_documents_deterministic(self, tiny_corpus):
        res = tr.train(tiny_config(steps=2, log_interval=2), tiny_corpus)
        docs = td.distinct_documents(tiny_corpus)
        assert res.bundle.assign_documents(docs) == \
            res.bundle.assign_documents(docs)
