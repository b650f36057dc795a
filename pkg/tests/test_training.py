"""Optimizer, schedule, batcher, and training-loop contract tests."""

import json

import numpy as np
import pytest

from hyperlift.autograd import ParamStore
from hyperlift.data import Tokenizer, generate_corpus
from hyperlift.encoders import DualEncoder, EncoderConfig
from hyperlift.objectives import LossConfig
from hyperlift.peft import PeftConfig, assemble_adapted_model
from hyperlift.training import (
    AdamW,
    CorpusBatcher,
    MetricsLog,
    TrainConfig,
    TrainingDiverged,
    adapt,
    lr_schedule,
    pretrain_euclidean,
)


def small_corpus(seed=0, n=64):
    return generate_corpus(seed=seed, n_samples=n, glyph_set_size=8)


def tiny_train_cfg(**kw):
    kw.setdefault("steps", 4)
    kw.setdefault("batch_size", 4)
    kw.setdefault("warmup_steps", 2)
    kw.setdefault("log_every", 1)
    kw.setdefault("seed", 0)
    return TrainConfig(**kw)


class TestSchedule:
    def test_warmup_is_linear_from_zero(self):
        cfg = TrainConfig(steps=100, warmup_steps=10, base_lr=1e-3)
        assert lr_schedule(0, cfg) == 0.0
        np.testing.assert_allclose(lr_schedule(5, cfg), 5e-4)
        np.testing.assert_allclose(lr_schedule(10, cfg), 1e-3)

    def test_cosine_decays_to_zero_at_final_step(self):
        cfg = TrainConfig(steps=100, warmup_steps=10, base_lr=1e-3)
        np.testing.assert_allclose(lr_schedule(100, cfg), 0.0, atol=1e-18)
        mid = lr_schedule(55, cfg)
        np.testing.assert_allclose(mid, 1e-3 * 0.5, rtol=1e-12)

    def test_monotone_after_warmup(self):
        cfg = TrainConfig(steps=50, warmup_steps=5)
        lrs = [lr_schedule(s, cfg) for s in range(5, 51)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range_rejected(self):
        cfg = TrainConfig(steps=10, warmup_steps=2)
        with pytest.raises(ValueError):
            lr_schedule(11, cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(steps=10, warmup_steps=10)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)


class TestAdamW:
    def test_first_step_matches_hand_computation(self):
        # single scalar, one step: update = lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)
        store = ParamStore()
        store.add("w", np.array([2.0]))
        cfg = TrainConfig(steps=10, warmup_steps=1, weight_decay=0.2,
                          betas=(0.9, 0.98), grad_clip=0.0)
        opt = AdamW(store, cfg)
        store["w"].grad = np.array([0.5])
        opt.step(lr=0.1)
        g, eps = 0.5, 1e-8
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.02 * g * g) / (1 - 0.98)
        expected = 2.0 - 0.1 * (m_hat / (np.sqrt(v_hat) + eps) + 0.2 * 2.0)
        np.testing.assert_allclose(store["w"].data, [expected], rtol=1e-12)

    def test_no_decay_parameters_skip_weight_decay(self):
        store = ParamStore()
        store.add("w", np.array([2.0]))
        store.add("b", np.array([2.0]), no_decay=True)
        cfg = TrainConfig(steps=10, warmup_steps=1, weight_decay=0.5, grad_clip=0.0)
        opt = AdamW(store, cfg)
        store["w"].grad = np.array([0.5])
        store["b"].grad = np.array([0.5])
        opt.step(lr=0.1)
        # identical gradients: the difference is exactly the decay term
        np.testing.assert_allclose(store["b"].data - store["w"].data, [0.1 * 0.5 * 2.0])

    def test_missing_gradient_raises(self):
        store = ParamStore()
        store.add("w", np.ones(2))
        opt = AdamW(store, tiny_train_cfg())
        with pytest.raises(RuntimeError, match="no gradient"):
            opt.step(lr=0.1)

    def test_clip_rescales_global_norm(self):
        store = ParamStore()
        store.add("a", np.zeros(3))
        store.add("b", np.zeros(4))
        cfg = TrainConfig(steps=10, warmup_steps=1, grad_clip=1.0)
        opt = AdamW(store, cfg)
        store["a"].grad = np.full(3, 2.0)
        store["b"].grad = np.full(4, -2.0)
        norm_before = opt.clip_gradients()
        assert norm_before > 1.0
        clipped = np.sqrt(sum((store[n].grad ** 2).sum() for n in ("a", "b")))
        np.testing.assert_allclose(clipped, 1.0, rtol=1e-12)

    def test_clip_noop_under_threshold(self):
        store = ParamStore()
        store.add("a", np.zeros(2))
        opt = AdamW(store, TrainConfig(steps=10, warmup_steps=1, grad_clip=1.0))
        store["a"].grad = np.array([0.1, 0.1])
        opt.clip_gradients()
        np.testing.assert_array_equal(store["a"].grad, [0.1, 0.1])


class TestBatcher:
    def test_gather_shapes_and_parent_map(self):
        corpus = small_corpus()
        batcher = CorpusBatcher(corpus, Tokenizer(), seed=0)
        batch = batcher.gather(np.arange(6))
        assert batch["images"].shape == (6, 16, 16)
        assert batch["tokens"].shape[0] == 6
        n_boxes = sum(len(corpus[i].boxes) for i in range(6))
        assert batch["box_images"].shape[0] == n_boxes
        assert batch["box_tokens"].shape[0] == n_boxes
        np.testing.assert_array_equal(np.unique(batch["box_parent"]), np.arange(6))
        for pos, i in enumerate(range(6)):
            assert (batch["box_parent"] == pos).sum() == len(corpus[i].boxes)

    def test_sampling_deterministic_and_without_replacement(self):
        corpus = small_corpus()
        a = CorpusBatcher(corpus, Tokenizer(), seed=3)
        b = CorpusBatcher(corpus, Tokenizer(), seed=3)
        ia, ib = a.sample_indices(16), b.sample_indices(16)
        np.testing.assert_array_equal(ia, ib)
        assert len(set(ia.tolist())) == 16


class TestMetricsLog:
    def test_mirrors_to_jsonl(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        log = MetricsLog(path)
        log.emit({"step": 0, "loss": 1.5})
        log.emit({"step": 1, "loss": 1.2})
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert lines == log.records


class TestPretrain:
    def test_loss_decreases(self):
        corpus = small_corpus(n=128)
        cfg = EncoderConfig()
        model = DualEncoder(cfg, cfg, seed=0)
        log = pretrain_euclidean(corpus, model,
                                 tiny_train_cfg(steps=30, batch_size=8, warmup_steps=3))
        assert log.records[-1]["loss"] < log.records[0]["loss"]

    def test_deterministic_under_seed(self):
        corpus = small_corpus(n=64)
        cfg = EncoderConfig()
        out = []
        for _ in range(2):
            model = DualEncoder(cfg, cfg, seed=1)
            pretrain_euclidean(corpus, model, tiny_train_cfg(steps=5))
            out.append(model.store.state_arrays())
        for name in out[0]:
            np.testing.assert_array_equal(out[0][name], out[1][name])

    def test_empty_corpus_rejected(self):
        model = DualEncoder(EncoderConfig(), EncoderConfig(), seed=0)
        with pytest.raises(ValueError):
            pretrain_euclidean([], model, tiny_train_cfg())


class TestAdapt:
    def make_adapted(self, seed=0):
        cfg = EncoderConfig()
        model = DualEncoder(cfg, cfg, seed=seed)
        peft = PeftConfig(method="lora", text_layers=(2, 3), vision_layers=(2, 3))
        return assemble_adapted_model(model, peft, seed=seed)

    def test_frozen_tensors_bitwise_unchanged(self):
        corpus = small_corpus(n=64)
        model = self.make_adapted()
        frozen_before = {n: t.data.copy() for n, t in model.store.items()
                         if n not in model.store.trainable}
        adapt(corpus, model, tiny_train_cfg(steps=6, batch_size=4), LossConfig())
        for name, before in frozen_before.items():
            assert np.array_equal(model.store[name].data, before), name

    def test_trainable_tensors_moved(self):
        corpus = small_corpus(n=64)
        model = self.make_adapted()
        before = {n: model.store[n].data.copy() for n in model.store.trainable}
        adapt(corpus, model, tiny_train_cfg(steps=6, batch_size=4), LossConfig())
        assert any(not np.array_equal(model.store[n].data, before[n])
                   for n in model.store.trainable)

    def test_deterministic_under_seed(self):
        corpus = small_corpus(n=64)
        out = []
        for _ in range(2):
            model = self.make_adapted(seed=2)
            adapt(corpus, model, tiny_train_cfg(steps=5, seed=2), LossConfig())
            out.append(model.store.state_arrays())
        for name in out[0]:
            np.testing.assert_array_equal(out[0][name], out[1][name])

    def test_divergence_reports_step_and_batch(self):
        corpus = small_corpus(n=32)
        model = self.make_adapted()
        # poison a trainable head so the forward pass goes non-finite
        model.store["text.proj"].data[:] = np.nan
        with pytest.raises(TrainingDiverged) as exc:
            adapt(corpus, model, tiny_train_cfg(steps=3, batch_size=4), LossConfig())
        assert exc.value.step == 0
        assert len(exc.value.batch_indices) == 4

    def test_metrics_include_manifold_scalars(self, tmp_path):
        corpus = small_corpus(n=32)
        model = self.make_adapted()
        path = tmp_path / "m.jsonl"
        adapt(corpus, model, tiny_train_cfg(steps=3, batch_size=4), LossConfig(),
              metrics_path=path)
        rec = json.loads(path.read_text().splitlines()[-1])
        for key in ("loss", "loss_hcc", "loss_hce", "kappa", "tau", "alpha_img", "alpha_txt"):
            assert key in rec
