"""Optimization loop: AdamW with selective weight decay, linear warmup +
cosine decay, deterministic batch sampling, metrics emission, and NaN abort.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, Tensor
from .data import CompositionalSample, Tokenizer
from .objectives import BatchEmbeddings, LossConfig, total_loss
from .peft import AdaptedModel


class TrainingDiverged(RuntimeError):
    def __init__(self, step, batch_indices, parts):
        super().__init__(f"non-finite loss at step {step}: {parts}")
        self.step = step
        self.batch_indices = list(map(int, batch_indices))
        self.parts = parts


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    base_lr: float = 2.5e-4
    warmup_steps: int = 200
    weight_decay: float = 0.2
    betas: tuple = (0.9, 0.98)
    grad_clip: float = 1.0
    seed: int = 0
    neftune_alpha: float = 0.1
    log_every: int = 50

    def __post_init__(self):
        if self.steps > 0 and self.warmup_steps >= self.steps:
            raise ValueError("warmup_steps must be < steps")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    def to_dict(self):
        return asdict(self)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> base_lr over warmup, then cosine decay to 0 at the
    final step."""
    if step < 0 or step > cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = (step - cfg.warmup_steps) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay; decay skipped for parameters flagged no_decay
    (gains, biases, learnable scalars)."""

    def __init__(self, store: ParamStore, cfg: TrainConfig):
        self.store = store
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(store[n].data) for n in store.trainable}
        self.v = {n: np.zeros_like(store[n].data) for n in store.trainable}

    def clip_gradients(self):
        # sorted: set iteration order varies with the per-process hash seed,
        # and the non-associative sum must not depend on it
        gsq = 0.0
        for name in sorted(self.store.trainable):
            g = self.store[name].grad
            if g is not None:
                gsq += float((g * g).sum())
        norm = math.sqrt(gsq)
        if self.cfg.grad_clip > 0 and norm > self.cfg.grad_clip:
            scale = self.cfg.grad_clip / norm
            for name in sorted(self.store.trainable):
                if self.store[name].grad is not None:
                    self.store[name].grad = self.store[name].grad * scale
        return norm

    def step(self, lr: float, eps: float = 1e-8):
        b1, b2 = self.cfg.betas
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name in sorted(self.store.trainable):
            p = self.store[name]
            if p.grad is None:
                raise RuntimeError(f"trainable parameter {name!r} has no gradient")
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            update = m_hat / (np.sqrt(v_hat) + eps)
            if name not in self.store.no_decay and self.cfg.weight_decay > 0:
                update = update + self.cfg.weight_decay * p.data
            p.data = p.data - lr * update


class MetricsLog:
    """Line-delimited JSON metrics, optionally mirrored to a file."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        if path is not None:
            open(path, "w").close()

    def emit(self, record: dict):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


class CorpusBatcher:
    """Pre-tokenized corpus views with deterministic batch sampling."""

    def __init__(self, corpus: list[CompositionalSample], tokenizer: Tokenizer, seed: int):
        self.corpus = corpus
        self.tokenizer = tokenizer
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBA7C)))
        self.captions = [tokenizer.encode(s.caption) for s in corpus]
        self.box_captions = [[tokenizer.encode(c) for _, c in s.boxes] for s in corpus]

    def sample_indices(self, batch_size: int) -> np.ndarray:
        return self.rng.choice(len(self.corpus), size=batch_size, replace=False)

    def gather(self, indices):
        """Images, padded captions, and flattened boxes for a batch."""
        images = np.stack([self.corpus[i].image for i in indices])
        tokens, lengths = self.tokenizer.pad_batch([self.captions[i] for i in indices])
        box_images, box_tokens, box_parent = [], [], []
        for pos, i in enumerate(indices):
            for (box_img, _), toks in zip(self.corpus[i].boxes, self.box_captions[i]):
                box_images.append(box_img)
                box_tokens.append(toks)
                box_parent.append(pos)
        bt, bl = self.tokenizer.pad_batch(box_tokens)
        return {
            "images": images,
            "tokens": tokens,
            "lengths": lengths,
            "box_images": np.stack(box_images),
            "box_tokens": bt,
            "box_lengths": bl,
            "box_parent": np.asarray(box_parent, dtype=np.int64),
        }


def pretrain_euclidean(corpus, model, cfg: TrainConfig, tokenizer=None, metrics_path=None) -> MetricsLog:
    """Train the Euclidean dual encoder with symmetric cosine-similarity
    contrastive loss; its checkpoint becomes the frozen adaptation backbone."""
    if not corpus:
        raise ValueError("corpus must be nonempty")
    tokenizer = tokenizer or Tokenizer(model.text_cfg.max_len)
    batcher = CorpusBatcher(corpus, tokenizer, cfg.seed)
    optimizer = AdamW(model.store, cfg)
    metrics = MetricsLog(metrics_path)
    idx = np.arange(cfg.batch_size)
    for step in range(cfg.steps):
        batch_idx = batcher.sample_indices(cfg.batch_size)
        batch = batcher.gather(batch_idx)
        model.store.zero_grads()
        v_img = model.encode_image(batch["images"])
        v_txt = model.encode_text(batch["tokens"], batch["lengths"])
        v_img = v_img / ag.l2_norm(v_img, axis=-1, keepdims=True)
        v_txt = v_txt / ag.l2_norm(v_txt, axis=-1, keepdims=True)
        logits = (v_img @ ag.transpose(v_txt, (1, 0))) * model.logit_scale()
        row = ag.log_softmax(logits, axis=1)[idx, idx]
        col = ag.log_softmax(logits, axis=0)[idx, idx]
        loss = -(row.mean() + col.mean()) * 0.5
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(step, batch_idx, {"loss": loss.item()})
        loss.backward()
        optimizer.clip_gradients()
        optimizer.step(lr_schedule(step + 1, cfg))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            metrics.emit({"step": step, "loss": loss.item(), "lr": lr_schedule(step + 1, cfg)})
    return metrics


def adapt(corpus, model: AdaptedModel, cfg: TrainConfig, loss_cfg: LossConfig,
          tokenizer=None, metrics_path=None) -> MetricsLog:
    """Hyperbolic adaptation: compositional contrastive + entailment hinge on
    the PEFT-wrapped model. Frozen tensors are never updated."""
    if not corpus:
        raise ValueError("corpus must be nonempty")
    enc = model.encoder
    tokenizer = tokenizer or Tokenizer(enc.text_cfg.max_len)
    batcher = CorpusBatcher(corpus, tokenizer, cfg.seed)
    optimizer = AdamW(enc.store, cfg)
    metrics = MetricsLog(metrics_path)
    noise_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x0E11)))
    for step in range(cfg.steps):
        batch_idx = batcher.sample_indices(cfg.batch_size)
        batch = batcher.gather(batch_idx)
        enc.store.zero_grads()
        emb = BatchEmbeddings(
            image=model.embed_image(batch["images"]),
            text=model.embed_text(batch["tokens"], batch["lengths"],
                                  noise_rng=noise_rng, neftune_alpha=cfg.neftune_alpha),
            image_box=model.embed_image(batch["box_images"]),
            text_box=model.embed_text(batch["box_tokens"], batch["box_lengths"],
                                      noise_rng=noise_rng, neftune_alpha=cfg.neftune_alpha),
            box_parent=batch["box_parent"],
        )
        loss, parts = total_loss(emb, model.tau, model.manifold.kappa, loss_cfg)
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(step, batch_idx, parts)
        loss.backward()
        optimizer.clip_gradients()
        optimizer.step(lr_schedule(step + 1, cfg))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            parts.update(
                step=step,
                lr=lr_schedule(step + 1, cfg),
                kappa=model.manifold.kappa.item(),
                tau=model.tau.item(),
                alpha_img=model.manifold.alpha("image").item(),
                alpha_txt=model.manifold.alpha("text").item(),
            )
            metrics.emit(parts)
    return metrics
