"""Checkpoint container: a single .npz holding every named float64 tensor
plus a JSON metadata block (configs, seed, trainable/no-decay sets, and for
adapted models the PEFT config). Round-trips bit-exactly.
"""

from __future__ import annotations

import json

import numpy as np

from .encoders import DualEncoder, EncoderConfig
from .peft import AdaptedModel, PeftConfig, assemble_adapted_model

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def _meta_block(model: DualEncoder, kind: str, extra=None) -> dict:
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "seed": model.seed,
        "text_cfg": model.text_cfg.to_dict(),
        "vision_cfg": model.vision_cfg.to_dict(),
        "trainable": sorted(model.store.trainable),
        "no_decay": sorted(model.store.no_decay),
    }
    if extra:
        meta.update(extra)
    return meta


def save_euclidean(model: DualEncoder, path):
    arrays = {name: t.data for name, t in model.store.items()}
    arrays[_META_KEY] = np.frombuffer(
        json.dumps(_meta_block(model, "euclidean")).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)


def save_adapted(model: AdaptedModel, path):
    enc = model.encoder
    extra = {"peft": model.peft.to_dict(), "tau_min": model.tau_min}
    arrays = {name: t.data for name, t in enc.store.items()}
    arrays[_META_KEY] = np.frombuffer(
        json.dumps(_meta_block(enc, "adapted", extra)).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)


def _read(path):
    with np.load(path) as blob:
        arrays = {k: blob[k] for k in blob.files}
    meta = json.loads(bytes(arrays.pop(_META_KEY)).decode())
    if meta["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {meta['format_version']}")
    return meta, arrays


def _restore_store(model: DualEncoder, meta, arrays):
    store = model.store
    expected = set(store.names())
    saved = set(arrays)
    if expected != saved:
        missing, surplus = expected - saved, saved - expected
        raise ValueError(f"checkpoint/architecture mismatch (missing={sorted(missing)[:3]}, "
                         f"surplus={sorted(surplus)[:3]})")
    for name, arr in arrays.items():
        store[name].data = np.asarray(arr, dtype=np.float64)
    store.trainable = set(meta["trainable"])
    store.no_decay = set(meta["no_decay"])
    for name in store.names():
        store[name].requires_grad = name in store.trainable


def load_kind(path) -> str:
    meta, _ = _read(path)
    return meta["kind"]


def load_euclidean(path) -> DualEncoder:
    meta, arrays = _read(path)
    if meta["kind"] != "euclidean":
        raise ValueError(f"expected a euclidean checkpoint, got {meta['kind']!r}")
    model = DualEncoder(
        EncoderConfig(**meta["text_cfg"]), EncoderConfig(**meta["vision_cfg"]), seed=meta["seed"]
    )
    _restore_store(model, meta, arrays)
    return model


def load_adapted(path) -> AdaptedModel:
    meta, arrays = _read(path)
    if meta["kind"] != "adapted":
        raise ValueError(f"expected an adapted checkpoint, got {meta['kind']!r}")
    enc = DualEncoder(
        EncoderConfig(**meta["text_cfg"]), EncoderConfig(**meta["vision_cfg"]), seed=meta["seed"]
    )
    peft = PeftConfig.from_dict(meta["peft"])
    # Rebuilding through the assembler recreates the exact parameter name set
    # (adaptation tensors, manifold scalars, temperature); arrays overwrite it.
    model = assemble_adapted_model(enc, peft, seed=meta["seed"])
    model.tau_min = meta["tau_min"]
    _restore_store(enc, meta, arrays)
    return model
