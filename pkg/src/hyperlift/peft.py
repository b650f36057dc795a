"""Parameter-efficient adaptation of a frozen dual encoder.

Five methods: bias tuning, LayerNorm tuning, sequential adapters, parallel
adapters, and LoRA (optionally rank-stabilized). The assembler freezes the
backbone, re-initializes projection heads and final LayerNorms as fully
trainable, attaches the method's extra parameters on the selected layer
subsets, and adds the learnable manifold scalars plus a log-temperature.

`count_trainable_params` computes the same trainable set analytically from an
architecture description alone, so it also works for full-size symbolic
architectures that are never instantiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoders import DualEncoder, EncoderConfig, LORA_KEY_BY_TARGET, trunc_normal
from .manifold import ManifoldParams

PEFT_METHODS = ("bias", "layernorm", "seq_adapter", "par_adapter", "lora")
LORA_TARGETS = ("q", "k", "v", "o", "fc1", "fc2")


class ConfigurationError(ValueError):
    pass


@dataclass
class PeftConfig:
    method: str = "lora"
    vision_layers: tuple = ()           # block indices adapted in the vision encoder
    text_layers: tuple = ()             # block indices adapted in the text encoder
    bottleneck_dim: int = 16
    lora_rank: int = 8
    lora_alpha: int = 8
    lora_targets: tuple = ("q", "v")
    rank_stabilized: bool = True

    def __post_init__(self):
        if self.method not in PEFT_METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {PEFT_METHODS}")
        self.vision_layers = tuple(sorted(self.vision_layers))
        self.text_layers = tuple(sorted(self.text_layers))
        self.lora_targets = tuple(self.lora_targets)
        if self.lora_rank < 1 or self.bottleneck_dim < 1:
            raise ConfigurationError("lora_rank and bottleneck_dim must be >= 1")
        if self.method == "lora":
            if not self.lora_targets:
                raise ConfigurationError("lora requires a non-empty target set")
            bad = set(self.lora_targets) - set(LORA_TARGETS)
            if bad:
                raise ConfigurationError(f"unknown lora targets {sorted(bad)}")

    def layers_for(self, side: str) -> tuple:
        return self.text_layers if side == "text" else self.vision_layers

    @property
    def lora_scale(self) -> float:
        r = self.lora_rank
        return self.lora_alpha / math.sqrt(r) if self.rank_stabilized else self.lora_alpha / r

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PeftConfig":
        return cls(**d)

    def validate_for(self, text_cfg: EncoderConfig, vision_cfg: EncoderConfig):
        if any(i < 0 or i >= vision_cfg.n_layers for i in self.vision_layers):
            raise ConfigurationError("vision layer index out of range")
        if any(i < 0 or i >= text_cfg.n_layers for i in self.text_layers):
            raise ConfigurationError("text layer index out of range")


def last_k_layers(n_layers: int, k: int) -> tuple:
    return tuple(range(max(0, n_layers - k), n_layers))


class Adaptation:
    """Runtime hook wired into the encoder's block forward."""

    def __init__(self, config: PeftConfig, model: DualEncoder):
        self.config = config
        self.model = model

    def effective_weight(self, side, layer, key, base: Tensor) -> Tensor:
        cfg = self.config
        if cfg.method != "lora" or layer not in cfg.layers_for(side):
            return base
        target = next((t for t, k in LORA_KEY_BY_TARGET.items() if k == key), None)
        if target is None or target not in cfg.lora_targets:
            return base
        store = self.model.store
        a = store[f"adapt.{side}.block{layer}.lora_{target}.a"]  # (r, d_in)
        b = store[f"adapt.{side}.block{layer}.lora_{target}.b"]  # (d_out, r)
        return base + cfg.lora_scale * ag.transpose(b @ a, (1, 0))

    def apply_sublayer(self, side, layer, which, sub_input: Tensor, sub_output: Tensor) -> Tensor:
        cfg = self.config
        if cfg.method not in ("seq_adapter", "par_adapter") or layer not in cfg.layers_for(side):
            return sub_output
        store = self.model.store
        p = f"adapt.{side}.block{layer}.{which}"
        src = sub_output if cfg.method == "seq_adapter" else sub_input
        bottleneck = ag.gelu(src @ store[f"{p}.down_w"] + store[f"{p}.down_b"])
        delta = bottleneck @ store[f"{p}.up_w"] + store[f"{p}.up_b"]
        return sub_output + delta


def wrap_blocks(model: DualEncoder, config: PeftConfig, rng: np.random.Generator):
    """Create the method's trainable tensors and mark backbone tensors
    trainable where the method tunes existing parameters.

    Down-projections / LoRA A start truncated-normal; up-projections / LoRA B
    start at zero, so adapted forwards reproduce the frozen forward at init.
    """
    store = model.store
    cfg = config
    for side in ("text", "vision"):
        enc_cfg = model.config_for(side)
        d, m = enc_cfg.d_model, enc_cfg.mlp_dim
        dims = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "fc1": (d, m), "fc2": (m, d)}
        for layer in cfg.layers_for(side):
            p = f"{side}.block{layer}."
            if cfg.method == "bias":
                for name in store.names():
                    if name.startswith(p) and (name.endswith(".bias") or ".attn.b" in name or name.endswith("_b")):
                        store.set_trainable(name, True)
            elif cfg.method == "layernorm":
                for name in store.names():
                    if name.startswith(p) and (".ln1." in name or ".ln2." in name):
                        store.set_trainable(name, True)
            elif cfg.method in ("seq_adapter", "par_adapter"):
                for which in ("attn", "mlp"):
                    q = f"adapt.{side}.block{layer}.{which}"
                    store.add(f"{q}.down_w", trunc_normal(rng, (d, cfg.bottleneck_dim)))
                    store.add(f"{q}.down_b", np.zeros(cfg.bottleneck_dim), no_decay=True)
                    store.add(f"{q}.up_w", np.zeros((cfg.bottleneck_dim, d)))
                    store.add(f"{q}.up_b", np.zeros(d), no_decay=True)
            elif cfg.method == "lora":
                for target in cfg.lora_targets:
                    d_in, d_out = dims[target]
                    q = f"adapt.{side}.block{layer}.lora_{target}"
                    store.add(f"{q}.a", trunc_normal(rng, (cfg.lora_rank, d_in)))
                    store.add(f"{q}.b", np.zeros((d_out, cfg.lora_rank)))
    model.adaptation = Adaptation(cfg, model)


class AdaptedModel:
    """A frozen dual encoder wrapped for hyperbolic training: PEFT parameters,
    fresh trainable heads and final LayerNorms, manifold scalars, and a
    learnable contrastive temperature (log-space, floored at `tau_min`)."""

    def __init__(self, encoder: DualEncoder, peft: PeftConfig, manifold: ManifoldParams,
                 tau_init: float = 0.07, tau_min: float = 0.01):
        self.encoder = encoder
        self.peft = peft
        self.manifold = manifold
        self.tau_min = tau_min
        self.store = encoder.store
        self.log_tau = self.store.add("loss.log_tau", math.log(tau_init), no_decay=True)

    @property
    def tau(self) -> Tensor:
        return ag.clamp(ag.exp(self.log_tau), lo=self.tau_min)

    def embed_text(self, tokens, lengths=None, noise_rng=None, neftune_alpha=0.0) -> Tensor:
        from .manifold import lift

        v = self.encoder.encode_text(tokens, lengths, noise_rng=noise_rng, neftune_alpha=neftune_alpha)
        return lift(v, "text", self.manifold)

    def embed_image(self, images) -> Tensor:
        from .manifold import lift

        return lift(self.encoder.encode_image(images), "image", self.manifold)


def assemble_adapted_model(encoder: DualEncoder, peft: PeftConfig, seed: int = 0,
                           init_kappa: float = 1.0, tau_init: float = 0.07,
                           reinit_heads: bool = True) -> AdaptedModel:
    """Freeze the backbone, re-initialize heads and final LayerNorms as fully
    trainable, attach adaptation parameters, and add the manifold scalars.

    `reinit_heads=False` keeps the checkpoint head weights, so a freshly
    wrapped model reproduces the frozen encoder's outputs exactly.
    """
    peft.validate_for(encoder.text_cfg, encoder.vision_cfg)
    store = encoder.store
    store.freeze_all()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xADA)))
    for side in ("text", "vision"):
        if not reinit_heads:
            continue
        cfg = encoder.config_for(side)
        store[f"{side}.proj"].data = trunc_normal(rng, (cfg.d_model, cfg.proj_dim))
        store[f"{side}.final_ln.gain"].data = np.ones(cfg.d_model)
        store[f"{side}.final_ln.bias"].data = np.zeros(cfg.d_model)
    for name in encoder.head_and_final_ln_names():
        store.set_trainable(name, True)
    wrap_blocks(encoder, peft, rng)
    manifold = ManifoldParams(encoder.text_cfg.proj_dim, init_kappa=init_kappa, store=store)
    return AdaptedModel(encoder, peft, manifold, tau_init=tau_init)


# -- analytic parameter counting ---------------------------------------------


def _per_block_counts(d: int, mlp_dim: int, peft: PeftConfig) -> int:
    """Trainable parameters contributed by one adapted transformer block."""
    if peft.method == "bias":
        # q,k,v,o biases (4d) + fc1 (mlp) + fc2 (d) + two LayerNorm biases (2d)
        return 4 * d + mlp_dim + d + 2 * d
    if peft.method == "layernorm":
        return 4 * d  # two LayerNorms, gain + bias each
    if peft.method in ("seq_adapter", "par_adapter"):
        per_site = d * peft.bottleneck_dim + peft.bottleneck_dim + peft.bottleneck_dim * d + d
        return 2 * per_site  # one adapter per sublayer (attention and MLP)
    if peft.method == "lora":
        dims = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
                "fc1": (d, mlp_dim), "fc2": (mlp_dim, d)}
        return sum(peft.lora_rank * (d_in + d_out) for d_in, d_out in
                   (dims[t] for t in peft.lora_targets))
    raise ConfigurationError(peft.method)


N_SCALARS = 4  # curvature, two projection scalars, contrastive temperature


def count_trainable_params(text_cfg: EncoderConfig, vision_cfg: EncoderConfig,
                           peft: PeftConfig) -> int:
    """Exact analytic size of the trainable set defined by the assembler:
    adaptation parameters on the selected layers, projection heads, final
    LayerNorms, and the learnable scalars."""
    peft.validate_for(text_cfg, vision_cfg)
    total = N_SCALARS
    for cfg, layers in ((text_cfg, peft.text_layers), (vision_cfg, peft.vision_layers)):
        total += cfg.d_model * cfg.proj_dim  # projection head
        total += 2 * cfg.d_model             # final LayerNorm gain + bias
        total += len(layers) * _per_block_counts(cfg.d_model, cfg.mlp_dim, peft)
    return total


def runtime_trainable_count(model: AdaptedModel) -> int:
    return model.store.n_trainable()


# Symbolic architectures for the full-size parameter-budget checks.
CLIP_B_TEXT = EncoderConfig(n_layers=12, d_model=512, n_heads=8, proj_dim=512, vocab_size=49408, max_len=77)
CLIP_B_VISION = EncoderConfig(n_layers=12, d_model=768, n_heads=12, proj_dim=512,
                              patch_grid=(14, 14), image_size=224)
CLIP_S_TEXT = EncoderConfig(n_layers=12, d_model=512, n_heads=8, proj_dim=512, vocab_size=49408, max_len=77)
CLIP_S_VISION = EncoderConfig(n_layers=12, d_model=384, n_heads=6, proj_dim=512,
                              patch_grid=(14, 14), image_size=224)
