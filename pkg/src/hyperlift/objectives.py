"""Training objectives in hyperbolic space.

Two terms: a compositional contrastive loss (distance-based InfoNCE at scene
level and box level, both directions) and an entailment-cone violation hinge
aggregated over a configurable set of parent->child relations. Combined as
total = contrastive + lambda * entailment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .manifold import (
    ConeParams,
    exterior_angle,
    half_aperture,
    pairwise_geodesic_distance,
)

log = logging.getLogger(__name__)

# parent -> child: the child should fall inside the parent's entailment cone.
DEFAULT_ENTAILMENT_PAIRS = (
    ("text", "image"),
    ("text_box", "text"),
    ("text_box", "image_box"),
    ("image_box", "image"),
)

CATEGORIES = ("image", "text", "image_box", "text_box")


@dataclass
class LossConfig:
    lambda_entail: float = 0.1
    tau_init: float = 0.07
    tau_min: float = 0.01
    cone: ConeParams = field(default_factory=ConeParams)
    entailment_pairs: tuple = DEFAULT_ENTAILMENT_PAIRS

    def __post_init__(self):
        if self.lambda_entail < 0:
            raise ValueError("lambda_entail must be non-negative")
        if self.tau_init <= 0:
            raise ValueError("tau_init must be positive")


@dataclass
class BatchEmbeddings:
    """Lifted points for one batch. Scene-level tensors are (B, n+1); the box
    tensors are flattened over all boxes in the batch, with `box_parent`
    giving each box's sample index."""

    image: Tensor
    text: Tensor
    image_box: Tensor
    text_box: Tensor
    box_parent: np.ndarray

    def category(self, name: str) -> Tensor:
        return getattr(self, name)

    @property
    def batch_size(self) -> int:
        return self.image.shape[0]


def _info_nce(dist: Tensor, tau: Tensor) -> Tensor:
    """Symmetric cross-entropy over -distance/tau logits; diagonal matched."""
    n = dist.shape[0]
    logits = -dist / tau
    idx = np.arange(n)
    row_ll = ag.log_softmax(logits, axis=1)[idx, idx]
    col_ll = ag.log_softmax(logits, axis=0)[idx, idx]
    return -(row_ll.mean() + col_ll.mean()) * 0.5


def contrastive_hcc(batch: BatchEmbeddings, tau: Tensor, kappa: Tensor) -> Tensor:
    """Scene-level plus box-level distance InfoNCE, averaged."""
    if batch.batch_size < 2:
        raise ValueError("contrastive loss needs batch size >= 2")
    scene = _info_nce(pairwise_geodesic_distance(batch.image, batch.text, kappa), tau)
    box = _info_nce(pairwise_geodesic_distance(batch.image_box, batch.text_box, kappa), tau)
    return (scene + box) * 0.5


def entailment_violation(parent, child, kappa, cone: ConeParams) -> Tensor:
    """Per-pair hinge max(0, exterior_angle - half_aperture).

    Parents that sit numerically at the origin have no cone axis; they
    contribute zero with a logged warning rather than failing the step.
    """
    pdata = parent.data if isinstance(parent, Tensor) else np.asarray(parent)
    snorm = np.linalg.norm(pdata[..., :-1], axis=-1)
    degenerate = snorm < 1e-12
    if degenerate.any():
        log.warning("entailment: %d parent point(s) at origin contribute zero", int(degenerate.sum()))
        keep = ~degenerate
        parent = parent[np.nonzero(keep)[0]]
        child = child[np.nonzero(keep)[0]]
        if not keep.any():
            return Tensor(0.0)
    ext = exterior_angle(parent, child, kappa)
    psi = half_aperture(parent, kappa, cone)
    return ag.relu(ext - psi)


def entailment_hce(batch: BatchEmbeddings, kappa: Tensor, config: LossConfig) -> Tensor:
    """Cone-violation hinge averaged over the configured parent->child pairs."""
    terms = []
    for parent_name, child_name in config.entailment_pairs:
        parent = batch.category(parent_name)
        child = batch.category(child_name)
        if parent.shape[0] != child.shape[0]:
            # box -> scene pairing: broadcast the scene row per box
            if parent_name.endswith("_box"):
                child = child[batch.box_parent]
            else:
                parent = parent[batch.box_parent]
        terms.append(entailment_violation(parent, child, kappa, config.cone).mean())
    return ag.stack(terms).mean()


def total_loss(batch: BatchEmbeddings, tau: Tensor, kappa: Tensor,
               config: LossConfig) -> tuple[Tensor, dict]:
    """contrastive + lambda * entailment; also returns scalar components."""
    hcc = contrastive_hcc(batch, tau, kappa)
    if config.lambda_entail > 0:
        hce = entailment_hce(batch, kappa, config)
        total = hcc + config.lambda_entail * hce
    else:
        hce = Tensor(0.0)
        total = hcc
    parts = {"loss": total.item(), "loss_hcc": hcc.item(), "loss_hce": hce.item()}
    return total, parts
