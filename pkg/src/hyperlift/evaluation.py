"""Zero-shot multiple-choice VQA evaluation by hyperbolic distance matching,
plus a geometry report (radial statistics and cone-containment rates) for
inspecting the learned hierarchy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from .autograd import no_grad
from .data import Tokenizer, VqaItem
from .manifold import ConeParams, exterior_angle, half_aperture, lorentz_radius
from .objectives import DEFAULT_ENTAILMENT_PAIRS
from .peft import AdaptedModel
from .training import CorpusBatcher

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    accuracy: float
    n_items: int
    per_item: list = field(default_factory=list)
    geometry: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def form_queries(question: str, candidates: list[str], tokenizer: Tokenizer) -> list[list[int]]:
    """Concatenate question + whitespace + candidate, tokenized. Candidate-side
    tokens are truncated (never the question) if the context overflows."""
    if len(candidates) != 4:
        raise ValueError("expected exactly 4 candidates")
    q_ids = tokenizer.encode(question, check_len=False)
    if len(q_ids) >= tokenizer.max_len:
        raise ValueError("question alone exceeds the context window")
    queries = []
    for cand in candidates:
        c_ids = tokenizer.encode(cand, check_len=False)
        room = tokenizer.max_len - len(q_ids)
        if len(c_ids) > room:
            log.warning("truncating candidate %r to fit context", cand)
            c_ids = c_ids[:room]
        queries.append(q_ids + c_ids)
    return queries


def _candidate_distances(model: AdaptedModel, images, token_batch, lengths) -> np.ndarray:
    """(n_items, 4) geodesic distances between each image and its 4 queries."""
    from .manifold import geodesic_distance

    with no_grad():
        img_pts = model.embed_image(images).data            # (M, n+1)
        txt_pts = model.embed_text(token_batch, lengths).data  # (4M, n+1)
        kappa = model.manifold.kappa.item()
    m = img_pts.shape[0]
    txt = txt_pts.reshape(m, 4, -1)
    inner = (img_pts[:, None, :-1] * txt[:, :, :-1]).sum(-1) - img_pts[:, None, -1] * txt[:, :, -1]
    arg = np.maximum(-kappa * inner, 1.0)
    return np.sqrt(1.0 / kappa) * np.arccosh(arg)


def predict_answer(image, queries: list[list[int]], model: AdaptedModel,
                   tokenizer: Tokenizer) -> int:
    """Argmax over candidates of the negative geodesic distance to the image;
    ties resolve to the lowest index."""
    tokens, lengths = tokenizer.pad_batch(queries, width=tokenizer.max_len)
    d = _candidate_distances(model, np.asarray(image)[None], tokens, lengths)[0]
    return int(np.argmin(d))


def evaluate(vqa_set: list[VqaItem], model: AdaptedModel, tokenizer=None,
             batch_size: int = 256, keep_per_item: bool = True) -> EvalReport:
    """Batched evaluation; identical predictions to one-at-a-time scoring."""
    if not vqa_set:
        raise ValueError("empty VQA set")
    tokenizer = tokenizer or Tokenizer(model.encoder.text_cfg.max_len)
    n_correct = 0
    per_item = []
    for start in range(0, len(vqa_set), batch_size):
        chunk = vqa_set[start : start + batch_size]
        images = np.stack([it.image for it in chunk])
        queries = []
        for it in chunk:
            queries.extend(form_queries(it.question, it.candidates, tokenizer))
        tokens, lengths = tokenizer.pad_batch(queries, width=tokenizer.max_len)
        dists = _candidate_distances(model, images, tokens, lengths)
        preds = np.argmin(dists, axis=1)
        for offset, it in enumerate(chunk):
            pred = int(preds[offset])
            n_correct += pred == it.gold_index
            if keep_per_item:
                per_item.append({
                    "index": start + offset,
                    "predicted": pred,
                    "gold": it.gold_index,
                    "distances": [float(x) for x in dists[offset]],
                })
    return EvalReport(accuracy=n_correct / len(vqa_set), n_items=len(vqa_set), per_item=per_item)


def geometry_report(corpus_sample, model: AdaptedModel, tokenizer=None,
                    cone: ConeParams | None = None, batch_size: int = 256) -> dict:
    """Per-category Lorentz radii and the cone-containment rate over true
    parent/child pairs."""
    if len(corpus_sample) < 1:
        raise ValueError("empty corpus sample")
    tokenizer = tokenizer or Tokenizer(model.encoder.text_cfg.max_len)
    cone = cone or ConeParams()
    batcher = CorpusBatcher(corpus_sample, tokenizer, seed=0)
    radii = {"image": [], "text": [], "image_box": [], "text_box": []}
    contained, total = 0, 0
    with no_grad():
        kappa = model.manifold.kappa
        for start in range(0, len(corpus_sample), batch_size):
            idx = np.arange(start, min(start + batch_size, len(corpus_sample)))
            batch = batcher.gather(idx)
            pts = {
                "image": model.embed_image(batch["images"]).data,
                "text": model.embed_text(batch["tokens"], batch["lengths"]).data,
                "image_box": model.embed_image(batch["box_images"]).data,
                "text_box": model.embed_text(batch["box_tokens"], batch["box_lengths"]).data,
            }
            for name, p in pts.items():
                radii[name].append(lorentz_radius(p, kappa).data)
            parent_map = batch["box_parent"]
            for parent_name, child_name in DEFAULT_ENTAILMENT_PAIRS:
                ppts, cpts = pts[parent_name], pts[child_name]
                if ppts.shape[0] != cpts.shape[0]:
                    cpts = cpts[parent_map] if parent_name.endswith("_box") else cpts
                    ppts = ppts[parent_map] if not parent_name.endswith("_box") else ppts
                ext = exterior_angle(ppts, cpts, kappa).data
                psi = half_aperture(ppts, kappa, cone).data
                contained += int((ext <= psi).sum())
                total += len(ext)
        report = {"n_samples": len(corpus_sample), "radius": {}, "kappa": kappa.item()}
        for name, chunks in radii.items():
            r = np.concatenate(chunks)
            report["radius"][name] = {
                "mean": float(r.mean()),
                "p25": float(np.percentile(r, 25)),
                "p50": float(np.percentile(r, 50)),
                "p75": float(np.percentile(r, 75)),
            }
        report["containment_rate"] = contained / total
    return report
