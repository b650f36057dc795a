#!/usr/bin/env python3
"""Full desk-scale experiment: generate data, pretrain the Euclidean
baseline, adapt it into hyperbolic space with and without the entailment
term, then compare VQA accuracy and hierarchy geometry.

Usage:
    python3 scripts/run_pipeline.py --out runs/demo [--method seq_adapter]
"""

import argparse
import json
import sys
import time
from pathlib import Path

from hyperlift.checkpoint import load_euclidean, save_adapted, save_euclidean
from hyperlift.data import generate_corpus, generate_vqa
from hyperlift.encoders import DualEncoder, EncoderConfig
from hyperlift.evaluation import evaluate, geometry_report
from hyperlift.objectives import LossConfig
from hyperlift.peft import PEFT_METHODS, PeftConfig, assemble_adapted_model
from hyperlift.training import TrainConfig, adapt, pretrain_euclidean


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--method", default="seq_adapter", choices=PEFT_METHODS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-samples", type=int, default=10000)
    p.add_argument("--n-vqa", type=int, default=2000)
    p.add_argument("--pretrain-steps", type=int, default=1500)
    p.add_argument("--adapt-steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lambda-entail", type=float, default=0.1)
    return p.parse_args()


def main():
    args = parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    def say(msg):
        print(f"[{time.time() - t0:7.1f}s] {msg}", flush=True)

    say(f"generating {args.n_samples} training scenes and {args.n_vqa} VQA items")
    corpus = generate_corpus(seed=args.seed, n_samples=args.n_samples)
    vqa = generate_vqa(seed=args.seed + 1, n_items=args.n_vqa)

    say(f"pretraining Euclidean baseline for {args.pretrain_steps} steps")
    enc_cfg = EncoderConfig()
    model = DualEncoder(enc_cfg, enc_cfg, seed=args.seed)
    pre_cfg = TrainConfig(steps=args.pretrain_steps, batch_size=args.batch_size,
                          warmup_steps=max(1, args.pretrain_steps // 10), seed=args.seed)
    pretrain_euclidean(corpus, model, pre_cfg, metrics_path=out / "pretrain_metrics.jsonl")
    save_euclidean(model, out / "euclidean.npz")

    peft = PeftConfig(method=args.method,
                      text_layers=tuple(range(enc_cfg.n_layers)),
                      vision_layers=tuple(range(enc_cfg.n_layers)))
    results = {}
    for lam in (args.lambda_entail, 0.0):
        tag = f"lambda_{lam:g}"
        say(f"adapting ({args.method}, {tag}) for {args.adapt_steps} steps")
        adapted = assemble_adapted_model(load_euclidean(out / "euclidean.npz"),
                                         peft, seed=args.seed)
        ad_cfg = TrainConfig(steps=args.adapt_steps, batch_size=args.batch_size,
                             warmup_steps=max(1, args.adapt_steps // 10), seed=args.seed)
        adapt(corpus, adapted, ad_cfg, LossConfig(lambda_entail=lam),
              metrics_path=out / f"adapt_metrics_{tag}.jsonl")
        save_adapted(adapted, out / f"adapted_{tag}.npz")

        report = evaluate(vqa, adapted, keep_per_item=False)
        geo = geometry_report(corpus[:512], adapted)
        results[tag] = {"accuracy": report.accuracy,
                        "containment_rate": geo["containment_rate"],
                        "radius": {k: v["mean"] for k, v in geo["radius"].items()},
                        "kappa": geo["kappa"]}
        say(f"{tag}: accuracy {report.accuracy:.3f}, "
            f"containment {geo['containment_rate']:.3f}, "
            f"radii {json.dumps(results[tag]['radius'])}")

    (out / "summary.json").write_text(json.dumps(results, indent=2))
    say(f"wrote {out / 'summary.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
