"""Start from a dataset where only a few images carry manual labels, let the
pipeline annotate the rest, and check the generated labels against the
(held-back) ground truth.

Usage: python3 demos/06_annotate_pipeline.py --out-dir /tmp/elnet_demo6
"""

import argparse
import logging
import os

import numpy as np

from elnet.benchmark import CorruptionSpec, SceneSpec, gen_dataset
from elnet.masks import load_image, load_mask, miou
from elnet.network import ModelConfig
from elnet.pipeline import PipelineConfig, make_annotate_manifest, run
from elnet.training import TrainConfig, pretrain_backbone


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="/tmp/elnet_demo6")
    ap.add_argument("--n", type=int, default=24)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--labeled-fraction", type=float, default=0.3)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--loops", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    man = gen_dataset(
        args.n, SceneSpec(size=args.size, seed=args.seed), CorruptionSpec(seed=args.seed), os.path.join(args.out_dir, "data")
    )
    ann = make_annotate_manifest(man, labeled_fraction=args.labeled_fraction)
    manual = sum(r.provenance == "manual" for r in ann)
    unlabeled = sum(r.label_path is None for r in ann)
    print(f"starting pools: {manual} manual labels, {unlabeled} unlabeled images")

    imgs = [load_image(r.image_path) for r in man if r.split == "train"]
    mcfg = ModelConfig()
    backbone, _ = pretrain_backbone(imgs, TrainConfig(epochs=8, batch_size=8, seed=args.seed), mcfg)

    cfg = PipelineConfig(
        mode="annotate",
        loop_count=args.loops,
        seed=args.seed,
        train=TrainConfig(epochs=args.epochs, batch_size=8, seed=args.seed),
        model=mcfg,
    )
    res = run(cfg, ann, os.path.join(args.out_dir, "run"), backbone)

    auto = [r for r in res.final_manifest if r.provenance == "auto"]
    flagged = [r for r in res.final_manifest if r.provenance == "flagged"]
    print(f"\nannotated {len(auto)} images automatically, {len(flagged)} flagged for a human")
    if auto:
        scores = [miou(load_mask(r.label_path), load_mask(r.extra["gt_path"])) for r in auto]
        print(f"auto-label quality vs held-back gt: mean mIoU {np.mean(scores):.4f}")
    for row in res.stats:
        print(f"  iter {row['iteration']}: retained {row['retained']}/{row['evaluated']}")


if __name__ == "__main__":
    main()
