"""Score prediction ensembles with the consistency-based quality evaluator:
a unanimous ensemble sails through, mild disagreement lands near the
thresholds, and random masks are flagged hard.

Usage: python3 demos/04_quality_filter.py
"""

import numpy as np

from elnet.masks import Mask
from elnet.quality import LqeConfig, PredictionEnsemble, evaluate


def blob(seed, size=48):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    cy, cx = rng.integers(12, size - 12, 2)
    r = rng.integers(6, 14)
    return Mask(((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8))


def jitter(mask, seed, flips):
    rng = np.random.default_rng(seed)
    bits = mask.bits.copy()
    idx = rng.integers(0, bits.size, flips)
    bits.flat[idx] ^= 1
    return Mask(bits)


def show(name, ensemble, cfg):
    rep = evaluate(ensemble, cfg)
    print(
        f"{name:22s} r_mean={rep.r_mean:.4f}  iou_avg={rep.iou_avg:.3f}  "
        f"dice_avg={rep.dice_avg:.3f}  Q={rep.q:.4f}  -> {rep.verdict}"
    )


def main():
    cfg = LqeConfig()
    base = blob(0)

    unanimous = PredictionEnsemble(predictions=(base, base, base))
    slight = PredictionEnsemble(predictions=(base, jitter(base, 1, 8), jitter(base, 2, 8)))
    heavy = PredictionEnsemble(predictions=(base, jitter(base, 3, 200), jitter(base, 4, 200)))
    rng = np.random.default_rng(9)
    random3 = PredictionEnsemble(
        predictions=tuple(Mask((rng.random((48, 48)) > 0.5).astype(np.uint8)) for _ in range(3))
    )

    print(f"thresholds: q>={cfg.tau_q}  (1-r)>={cfg.tau_r}  iou>={cfg.tau_iou}  dice>={cfg.tau_dice}\n")
    show("unanimous", unanimous, cfg)
    show("slight disagreement", slight, cfg)
    show("heavy disagreement", heavy, cfg)
    show("random masks", random3, cfg)


if __name__ == "__main__":
    main()
