"""Label quality evaluation from the consistency of three aligned predictions.

Scoring combines three signals over an ensemble of exactly three masks:
per-pixel RMSE around the ensemble mean (averaged over pixels), and the
average pairwise IoU and Dice. The weighted score
Q = b1*(1-R) + b2*IoU_avg + b3*Dice_avg drives a retain/flag verdict; a
label is flagged when any of (1-R), IoU_avg, Dice_avg, or Q falls strictly
below its threshold.

For binary masks and ensembles of three, the per-pixel RMSE takes only two
values: 0 where all three agree and sqrt(2)/3 where they split 2-1, so the
aggregate R equals sqrt(2)/3 times the fraction of split pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .augment import PerturbSpec
from .manifest import DatasetManifest, ManifestRecord
from .masks import Mask, dice, iou

__all__ = [
    "PredictionEnsemble",
    "LqeConfig",
    "QualityReport",
    "pixel_rmse",
    "pairwise_consistency",
    "quality_score",
    "evaluate",
    "filter_dataset",
    "reports_to_json",
    "SPLIT_RMSE",
]

# per-pixel RMSE of a 2-1 split among three binary values
SPLIT_RMSE = math.sqrt(2.0) / 3.0

PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class PredictionEnsemble:
    """Exactly three equal-shape masks, already aligned to the original frame."""

    predictions: tuple[Mask, Mask, Mask]
    checkpoint_ids: tuple[str, ...] = ()
    specs: tuple[PerturbSpec, ...] = ()

    def __post_init__(self):
        preds = tuple(self.predictions)
        if len(preds) != 3:
            raise ValueError(f"ensemble needs exactly 3 predictions, got {len(preds)}")
        shapes = {p.shape for p in preds}
        if len(shapes) != 1:
            raise ValueError(f"prediction shapes differ: {sorted(shapes)}")
        object.__setattr__(self, "predictions", preds)


@dataclass(frozen=True)
class LqeConfig:
    beta: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    tau_q: float = 0.85
    tau_r: float = 0.80
    tau_iou: float = 0.70
    tau_dice: float = 0.80

    def __post_init__(self):
        if len(self.beta) != 3 or any(b < 0 for b in self.beta):
            raise ValueError(f"beta must be 3 non-negative weights, got {self.beta}")
        if abs(sum(self.beta) - 1.0) > 1e-9:
            raise ValueError(f"beta must sum to 1, got sum {sum(self.beta)}")
        for name in ("tau_q", "tau_r", "tau_iou", "tau_dice"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0,1], got {v}")

    def to_json(self) -> dict:
        return {
            "beta": list(self.beta),
            "tau_q": self.tau_q,
            "tau_r": self.tau_r,
            "tau_iou": self.tau_iou,
            "tau_dice": self.tau_dice,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LqeConfig":
        kw = dict(obj)
        if "beta" in kw:
            kw["beta"] = tuple(kw["beta"])
        return cls(**kw)


@dataclass(frozen=True)
class QualityReport:
    r_mean: float
    iou_avg: float
    dice_avg: float
    q: float
    verdict: str
    per_pair_iou: tuple[float, float, float]
    per_pair_dice: tuple[float, float, float]

    def to_json(self) -> dict:
        return {
            "r_mean": self.r_mean,
            "iou_avg": self.iou_avg,
            "dice_avg": self.dice_avg,
            "q": self.q,
            "verdict": self.verdict,
            "per_pair_iou": list(self.per_pair_iou),
            "per_pair_dice": list(self.per_pair_dice),
        }


def pixel_rmse(e: PredictionEnsemble) -> float:
    """Mean over pixels of the RMS deviation from the per-pixel ensemble mean."""
    stack = np.stack([p.bits for p in e.predictions]).astype(np.float64)
    mean = stack.mean(axis=0)
    r_map = np.sqrt(((stack - mean) ** 2).mean(axis=0))
    return float(r_map.mean())


def pairwise_consistency(e: PredictionEnsemble) -> tuple[float, float, tuple, tuple]:
    ious = tuple(iou(e.predictions[i], e.predictions[j]) for i, j in PAIRS)
    dices = tuple(dice(e.predictions[i], e.predictions[j]) for i, j in PAIRS)
    return float(np.mean(ious)), float(np.mean(dices)), ious, dices


def quality_score(r_mean: float, iou_avg: float, dice_avg: float, cfg: LqeConfig) -> float:
    b1, b2, b3 = cfg.beta
    return b1 * (1.0 - r_mean) + b2 * iou_avg + b3 * dice_avg


def evaluate(e: PredictionEnsemble, cfg: LqeConfig) -> QualityReport:
    r_mean = pixel_rmse(e)
    iou_avg, dice_avg, ious, dices = pairwise_consistency(e)
    q = quality_score(r_mean, iou_avg, dice_avg, cfg)
    flagged = (
        (1.0 - r_mean) < cfg.tau_r
        or iou_avg < cfg.tau_iou
        or dice_avg < cfg.tau_dice
        or q < cfg.tau_q
    )
    return QualityReport(
        r_mean=r_mean,
        iou_avg=iou_avg,
        dice_avg=dice_avg,
        q=q,
        verdict="flag" if flagged else "retain",
        per_pair_iou=ious,
        per_pair_dice=dices,
    )


def filter_dataset(
    manifest: DatasetManifest,
    ensembles: dict[str, PredictionEnsemble],
    cfg: LqeConfig,
    retained_provenance: str = "auto",
) -> tuple[DatasetManifest, DatasetManifest, dict[str, QualityReport]]:
    """Partition records by verdict, preserving manifest order.

    Retained records get the given provenance and their Q as quality;
    flagged records keep their label path but are marked for re-annotation.
    """
    retained: list[ManifestRecord] = []
    flagged: list[ManifestRecord] = []
    reports: dict[str, QualityReport] = {}
    for rec in manifest:
        ens = ensembles.get(rec.image_path)
        if ens is None:
            raise ValueError(f"no ensemble for record {rec.image_path!r}")
        rep = evaluate(ens, cfg)
        reports[rec.image_path] = rep
        if rep.verdict == "retain":
            retained.append(
                ManifestRecord(
                    image_path=rec.image_path,
                    split=rec.split,
                    label_path=rec.label_path,
                    provenance=retained_provenance,
                    quality=rep.q,
                    extra=dict(rec.extra),
                )
            )
        else:
            flagged.append(
                ManifestRecord(
                    image_path=rec.image_path,
                    split=rec.split,
                    label_path=rec.label_path,
                    provenance="flagged",
                    quality=rep.q,
                    extra=dict(rec.extra),
                )
            )
    return DatasetManifest(retained), DatasetManifest(flagged), reports


def reports_to_json(reports: dict[str, QualityReport], ensembles: dict[str, PredictionEnsemble] | None = None) -> str:
    """Serialize reports (plus ensemble provenance when given) as a JSON array."""
    rows = []
    for image_path, rep in reports.items():
        row = {"image_path": image_path, **rep.to_json()}
        if ensembles is not None and image_path in ensembles:
            ens = ensembles[image_path]
            row["checkpoint_ids"] = list(ens.checkpoint_ids)
            row["specs"] = [s.to_json() for s in ens.specs]
        rows.append(row)
    return json.dumps(rows, indent=2, sort_keys=True)
