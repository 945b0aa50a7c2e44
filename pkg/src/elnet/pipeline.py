"""Five-stage iterative label pipeline.

Stage 1 validates inputs and splits labeled from unlabeled pools. Stage 2
fine-tunes the model on the labeled pool. Stage 3 predicts every target
image under three perturbations, aligns the predictions, scores their
consistency, and either retains the model's label or flags the record for
re-annotation. Stage 4 fine-tunes further on the labeled pool plus the
retained labels. Stages 3 and 4 repeat loop_count times, and one final
stage 3 emits the outgoing labels.

Two modes: 'enhance' replaces coarse labels on fully labeled data;
'annotate' generates labels for unlabeled records from a small manual pool.
Flagged records never enter training; manual labels are never overwritten.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .augment import align_prediction, apply_image, make_ensemble_specs
from .manifest import DatasetManifest, ManifestRecord, write_manifest
from .masks import GrayImage, Mask, load_image, load_mask, save_mask
from .network import ModelConfig, model_forward
from .quality import LqeConfig, PredictionEnsemble, QualityReport, evaluate, reports_to_json
from .training import Checkpoint, LossConfig, TrainConfig, checkpoint_to_store, finetune

__all__ = ["PipelineConfig", "PipelineState", "PipelineResult", "stage1_prepare", "stage2_finetune", "stage3_generate_and_filter", "stage4_refine", "run", "make_annotate_manifest"]

logger = logging.getLogger("elnet.pipeline")

MODES = ("enhance", "annotate")


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "enhance"
    loop_count: int = 3
    seed: int = 0
    ensemble_checkpoints: tuple[float, ...] = (0.5, 0.75, 1.0)
    refine_epochs_fraction: float = 0.25
    cold_start_refine: bool = False
    lqe: LqeConfig = field(default_factory=LqeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0 <= self.loop_count <= 10):
            raise ValueError(f"loop_count must be in [0,10], got {self.loop_count}")
        cks = tuple(self.ensemble_checkpoints)
        if len(cks) not in (1, 3):
            raise ValueError(f"ensemble_checkpoints needs 1 or 3 entries, got {len(cks)}")
        if any(not (0.0 < f <= 1.0) for f in cks):
            raise ValueError("ensemble_checkpoints are fractions of the epoch budget in (0,1]")
        if not (0.0 < self.refine_epochs_fraction <= 1.0):
            raise ValueError("refine_epochs_fraction must be in (0,1]")
        object.__setattr__(self, "ensemble_checkpoints", cks)

    def snapshot_epochs(self, budget: int) -> tuple[int, ...]:
        return tuple(sorted({max(1, round(f * budget)) for f in self.ensemble_checkpoints}))


@dataclass
class PipelineState:
    manifest: DatasetManifest
    iteration: int = 0
    checkpoints: list[Checkpoint] = field(default_factory=list)
    stats: list[dict] = field(default_factory=list)
    reports: dict[str, QualityReport] = field(default_factory=dict)
    retained_ever: set[str] = field(default_factory=set)
    out_dir: str = "."
    backbone: Checkpoint | None = None


@dataclass
class PipelineResult:
    final_manifest: DatasetManifest
    flagged_manifest: DatasetManifest
    stats: list[dict]
    reports: dict[str, QualityReport]
    checkpoint: Checkpoint
    out_dir: str


def make_annotate_manifest(manifest: DatasetManifest, labeled_fraction: float = 0.3, label_from_extra: str | None = "gt_path") -> DatasetManifest:
    """Prepare an annotate-mode input: the first fraction of train records keep
    a manual label (taken from the given extra field when present), the rest
    lose their labels; test records pass through unchanged."""
    train = [r for r in manifest if r.split == "train"]
    n_manual = max(1, int(round(len(train) * labeled_fraction)))
    out, seen = [], 0
    for r in manifest:
        if r.split != "train":
            out.append(r)
            continue
        if seen < n_manual:
            label = r.extra.get(label_from_extra, r.label_path) if label_from_extra else r.label_path
            out.append(ManifestRecord(r.image_path, "train", label_path=label, provenance="manual", extra=dict(r.extra)))
        else:
            out.append(ManifestRecord(r.image_path, "train", label_path=None, provenance="auto", extra=dict(r.extra)))
        seen += 1
    return DatasetManifest(out)


def _is_target(rec: ManifestRecord, mode: str) -> bool:
    if rec.provenance == "manual":
        return False
    if mode == "enhance":
        return True  # every non-manual record gets re-labeled, test split included
    return rec.split == "train"  # annotate mode labels the unlabeled train pool


def _training_records(manifest: DatasetManifest) -> list[ManifestRecord]:
    return [
        r
        for r in manifest
        if r.split == "train" and r.label_path is not None and r.provenance != "flagged"
    ]


def stage1_prepare(cfg: PipelineConfig, manifest: DatasetManifest, out_dir: str, backbone: Checkpoint) -> PipelineState:
    """Validate files, split pools, record counts."""
    labeled = unlabeled = 0
    for rec in manifest:
        if not os.path.exists(rec.image_path):
            raise FileNotFoundError(f"image missing: {rec.image_path}")
        if rec.label_path is not None:
            if not os.path.exists(rec.label_path):
                raise FileNotFoundError(f"label missing: {rec.label_path}")
            labeled += 1
        else:
            unlabeled += 1
    if not _training_records(manifest):
        raise ValueError("no labeled training records to start from")
    if cfg.mode == "enhance":
        bad = [r.image_path for r in manifest if r.label_path is None]
        if bad:
            raise ValueError(f"enhance mode requires labels on every record; missing for {bad[:3]}")
    os.makedirs(out_dir, exist_ok=True)
    logger.info("stage1: %d labeled, %d unlabeled records", labeled, unlabeled)
    state = PipelineState(manifest=manifest, out_dir=out_dir, backbone=backbone)
    return state


def stage2_finetune(cfg: PipelineConfig, state: PipelineState) -> PipelineState:
    train_recs = _training_records(state.manifest)
    tcfg = replace(
        cfg.train,
        seed=cfg.train.seed,
        checkpoint_epochs=cfg.snapshot_epochs(cfg.train.epochs),
    )
    result = finetune(DatasetManifest(train_recs), state.backbone, tcfg, cfg.loss, cfg.model)
    state.checkpoints = result.checkpoints
    logger.info("stage2: %d epochs, final loss %.4f, %d snapshots", tcfg.epochs, result.epoch_losses[-1], len(result.checkpoints))
    return state


def _batched_masks(images: list[np.ndarray], ckpt_store, mcfg: ModelConfig, batch: int, threshold: float = 0.5) -> list[Mask]:
    """predict() over many images, grouped by shape and batched."""
    order: dict[tuple[int, int], list[int]] = {}
    for i, arr in enumerate(images):
        order.setdefault(arr.shape, []).append(i)
    outputs: list[Mask | None] = [None] * len(images)
    for shape, idxs in order.items():
        for start in range(0, len(idxs), batch):
            chunk = idxs[start : start + batch]
            x = T.Tensor(np.stack([images[i] for i in chunk])[:, None].astype(np.float32))
            with T.no_grad():
                outs = model_forward(x, ckpt_store, mcfg, decoder_bn_train=False)
                probs = T.sigmoid(outs[2])
            for row, i in enumerate(chunk):
                outputs[i] = Mask((probs.data[row, 0] > threshold).astype(np.uint8))
    return outputs  # type: ignore[return-value]


def stage3_generate_and_filter(cfg: PipelineConfig, state: PipelineState) -> PipelineState:
    """Predict under perturbation, score consistency, retain or flag."""
    if not state.checkpoints:
        raise ValueError("stage3 requires checkpoints from stage2/stage4")
    targets = [r for r in state.manifest if _is_target(r, cfg.mode)]
    label_dir = os.path.join(state.out_dir, "labels", f"iter{state.iteration}")
    os.makedirs(label_dir, exist_ok=True)

    images = [load_image(r.image_path) for r in targets]
    specs_per_image = []
    for idx in range(len(targets)):
        ens_seed = int(np.random.default_rng([cfg.seed, state.iteration, idx]).integers(0, 2**63))
        specs_per_image.append(make_ensemble_specs(ens_seed))

    stores = [checkpoint_to_store(ck) for ck in state.checkpoints]
    slot_store = [stores[j % len(stores)] for j in range(3)]
    slot_epoch = [state.checkpoints[j % len(stores)].epoch for j in range(3)]

    aligned: list[list[Mask]] = [[None] * 3 for _ in targets]  # type: ignore[list-item]
    for j in range(3):
        perturbed = [apply_image(img, specs[j]).values for img, specs in zip(images, specs_per_image)]
        preds = _batched_masks(perturbed, slot_store[j], cfg.model, cfg.train.batch_size)
        for i, p in enumerate(preds):
            aligned[i][j] = align_prediction(p, specs_per_image[i][j])

    # the label a retained record keeps: newest checkpoint on the clean image
    clean_preds = _batched_masks([im.values for im in images], stores[-1], cfg.model, cfg.train.batch_size)

    retained_provenance = "enhanced" if cfg.mode == "enhance" else "auto"
    new_records: dict[str, ManifestRecord] = {}
    reports: dict[str, QualityReport] = {}
    n_retained = n_flagged = 0
    q_values = []
    for i, rec in enumerate(targets):
        ensemble = PredictionEnsemble(
            predictions=tuple(aligned[i]),
            checkpoint_ids=tuple(f"epoch{e}" for e in slot_epoch),
            specs=tuple(specs_per_image[i]),
        )
        rep = evaluate(ensemble, cfg.lqe)
        reports[rec.image_path] = rep
        q_values.append(rep.q)
        if rep.verdict == "retain":
            out_path = os.path.join(label_dir, os.path.basename(rec.image_path))
            save_mask(clean_preds[i], out_path)
            new_records[rec.image_path] = ManifestRecord(
                rec.image_path,
                rec.split,
                label_path=out_path,
                provenance=retained_provenance,
                quality=rep.q,
                extra=dict(rec.extra),
            )
            state.retained_ever.add(rec.image_path)
            n_retained += 1
        else:
            new_records[rec.image_path] = ManifestRecord(
                rec.image_path,
                rec.split,
                label_path=rec.label_path,
                provenance="flagged",
                quality=rep.q,
                extra=dict(rec.extra),
            )
            n_flagged += 1

    merged = [new_records.get(r.image_path, r) for r in state.manifest]
    state.manifest = DatasetManifest(merged)
    state.reports = reports
    state.stats.append(
        {
            "iteration": state.iteration,
            "evaluated": len(targets),
            "retained": n_retained,
            "flagged": n_flagged,
            "mean_q": float(np.mean(q_values)) if q_values else None,
            "cumulative_retained": len(state.retained_ever),
        }
    )
    logger.info(
        "stage3[iter %d]: %d evaluated, %d retained, %d flagged", state.iteration, len(targets), n_retained, n_flagged
    )
    return state


def stage4_refine(cfg: PipelineConfig, state: PipelineState) -> PipelineState:
    last = state.stats[-1] if state.stats else {}
    if not last.get("retained"):
        logger.warning("stage4[iter %d]: no retained labels, skipping refinement", state.iteration)
        return state
    budget = max(1, int(round(cfg.train.epochs * cfg.refine_epochs_fraction)))
    tcfg = replace(
        cfg.train,
        epochs=budget,
        seed=cfg.train.seed + state.iteration + 1,
        checkpoint_epochs=cfg.snapshot_epochs(budget),
    )
    train_recs = _training_records(state.manifest)
    init_from = None if cfg.cold_start_refine else state.checkpoints[-1]
    backbone = state.backbone if cfg.cold_start_refine else None
    result = finetune(
        DatasetManifest(train_recs), backbone, tcfg, cfg.loss, cfg.model, init_from=init_from
    )
    state.checkpoints = result.checkpoints
    logger.info("stage4[iter %d]: refined on %d records for %d epochs", state.iteration, len(train_recs), budget)
    return state


def run(cfg: PipelineConfig, manifest: DatasetManifest, out_dir: str, backbone: Checkpoint) -> PipelineResult:
    """stage1, stage2, then loop_count x (stage3, stage4), then a final stage3."""
    state = stage1_prepare(cfg, manifest, out_dir, backbone)
    marker = os.path.join(out_dir, "resume.json")
    state = stage2_finetune(cfg, state)
    for it in range(cfg.loop_count):
        state.iteration = it
        state = stage3_generate_and_filter(cfg, state)
        _persist(state, marker)
        state = stage4_refine(cfg, state)
    state.iteration = cfg.loop_count
    state = stage3_generate_and_filter(cfg, state)
    _persist(state, marker)

    flagged = state.manifest.subset(lambda r: r.provenance == "flagged")
    _write_outputs(state)
    if os.path.exists(marker):
        os.remove(marker)
    return PipelineResult(
        final_manifest=state.manifest,
        flagged_manifest=flagged,
        stats=state.stats,
        reports=state.reports,
        checkpoint=state.checkpoints[-1],
        out_dir=out_dir,
    )


def _persist(state: PipelineState, marker: str) -> None:
    write_manifest(state.manifest, os.path.join(state.out_dir, "manifest_current.jsonl"))
    with open(os.path.join(state.out_dir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(state.stats, fh, indent=2)
    with open(marker, "w", encoding="utf-8") as fh:
        json.dump({"completed_stage3_count": len(state.stats)}, fh)


def _write_outputs(state: PipelineState) -> None:
    write_manifest(state.manifest, os.path.join(state.out_dir, "manifest_final.jsonl"))
    write_manifest(
        state.manifest.subset(lambda r: r.provenance == "flagged"),
        os.path.join(state.out_dir, "manifest_flagged.jsonl"),
    )
    with open(os.path.join(state.out_dir, "lqe_reports.json"), "w", encoding="utf-8") as fh:
        fh.write(reports_to_json(state.reports))
