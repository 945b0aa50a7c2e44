"""Synthetic benchmark: speckled two-level scenes with exact ground truth, a
coarse-label corruptor, and the three-test-set evaluation protocol.

Scenes place dark elliptical blobs and ribbons on a brighter background and
multiply in gamma speckle (unit mean), so the clean scene is piecewise
constant and the mask is the exact target support. The corruptor emulates
sloppy manual annotation: polygonal boundary simplification, random
dilation/erosion, spurious blobs, and omitted components.

The evaluation protocol trains a small reference network, independent of the
main model, on the training labels and scores it against alternative label
sets for the same test images; label quality is read off each set's metric
delta from the high-quality reference labels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage import draw, measure

from . import tensor as T
from .manifest import DatasetManifest, ManifestRecord
from .masks import GrayImage, Mask, accuracy, confusion, load_image, load_mask, miou, save_image, save_mask
from .training import AdamState, adam_step
from .network import ParamStore

__all__ = [
    "SceneSpec",
    "CorruptionSpec",
    "RefNetConfig",
    "ProtocolReport",
    "gen_scene",
    "corrupt_label",
    "gen_dataset",
    "train_refnet",
    "predict_refnet",
    "eval_protocol",
    "eval_manifest_pair",
    "eam_ablation",
]


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    blob_count: tuple[int, int] = (1, 3)
    ribbon_count: tuple[int, int] = (0, 2)
    speckle: float = 0.15
    contrast: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.size < 16 or self.size % 16:
            raise ValueError(f"size must be a positive multiple of 16, got {self.size}")
        for name in ("blob_count", "ribbon_count"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} range invalid: ({lo}, {hi})")
        if not (0.0 <= self.speckle < 1.0):
            raise ValueError(f"speckle must be in [0,1), got {self.speckle}")
        if not (0.0 < self.contrast <= 1.0):
            raise ValueError(f"contrast must be in (0,1], got {self.contrast}")


@dataclass(frozen=True)
class CorruptionSpec:
    tolerance: float = 2.0
    radius_range: tuple[int, int] = (1, 2)
    fp_rate: float = 0.3
    omission_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.tolerance < 0:
            raise ValueError("tolerance must be non-negative")
        lo, hi = self.radius_range
        if lo < 0 or hi < lo:
            raise ValueError(f"radius_range invalid: ({lo}, {hi})")
        for name in ("fp_rate", "omission_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0,1], got {v}")


def _ellipse_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    cy, cx = rng.integers(size // 6, size - size // 6, size=2)
    ry = rng.integers(max(2, size // 16), size // 6 + 1)
    rx = rng.integers(max(2, size // 16), size // 6 + 1)
    rot = rng.uniform(0, np.pi)
    rr, cc = draw.ellipse(cy, cx, ry, rx, shape=(size, size), rotation=rot)
    out = np.zeros((size, size), dtype=np.uint8)
    out[rr, cc] = 1
    return out


def _ribbon_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    # quadratic curve between two border points, thickened to a few pixels
    def border_point():
        side = rng.integers(0, 4)
        t = int(rng.integers(0, size))
        return [(0, t), (size - 1, t), (t, 0), (t, size - 1)][side]

    p0 = np.array(border_point(), dtype=np.float64)
    p2 = np.array(border_point(), dtype=np.float64)
    p1 = rng.uniform(size * 0.2, size * 0.8, size=2)
    ts = np.linspace(0.0, 1.0, 4 * size)[:, None]
    pts = (1 - ts) ** 2 * p0 + 2 * ts * (1 - ts) * p1 + ts**2 * p2
    out = np.zeros((size, size), dtype=np.uint8)
    ij = np.clip(np.rint(pts).astype(int), 0, size - 1)
    out[ij[:, 0], ij[:, 1]] = 1
    width = int(rng.integers(1, 3))
    return ndimage.binary_dilation(out, iterations=width).astype(np.uint8)


def gen_scene(spec: SceneSpec) -> tuple[GrayImage, Mask]:
    """One scene: exact target mask plus the speckled image over it."""
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    mask = np.zeros((size, size), dtype=np.uint8)
    n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    for _ in range(n_blobs):
        mask |= _ellipse_mask(rng, size)
    n_ribbons = int(rng.integers(spec.ribbon_count[0], spec.ribbon_count[1] + 1))
    for _ in range(n_ribbons):
        mask |= _ribbon_mask(rng, size)
    bg = 0.5 + spec.contrast / 2
    fg = 0.5 - spec.contrast / 2
    base = np.where(mask, fg, bg).astype(np.float64)
    if spec.speckle > 0:
        var = spec.speckle**2
        shape_k = 1.0 / var
        speckle = rng.gamma(shape_k, var, size=(size, size))
        base = base * speckle
    return GrayImage(np.clip(base, 0.0, 1.0).astype(np.float32)), Mask(mask)


def _simplify_component(comp: np.ndarray, tolerance: float) -> np.ndarray:
    """Polygonal boundary simplification of one connected component."""
    padded = np.pad(comp.astype(np.float64), 1)
    out = np.zeros_like(comp)
    for contour in measure.find_contours(padded, 0.5):
        poly = measure.approximate_polygon(contour, tolerance=tolerance)
        if len(poly) < 3:
            continue
        rr, cc = draw.polygon(poly[:, 0] - 1, poly[:, 1] - 1, shape=comp.shape)
        out[rr, cc] = 1
    return out


def corrupt_label(gt: Mask, spec: CorruptionSpec) -> Mask:
    """Degrade a clean label the way a careless annotator would.

    Order: per-component polygonal simplification, then random grow/shrink,
    then spurious blobs, then component omission last (an omission rate of
    one therefore always yields an empty mask).
    """
    rng = np.random.default_rng(spec.seed)
    labeled, n_comp = ndimage.label(gt.bits)
    out = np.zeros_like(gt.bits)
    for ci in range(1, n_comp + 1):
        comp = (labeled == ci).astype(np.uint8)
        if spec.tolerance > 0 and comp.sum() > 8:
            comp = _simplify_component(comp, spec.tolerance)
        radius = int(rng.integers(spec.radius_range[0], spec.radius_range[1] + 1))
        if radius > 0:
            if rng.uniform() < 0.5:
                comp = ndimage.binary_dilation(comp, iterations=radius).astype(np.uint8)
            else:
                comp = ndimage.binary_erosion(comp, iterations=radius).astype(np.uint8)
        out |= comp
    for _ in range(2):
        if rng.uniform() < spec.fp_rate:
            out |= _ellipse_mask(rng, gt.height) if gt.height == gt.width else 0
    relabeled, n2 = ndimage.label(out)
    keep = np.ones(n2 + 1, dtype=bool)
    for ci in range(1, n2 + 1):
        if rng.uniform() < spec.omission_rate:
            keep[ci] = False
    out = np.where(keep[relabeled], out, 0).astype(np.uint8)
    return Mask(out)


def gen_dataset(
    n: int,
    scene_spec: SceneSpec,
    corruption_spec: CorruptionSpec,
    out_dir: str,
    train_fraction: float = 0.7,
) -> DatasetManifest:
    """Write n image/ground-truth/coarse-label triples plus a manifest.

    Coarse labels are the manifest's label_path; the exact ground truth is
    written to a separate tree and referenced only by the gt_path extra
    field, keeping the oracle out of the training path.
    """
    for sub in ("images", "gt", "coarse"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    n_train = int(round(n * train_fraction))
    records = []
    for i in range(n):
        scene = SceneSpec(
            size=scene_spec.size,
            blob_count=scene_spec.blob_count,
            ribbon_count=scene_spec.ribbon_count,
            speckle=scene_spec.speckle,
            contrast=scene_spec.contrast,
            seed=int(np.random.default_rng([scene_spec.seed, i]).integers(0, 2**63)),
        )
        img, gt = gen_scene(scene)
        corr = CorruptionSpec(
            tolerance=corruption_spec.tolerance,
            radius_range=corruption_spec.radius_range,
            fp_rate=corruption_spec.fp_rate,
            omission_rate=corruption_spec.omission_rate,
            seed=int(np.random.default_rng([corruption_spec.seed, i, 1]).integers(0, 2**63)),
        )
        coarse = corrupt_label(gt, corr)
        name = f"scene_{i:03d}.png"
        ip = os.path.join(out_dir, "images", name)
        gp = os.path.join(out_dir, "gt", name)
        cp = os.path.join(out_dir, "coarse", name)
        save_image(img, ip)
        save_mask(gt, gp)
        save_mask(coarse, cp)
        records.append(
            ManifestRecord(
                image_path=ip,
                split="train" if i < n_train else "test",
                label_path=cp,
                provenance="coarse",
                extra={"gt_path": gp},
            )
        )
    man = DatasetManifest(records)
    from .manifest import write_manifest

    write_manifest(man, os.path.join(out_dir, "manifest.jsonl"))
    return man


# -- reference network --------------------------------------------------------------


@dataclass(frozen=True)
class RefNetConfig:
    channels: int = 16
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 0.01
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "channels": self.channels,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RefNetConfig":
        return cls(**obj)


def _refnet_forward(x: T.Tensor, store: ParamStore) -> T.Tensor:
    h = T.relu(T.conv2d(x, store["c1.w"], bias=store["c1.b"], padding=1))
    h = T.relu(T.conv2d(h, store["c2.w"], bias=store["c2.b"], padding=1))
    return T.conv2d(h, store["c3.w"], bias=store["c3.b"], padding=0)


def train_refnet(pairs: list[tuple[GrayImage, Mask]], cfg: RefNetConfig) -> ParamStore:
    """Train the 3-layer reference net from scratch with plain BCE."""
    if not pairs:
        raise ValueError("no training pairs for the reference network")
    rng = np.random.default_rng(cfg.seed)
    c = cfg.channels
    store = ParamStore()
    store.add("c1.w", (rng.standard_normal((c, 1, 3, 3)) * np.sqrt(2.0 / 9)).astype(np.float32))
    store.add("c1.b", np.zeros(c, dtype=np.float32))
    store.add("c2.w", (rng.standard_normal((c, c, 3, 3)) * np.sqrt(2.0 / (c * 9))).astype(np.float32))
    store.add("c2.b", np.zeros(c, dtype=np.float32))
    store.add("c3.w", (rng.standard_normal((1, c, 1, 1)) * np.sqrt(2.0 / c)).astype(np.float32))
    store.add("c3.b", np.zeros(1, dtype=np.float32))

    imgs = np.stack([p[0].values for p in pairs])[:, None]
    labs = np.stack([p[1].bits.astype(np.float32) for p in pairs])[:, None]
    n = imgs.shape[0]
    state = AdamState()
    eps = 1e-7
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x = T.Tensor(imgs[idx])
            g = T.Tensor(labs[idx])
            one = T.Tensor(np.ones_like(labs[idx]))
            logits = _refnet_forward(x, store)
            p = T.clip(T.sigmoid(logits), eps, 1 - eps)
            bce = T.neg(T.add(T.mul(g, T.log(p)), T.mul(T.sub(one, g), T.log(T.sub(one, p)))))
            loss = T.tmean(bce)
            store.zero_grads()
            T.backward(loss)
            adam_step(store, state, lr=cfg.learning_rate)
    return store


def predict_refnet(img: GrayImage, store: ParamStore, threshold: float = 0.5) -> Mask:
    x = T.Tensor(img.values[None, None])
    with T.no_grad():
        logits = _refnet_forward(x, store)
        probs = T.sigmoid(logits)
    return Mask((probs.data[0, 0] > threshold).astype(np.uint8))


# -- evaluation protocol ---------------------------------------------------------------


@dataclass
class ProtocolReport:
    rows: list[dict] = field(default_factory=list)

    def row(self, test_set: str) -> dict:
        for r in self.rows:
            if r["test_set"] == test_set:
                return r
        raise KeyError(test_set)

    def to_json(self) -> list[dict]:
        return self.rows


def eval_manifest_pair(preds: dict[str, Mask], labels: DatasetManifest) -> tuple[float, float]:
    """Mean mIoU and accuracy of per-image predictions against a label set."""
    mious, accs = [], []
    for rec in labels:
        if rec.label_path is None:
            raise ValueError(f"record {rec.image_path} has no label")
        lab = load_mask(rec.label_path)
        pred = preds[rec.image_path]
        mious.append(miou(pred, lab))
        accs.append(accuracy(confusion(pred, lab)))
    return float(np.mean(mious)), float(np.mean(accs))


def eval_protocol(
    train_manifest: DatasetManifest,
    test_hq: DatasetManifest,
    test_orig: DatasetManifest,
    test_enh: DatasetManifest,
    refnet_cfg: RefNetConfig,
) -> ProtocolReport:
    """Train the reference net on the training labels, score it against the
    three versions of the test labels, and report each set's delta from HQ."""
    cover = [sorted(r.image_path for r in m) for m in (test_hq, test_orig, test_enh)]
    if not (cover[0] == cover[1] == cover[2]):
        raise ValueError("test label sets must cover the same images")
    pairs = [
        (load_image(r.image_path), load_mask(r.label_path))
        for r in train_manifest
        if r.label_path is not None and r.split == "train"
    ]
    store = train_refnet(pairs, refnet_cfg)
    preds = {r.image_path: predict_refnet(load_image(r.image_path), store) for r in test_hq}

    report = ProtocolReport()
    hq_miou, hq_acc = eval_manifest_pair(preds, test_hq)
    report.rows.append({"test_set": "hq", "miou": hq_miou, "acc": hq_acc, "delta_miou": 0.0, "delta_acc": 0.0})
    for name, man in (("orig", test_orig), ("enh", test_enh)):
        m, a = eval_manifest_pair(preds, man)
        report.rows.append(
            {"test_set": name, "miou": m, "acc": a, "delta_miou": hq_miou - m, "delta_acc": hq_acc - a}
        )
    return report


def eam_ablation(
    manifest: DatasetManifest,
    backbone,
    tcfg,
    lcfg,
    mcfg,
    hq_from_extra: str = "gt_path",
) -> dict:
    """Fine-tune once with the edge attention gate and once without, then
    score both variants' test-split predictions against the high-quality
    labels. The direction of the difference is reported, not asserted."""
    from dataclasses import replace

    from .network import predict
    from .training import finetune

    train_recs = manifest.subset(lambda r: r.split == "train" and r.label_path is not None)
    test_recs = [r for r in manifest if r.split == "test"]
    if not test_recs:
        raise ValueError("ablation needs a test split")

    report: dict = {}
    preds_by_variant: dict[str, dict[str, Mask]] = {}
    for key, enabled in (("with_eam", True), ("without_eam", False)):
        vcfg = replace(mcfg, eam_enabled=enabled)
        result = finetune(train_recs, backbone, tcfg, lcfg, vcfg)
        per, preds = [], {}
        for rec in test_recs:
            pred = predict(load_image(rec.image_path), result.store, vcfg)
            hq = load_mask(rec.extra.get(hq_from_extra) or rec.label_path)
            per.append(
                {
                    "image": os.path.basename(rec.image_path),
                    "miou": miou(pred, hq),
                    "acc": accuracy(confusion(pred, hq)),
                }
            )
            preds[rec.image_path] = pred
        preds_by_variant[key] = preds
        report[key] = {
            "miou": float(np.mean([r["miou"] for r in per])),
            "acc": float(np.mean([r["acc"] for r in per])),
            "per_image": per,
        }
    report["predictions_differ"] = bool(
        any(
            (preds_by_variant["with_eam"][k].bits != preds_by_variant["without_eam"][k].bits).any()
            for k in preds_by_variant["with_eam"]
        )
    )
    report["miou_delta"] = report["with_eam"]["miou"] - report["without_eam"]["miou"]
    report["acc_delta"] = report["with_eam"]["acc"] - report["without_eam"]["acc"]
    return report
