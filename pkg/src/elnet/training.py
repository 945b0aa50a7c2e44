"""Losses, Adam with frozen-set masking, fine-tuning and backbone pretraining
loops, and binary checkpoint serialization.

The segmentation loss is a convex mix of boundary-weighted IoU and BCE,
applied to all three supervision heads with normalized weights. Per-pixel
weights come from the ground truth alone (local mean deviation), so they are
constants w.r.t. the optimization.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from . import tensor as T
from .manifest import DatasetManifest
from .masks import GrayImage, Mask, load_image, load_mask
from .network import ModelConfig, ParamStore, init_model, model_forward, encoder_forward

__all__ = [
    "LossConfig",
    "TrainConfig",
    "Checkpoint",
    "AdamState",
    "boundary_weight",
    "wbce_loss",
    "wiou_loss",
    "combined_loss",
    "total_loss",
    "adam_step",
    "FinetuneResult",
    "finetune",
    "pretrain_backbone",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_to_store",
]

MAGIC = b"ELN1"


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    alpha: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    boundary_mu: float = 5.0
    boundary_window: int = 15
    prob_clip: float = 1e-7

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"lam must be in [0,1], got {self.lam}")
        if len(self.alpha) != 3 or any(a < 0 for a in self.alpha):
            raise ValueError(f"alpha must be 3 non-negative weights, got {self.alpha}")
        if abs(sum(self.alpha) - 1.0) > 1e-9:
            raise ValueError(f"alpha must sum to 1, got sum {sum(self.alpha)}")
        if self.boundary_window % 2 == 0 or self.boundary_window < 1:
            raise ValueError(f"boundary_window must be odd and positive, got {self.boundary_window}")
        if not (0.0 < self.prob_clip < 0.5):
            raise ValueError(f"prob_clip must be a small positive value, got {self.prob_clip}")
        object.__setattr__(self, "alpha", tuple(self.alpha))

    def to_json(self) -> dict:
        return {
            "lam": self.lam,
            "alpha": list(self.alpha),
            "boundary_mu": self.boundary_mu,
            "boundary_window": self.boundary_window,
            "prob_clip": self.prob_clip,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LossConfig":
        kw = dict(obj)
        if "alpha" in kw:
            kw["alpha"] = tuple(kw["alpha"])
        return cls(**kw)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 12
    learning_rate: float = 0.001
    weight_decay: float = 5e-4
    seed: int = 0
    checkpoint_epochs: tuple[int, ...] = ()

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay non-negative")
        eps = tuple(self.checkpoint_epochs) or (self.epochs,)
        if any(e < 1 or e > self.epochs for e in eps):
            raise ValueError(f"checkpoint_epochs must lie in [1, {self.epochs}], got {eps}")
        object.__setattr__(self, "checkpoint_epochs", tuple(sorted(set(eps))))

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "checkpoint_epochs": list(self.checkpoint_epochs),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        kw = dict(obj)
        if "checkpoint_epochs" in kw:
            kw["checkpoint_epochs"] = tuple(kw["checkpoint_epochs"])
        return cls(**kw)


# -- losses ------------------------------------------------------------------


def boundary_weight(g: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Per-pixel weights 1 + mu * |local_mean(g) - g|, emphasizing boundaries.

    g is an [N,1,H,W] (or [H,W]) float array of {0,1} labels; the local mean
    uses a square window with edge replication. Constant labels give weight 1
    everywhere; the largest weights sit on label boundaries.
    """
    if cfg.boundary_window % 2 == 0:
        raise ValueError("boundary_window must be odd")
    g = np.asarray(g, dtype=np.float32)
    if g.ndim == 2:
        local = uniform_filter(g, size=cfg.boundary_window, mode="nearest")
    elif g.ndim == 4:
        local = np.stack(
            [uniform_filter(g[i, 0], size=cfg.boundary_window, mode="nearest") for i in range(g.shape[0])]
        )[:, None]
    else:
        raise ValueError(f"expected [H,W] or [N,1,H,W] labels, got shape {g.shape}")
    return 1.0 + cfg.boundary_mu * np.abs(local - g)


def _probs(pred_logits: T.Tensor, eps: float) -> T.Tensor:
    return T.clip(T.sigmoid(pred_logits), eps, 1.0 - eps)


def wbce_loss(pred_logits: T.Tensor, g: np.ndarray, omega: np.ndarray, cfg: LossConfig) -> T.Tensor:
    g = np.asarray(g, dtype=pred_logits.data.dtype)
    if g.shape != pred_logits.shape:
        raise ValueError(f"label shape {g.shape} vs logits {pred_logits.shape}")
    w = T.Tensor(np.asarray(omega, dtype=pred_logits.data.dtype))
    gt = T.Tensor(g)
    one = T.Tensor(np.ones_like(g))
    p = _probs(pred_logits, cfg.prob_clip)
    bce = T.neg(T.add(T.mul(gt, T.log(p)), T.mul(T.sub(one, gt), T.log(T.sub(one, p)))))
    return T.div(T.tsum(T.mul(w, bce)), T.tsum(w))


def wiou_loss(pred_logits: T.Tensor, g: np.ndarray, omega: np.ndarray, eps: float = 1e-7) -> T.Tensor:
    g = np.asarray(g, dtype=pred_logits.data.dtype)
    if g.shape != pred_logits.shape:
        raise ValueError(f"label shape {g.shape} vs logits {pred_logits.shape}")
    w = T.Tensor(np.asarray(omega, dtype=pred_logits.data.dtype))
    gt = T.Tensor(g)
    p = _probs(pred_logits, eps)
    inter = T.tsum(T.mul(w, T.mul(p, gt)))
    union = T.tsum(T.mul(w, T.sub(T.add(p, gt), T.mul(p, gt))))
    return T.sub(T.Tensor(np.ones((), dtype=pred_logits.data.dtype)), T.div(inter, union))


def combined_loss(pred_logits: T.Tensor, g: np.ndarray, cfg: LossConfig, omega: np.ndarray | None = None) -> T.Tensor:
    if omega is None:
        omega = boundary_weight(np.asarray(g), cfg)
    lam = cfg.lam
    iou_term = wiou_loss(pred_logits, g, omega, eps=cfg.prob_clip)
    bce_term = wbce_loss(pred_logits, g, omega, cfg)
    dt = pred_logits.data.dtype
    return T.add(
        T.mul(T.Tensor(np.asarray(lam, dtype=dt)), iou_term),
        T.mul(T.Tensor(np.asarray(1.0 - lam, dtype=dt)), bce_term),
    )


def total_loss(outputs: list[T.Tensor], g: np.ndarray, cfg: LossConfig) -> T.Tensor:
    """Deep supervision: alpha-weighted sum of the combined loss over all heads."""
    if len(outputs) != 3:
        raise ValueError(f"expected 3 supervision outputs, got {len(outputs)}")
    omega = boundary_weight(np.asarray(g), cfg)
    dt = outputs[0].data.dtype
    acc = None
    for a, s in zip(cfg.alpha, outputs):
        term = T.mul(T.Tensor(np.asarray(a, dtype=dt)), combined_loss(s, g, cfg, omega=omega))
        acc = term if acc is None else T.add(acc, term)
    return acc


# -- optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    store: ParamStore,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One Adam update over the trainable partition; frozen tensors untouched.

    Weight decay is L2-coupled: added to the gradient before the moment
    updates. Raises if a trainable tensor is missing its gradient.
    """
    b1, b2 = betas
    state.t += 1
    t = state.t
    for name in store.trainable_names():
        p = store.tensors[name]
        if p.grad is None:
            raise ValueError(f"trainable parameter {name!r} has no gradient")
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data[...] = p.data - lr * mhat / (np.sqrt(vhat) + eps)


# -- checkpoints --------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    requires_grad: dict[str, bool]
    frozen: list[str]
    epoch: int = 0
    rng_state: dict | None = None

    @classmethod
    def from_store(cls, store: ParamStore, cfg: ModelConfig, epoch: int = 0, rng_state: dict | None = None) -> "Checkpoint":
        return cls(
            model_config=cfg,
            tensors={n: t.data.copy() for n, t in store.tensors.items()},
            requires_grad={n: t.requires_grad for n, t in store.tensors.items()},
            frozen=sorted(store.frozen),
            epoch=epoch,
            rng_state=rng_state,
        )


def checkpoint_to_store(ckpt: Checkpoint, expect_config: ModelConfig | None = None) -> ParamStore:
    """Materialize a store from a checkpoint, restoring the frozen partition."""
    if expect_config is not None and expect_config != ckpt.model_config:
        raise ValueError(
            f"checkpoint model config {ckpt.model_config.to_json()} does not match expected {expect_config.to_json()}"
        )
    store = ParamStore()
    for name in sorted(ckpt.tensors):
        store.add(name, ckpt.tensors[name].copy(), requires_grad=ckpt.requires_grad.get(name, True))
    for name in ckpt.frozen:
        if name not in store.tensors:
            raise ValueError(f"frozen name {name!r} missing from checkpoint body")
        store.frozen.add(name)
        store.tensors[name].requires_grad = False
    return store


_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    header = {
        "version": 1,
        "model_config": ckpt.model_config.to_json(),
        "epoch": ckpt.epoch,
        "frozen": sorted(ckpt.frozen),
        "rng_state": ckpt.rng_state,
        "tensor_count": len(ckpt.tensors),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        nb = name.encode("utf-8")
        code = _DTYPE_CODES[arr.dtype]
        flags = 1 if ckpt.requires_grad.get(name, True) else 0
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BBB", code, flags, arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:4] != MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}, expected {MAGIC!r} (version mismatch or not a checkpoint)")
    off = 4

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(raw):
            raise ValueError(f"truncated checkpoint file {path}")
        chunk = view[off : off + n]
        off += n
        return chunk

    (hlen,) = struct.unpack("<Q", take(8))
    header = json.loads(bytes(take(hlen)).decode("utf-8"))
    if header.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    tensors: dict[str, np.ndarray] = {}
    rgrad: dict[str, bool] = {}
    for _ in range(header["tensor_count"]):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        code, flags, rank = struct.unpack("<BBB", take(3))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        dt = _CODE_DTYPES[code]
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(count * dt.itemsize), dtype=dt).reshape(dims).copy()
        tensors[name] = arr
        rgrad[name] = bool(flags & 1)
    if off != len(raw):
        raise ValueError(f"trailing bytes in checkpoint file {path}")
    return Checkpoint(
        model_config=ModelConfig.from_json(header["model_config"]),
        tensors=tensors,
        requires_grad=rgrad,
        frozen=list(header["frozen"]),
        epoch=header["epoch"],
        rng_state=header.get("rng_state"),
    )


# -- data plumbing ---------------------------------------------------------------------


def _load_pairs(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Stack labeled records into [N,1,H,W] image and label arrays."""
    imgs, labs, paths = [], [], []
    for rec in manifest:
        if rec.label_path is None:
            continue
        img = load_image(rec.image_path)
        lab = load_mask(rec.label_path)
        if img.shape != lab.shape:
            raise ValueError(f"image/label shape mismatch for {rec.image_path}: {img.shape} vs {lab.shape}")
        imgs.append(img.values)
        labs.append(lab.bits.astype(np.float32))
        paths.append(rec.image_path)
    if not imgs:
        raise ValueError("no labeled records to train on")
    return np.stack(imgs)[:, None], np.stack(labs)[:, None], paths


@dataclass
class FinetuneResult:
    checkpoints: list[Checkpoint]
    store: ParamStore
    epoch_losses: list[float]
    log: list[dict]


def finetune(
    manifest: DatasetManifest,
    backbone_ckpt: Checkpoint | None,
    tcfg: TrainConfig,
    lcfg: LossConfig,
    mcfg: ModelConfig,
    init_from: Checkpoint | None = None,
    max_steps: int | None = None,
) -> FinetuneResult:
    """Train adapters, RFBs, decoder, EAM, and heads with a frozen backbone.

    Starts either from a backbone checkpoint (fresh everything else) or from
    a full-model checkpoint (warm start). Snapshots are taken at the
    configured checkpoint epochs; the final epoch always yields one.
    """
    if (h := _check_resolution(manifest)) % 16:
        raise ValueError(f"training resolution {h} not divisible by 16")
    imgs, labs, _ = _load_pairs(manifest)

    if init_from is not None:
        store = checkpoint_to_store(init_from, expect_config=mcfg)
        if not store.frozen:
            store.freeze_prefix("backbone.")
    else:
        if backbone_ckpt is None:
            raise ValueError("need a backbone checkpoint or a full-model warm start")
        store = init_model(mcfg, seed=tcfg.seed)
        _adopt_backbone(store, backbone_ckpt, mcfg)
        store.freeze_prefix("backbone.")

    rng = np.random.default_rng(tcfg.seed)
    state = AdamState()
    n = imgs.shape[0]
    checkpoints: list[Checkpoint] = []
    epoch_losses: list[float] = []
    log: list[dict] = []
    steps = 0
    snap_at = set(tcfg.checkpoint_epochs)

    for epoch in range(1, tcfg.epochs + 1):
        perm = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, tcfg.batch_size):
            idx = perm[start : start + tcfg.batch_size]
            x = T.Tensor(imgs[idx])
            outputs = model_forward(x, store, mcfg, decoder_bn_train=True)
            loss = total_loss(outputs, labs[idx], lcfg)
            store.zero_grads()
            T.backward(loss)
            adam_step(store, state, lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay)
            batch_losses.append(loss.item())
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        mean_loss = float(np.mean(batch_losses))
        epoch_losses.append(mean_loss)
        log.append({"epoch": epoch, "mean_loss": mean_loss, "lr": tcfg.learning_rate})
        if epoch in snap_at or (max_steps is not None and steps >= max_steps):
            checkpoints.append(
                Checkpoint.from_store(store, mcfg, epoch=epoch, rng_state=rng.bit_generator.state)
            )
        if max_steps is not None and steps >= max_steps:
            break
    if not checkpoints:
        checkpoints.append(Checkpoint.from_store(store, mcfg, epoch=tcfg.epochs, rng_state=rng.bit_generator.state))
    return FinetuneResult(checkpoints=checkpoints, store=store, epoch_losses=epoch_losses, log=log)


def _check_resolution(manifest: DatasetManifest) -> int:
    for rec in manifest:
        if rec.label_path is not None:
            return load_image(rec.image_path).height
    return 0


def _adopt_backbone(store: ParamStore, ckpt: Checkpoint, mcfg: ModelConfig) -> None:
    names = [n for n in ckpt.tensors if n.startswith("backbone.")]
    if not names:
        raise ValueError("checkpoint carries no backbone tensors")
    for name in names:
        if name not in store.tensors:
            raise ValueError(f"unexpected backbone tensor {name!r} for this model config")
        if store.tensors[name].shape != ckpt.tensors[name].shape:
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint {ckpt.tensors[name].shape} vs model {store.tensors[name].shape}"
            )
        store.tensors[name].data[...] = ckpt.tensors[name]


def pretrain_backbone(
    images: list[GrayImage],
    tcfg: TrainConfig,
    mcfg: ModelConfig,
    noise_sigma: float = 0.1,
) -> tuple[Checkpoint, list[float]]:
    """Denoising pretraining of the backbone alone.

    Each stage output feeds a throwaway 3x3 reconstruction head; the summed
    multi-scale MSE against the clean image trains all four stages. The
    emitted checkpoint contains only backbone tensors.
    """
    if not images:
        raise ValueError("empty pretraining corpus")
    store = init_model(mcfg, seed=tcfg.seed, parts=("backbone",))
    rng_init = np.random.default_rng(tcfg.seed + 1)
    for k, c in enumerate(mcfg.stage_channels, start=1):
        store.add(f"recon.stage{k}.w", (rng_init.standard_normal((1, c, 3, 3)) * np.sqrt(2.0 / (c * 9))).astype(np.float32))
        store.add(f"recon.stage{k}.b", np.zeros(1, dtype=np.float32))

    data = np.stack([im.values for im in images])[:, None]
    n = data.shape[0]
    rng = np.random.default_rng(tcfg.seed)
    state = AdamState()
    losses = []
    for epoch in range(1, tcfg.epochs + 1):
        perm = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, tcfg.batch_size):
            idx = perm[start : start + tcfg.batch_size]
            clean = data[idx]
            noisy = np.clip(clean + rng.normal(0, noise_sigma, size=clean.shape), 0.0, 1.0).astype(np.float32)
            feats = encoder_forward(T.Tensor(noisy), store, mcfg, bn_train=True, use_adapters=False)
            loss = None
            for k, f in enumerate(feats, start=1):
                rec = T.conv2d(f, store[f"recon.stage{k}.w"], bias=store[f"recon.stage{k}.b"], padding=1)
                for _ in range(k):
                    rec = T.upsample2x_nearest(rec)
                diff = T.sub(rec, T.Tensor(clean.astype(np.float32)))
                term = T.tmean(T.mul(diff, diff))
                loss = term if loss is None else T.add(loss, term)
            store.zero_grads()
            T.backward(loss)
            adam_step(store, state, lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay)
            batch_losses.append(loss.item())
        losses.append(float(np.mean(batch_losses)))
    backbone_only = Checkpoint(
        model_config=mcfg,
        tensors={n: t.data.copy() for n, t in store.tensors.items() if n.startswith("backbone.")},
        requires_grad={n: t.requires_grad for n, t in store.tensors.items() if n.startswith("backbone.")},
        frozen=[],
        epoch=tcfg.epochs,
        rng_state=rng.bit_generator.state,
    )
    return backbone_only, losses
