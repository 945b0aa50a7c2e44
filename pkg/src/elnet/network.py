"""Segmentation network: frozen hierarchical encoder with per-stage adapters,
receptive field blocks projecting every stage to 64 channels, and a U-Net
style decoder with an edge attention gate after each upsampling step.

Only the adapters, RFBs, decoder, EAM gates, and heads train; the four
backbone stages are frozen after pretraining, and their batch-norm layers
always run in eval mode outside of pretraining so the frozen tensors stay
bit-identical through any amount of fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .masks import GrayImage, Mask

__all__ = [
    "ModelConfig",
    "ParamStore",
    "init_model",
    "adapter_forward",
    "rfb_forward",
    "eam_forward",
    "encoder_forward",
    "decoder_forward",
    "model_forward",
    "predict",
    "RFB_BRANCH",
]

RFB_BRANCH = 32  # channels per dilated branch; 3 branches concat to 96
RFB_DILATIONS = (1, 3, 5)
N_STAGES = 4


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    adapter_bottleneck: int = 8
    rfb_out: int = 64
    adapter_residual: bool = True
    eam_enabled: bool = True

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if len(self.stage_channels) != N_STAGES or any(c < 1 for c in self.stage_channels):
            raise ValueError(f"stage_channels must be {N_STAGES} positive ints")
        if self.rfb_out != 64:
            raise ValueError("rfb_out is fixed at 64")
        if self.adapter_bottleneck < 1:
            raise ValueError("adapter_bottleneck must be positive")
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))

    def to_json(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "stage_channels": list(self.stage_channels),
            "adapter_bottleneck": self.adapter_bottleneck,
            "rfb_out": self.rfb_out,
            "adapter_residual": self.adapter_residual,
            "eam_enabled": self.eam_enabled,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        kw = dict(obj)
        if "stage_channels" in kw:
            kw["stage_channels"] = tuple(kw["stage_channels"])
        return cls(**kw)


class ParamStore:
    """Named tensors partitioned into a frozen set and its trainable complement."""

    def __init__(self):
        self.tensors: dict[str, T.Tensor] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, data: np.ndarray, requires_grad: bool = True) -> T.Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = T.Tensor(data, requires_grad=requires_grad)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> T.Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if n not in self.frozen and self.tensors[n].requires_grad]

    def freeze_prefix(self, prefix: str) -> None:
        hit = False
        for name, t in self.tensors.items():
            if name.startswith(prefix):
                self.frozen.add(name)
                t.requires_grad = False
                hit = True
        if not hit:
            raise ValueError(f"no parameters under prefix {prefix!r}")

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def clone_data(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _add_bn(store: ParamStore, prefix: str, c: int, dtype) -> None:
    store.add(f"{prefix}.gamma", np.ones(c, dtype=dtype))
    store.add(f"{prefix}.beta", np.zeros(c, dtype=dtype))
    store.add(f"{prefix}.running_mean", np.zeros(c, dtype=dtype), requires_grad=False)
    store.add(f"{prefix}.running_var", np.ones(c, dtype=dtype), requires_grad=False)


def init_model(cfg: ModelConfig, seed: int, dtype=np.float32, parts=("backbone", "adapter", "rfb", "decoder", "head")) -> ParamStore:
    """Seeded initialization of every requested part; nothing frozen yet.

    Adapters start as exact identities (zero up-projection in residual mode),
    so an untrained adapter leaves pretrained features untouched.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    chans = cfg.stage_channels

    if "backbone" in parts:
        prev = cfg.in_channels
        for k in range(1, N_STAGES + 1):
            c = chans[k - 1]
            p = f"backbone.stage{k}"
            store.add(f"{p}.conv1.w", _he(rng, (c, prev, 3, 3), prev * 9, dtype))
            _add_bn(store, f"{p}.bn1", c, dtype)
            store.add(f"{p}.conv2.w", _he(rng, (c, c, 3, 3), c * 9, dtype))
            _add_bn(store, f"{p}.bn2", c, dtype)
            prev = c

    if "adapter" in parts:
        prev = cfg.in_channels
        b = cfg.adapter_bottleneck
        for k in range(1, N_STAGES + 1):
            p = f"adapter.stage{k}"
            store.add(f"{p}.w_down", _he(rng, (b, prev), prev, dtype))
            store.add(f"{p}.b_down", np.zeros(b, dtype=dtype))
            store.add(f"{p}.w_up", np.zeros((prev, b), dtype=dtype))
            store.add(f"{p}.b_up", np.zeros(prev, dtype=dtype))
            prev = chans[k - 1]

    if "rfb" in parts:
        for k in range(1, N_STAGES + 1):
            c = chans[k - 1]
            p = f"rfb.stage{k}"
            for bi in range(1, 4):
                store.add(f"{p}.branch{bi}.w", _he(rng, (RFB_BRANCH, c, 3, 3), c * 9, dtype))
            store.add(f"{p}.proj.w", _he(rng, (cfg.rfb_out, 3 * RFB_BRANCH, 1, 1), 3 * RFB_BRANCH, dtype))

    if "decoder" in parts:
        r = cfg.rfb_out
        for k in range(1, 4):
            p = f"decoder.block{k}"
            if cfg.eam_enabled:
                store.add(f"{p}.eam.conv.w", _he(rng, (r, r, 3, 3), r * 9, dtype))
                _add_bn(store, f"{p}.eam.bn", r, dtype)
            store.add(f"{p}.conv1.w", _he(rng, (r, 2 * r, 3, 3), 2 * r * 9, dtype))
            _add_bn(store, f"{p}.bn1", r, dtype)
            store.add(f"{p}.conv2.w", _he(rng, (r, r, 3, 3), r * 9, dtype))
            _add_bn(store, f"{p}.bn2", r, dtype)

    if "head" in parts:
        for k in range(1, 4):
            store.add(f"head{k}.w", _he(rng, (1, cfg.rfb_out, 1, 1), cfg.rfb_out, dtype))
            store.add(f"head{k}.b", np.zeros(1, dtype=dtype))

    return store


def adapter_forward(x: T.Tensor, store: ParamStore, prefix: str, residual: bool = True) -> T.Tensor:
    """Per-position bottleneck: GeLU(W_up @ GeLU(W_down @ x)), optionally added back."""
    w_down, b_down = store[f"{prefix}.w_down"], store[f"{prefix}.b_down"]
    w_up, b_up = store[f"{prefix}.w_up"], store[f"{prefix}.b_up"]
    if w_down.shape[1] != x.shape[1]:
        raise ValueError(f"adapter {prefix} expects {w_down.shape[1]} channels, got {x.shape[1]}")
    xc = T.permute(x, (0, 2, 3, 1))
    h = T.gelu(T.linear(xc, w_down, b_down))
    a = T.gelu(T.linear(h, w_up, b_up))
    a = T.permute(a, (0, 3, 1, 2))
    return T.add(x, a) if residual else a


def rfb_forward(x: T.Tensor, store: ParamStore, prefix: str) -> T.Tensor:
    """Three dilated 3x3 branches, concatenated, projected to 64, ReLU."""
    branches = []
    for bi, d in zip((1, 2, 3), RFB_DILATIONS):
        w = store[f"{prefix}.branch{bi}.w"]
        branches.append(T.conv2d(x, w, padding=d, dilation=d))
    cat = T.concat(branches, axis=1)
    return T.relu(T.conv2d(cat, store[f"{prefix}.proj.w"], padding=0))


def eam_forward(
    x: T.Tensor, store: ParamStore, prefix: str, bn_train: bool = False
) -> tuple[T.Tensor, T.Tensor]:
    """Sigmoid gate from conv3x3 + batch norm, multiplied into the features."""
    w = store[f"{prefix}.conv.w"]
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"EAM {prefix} expects {w.shape[1]} channels, got {x.shape[1]}")
    pre = T.conv2d(x, w, padding=1)
    normed = T.batchnorm2d(
        pre,
        store[f"{prefix}.bn.gamma"],
        store[f"{prefix}.bn.beta"],
        store[f"{prefix}.bn.running_mean"],
        store[f"{prefix}.bn.running_var"],
        training=bn_train,
    )
    a_e = T.sigmoid(normed)
    return T.mul(x, a_e), a_e


def _conv_bn_relu(x: T.Tensor, store: ParamStore, conv: str, bn: str, bn_train: bool) -> T.Tensor:
    y = T.conv2d(x, store[f"{conv}.w"], padding=1)
    y = T.batchnorm2d(
        y,
        store[f"{bn}.gamma"],
        store[f"{bn}.beta"],
        store[f"{bn}.running_mean"],
        store[f"{bn}.running_var"],
        training=bn_train,
    )
    return T.relu(y)


def encoder_forward(
    img: T.Tensor,
    store: ParamStore,
    cfg: ModelConfig,
    bn_train: bool = False,
    use_adapters: bool = True,
) -> list[T.Tensor]:
    """Four stages, each: adapter, two conv-bn-relu layers, 2x downsample.

    Backbone batch norms run in train mode only during backbone pretraining
    (bn_train=True); fine-tuning keeps them in eval mode so frozen buffers
    never move.
    """
    n, c, h, w = img.shape
    if h % 16 or w % 16:
        raise ValueError(f"input size must be divisible by 16, got {h}x{w}")
    if c != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {c}")
    feats = []
    x = img
    for k in range(1, N_STAGES + 1):
        if use_adapters:
            x = adapter_forward(x, store, f"adapter.stage{k}", residual=cfg.adapter_residual)
        p = f"backbone.stage{k}"
        x = _conv_bn_relu(x, store, f"{p}.conv1", f"{p}.bn1", bn_train)
        x = _conv_bn_relu(x, store, f"{p}.conv2", f"{p}.bn2", bn_train)
        x = T.avgpool2x2(x)
        feats.append(x)
    return feats


def decoder_forward(
    rfbs: list[T.Tensor], store: ParamStore, cfg: ModelConfig, bn_train: bool = False
) -> list[T.Tensor]:
    """From the deepest RFB feature up through three blocks; returns [S1,S2,S3]
    logit maps, each upsampled to the full input resolution (S3 finest)."""
    r1, r2, r3, r4 = rfbs
    skips = (r3, r2, r1)
    outputs = []
    x = r4
    for k in range(1, 4):
        p = f"decoder.block{k}"
        x = T.upsample2x_nearest(x)
        if cfg.eam_enabled:
            x, _ = eam_forward(x, store, f"{p}.eam", bn_train=bn_train)
        skip = skips[k - 1]
        if skip.shape[2:] != x.shape[2:]:
            raise ValueError(f"skip shape {skip.shape} does not match decoder {x.shape}")
        x = T.concat([x, skip], axis=1)
        x = _conv_bn_relu(x, store, f"{p}.conv1", f"{p}.bn1", bn_train)
        x = _conv_bn_relu(x, store, f"{p}.conv2", f"{p}.bn2", bn_train)
        logits = T.conv2d(x, store[f"head{k}.w"], bias=store[f"head{k}.b"], padding=0)
        for _ in range(4 - k):  # block k sits at H / 2^(4-k)
            logits = T.upsample2x_nearest(logits)
        outputs.append(logits)
    return outputs


def model_forward(
    img: T.Tensor, store: ParamStore, cfg: ModelConfig, decoder_bn_train: bool = False
) -> list[T.Tensor]:
    feats = encoder_forward(img, store, cfg, bn_train=False)
    rfbs = [rfb_forward(f, store, f"rfb.stage{k}") for k, f in enumerate(feats, start=1)]
    return decoder_forward(rfbs, store, cfg, bn_train=decoder_bn_train)


def predict(img: GrayImage, store: ParamStore, cfg: ModelConfig, threshold: float = 0.5) -> Mask:
    """Binarize the finest head: sigmoid(S3) strictly above threshold is foreground."""
    x = T.Tensor(img.values[None, None, :, :].astype(np.float32))
    with T.no_grad():
        outputs = model_forward(x, store, cfg, decoder_bn_train=False)
        probs = T.sigmoid(outputs[2])
    return Mask((probs.data[0, 0] > threshold).astype(np.uint8))
