"""Input perturbations and the exact inverse alignment of predictions.

Three kinds: seeded Gaussian noise, horizontal flip, and rotation by
multiples of 90 degrees (counter-clockwise). Spatial perturbations have
exact mask-level inverses, so a prediction made on a perturbed image maps
back to the original frame bit-exactly; noise needs no alignment at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masks import GrayImage, Mask

__all__ = ["PerturbSpec", "apply_image", "transform_mask", "align_prediction", "make_ensemble_specs"]

KINDS = ("gauss_noise", "hflip", "rot90")
DEFAULT_SIGMA = 0.05


@dataclass(frozen=True)
class PerturbSpec:
    kind: str
    seed: int = 0
    sigma: float | None = None
    k: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "gauss_noise":
            sigma = DEFAULT_SIGMA if self.sigma is None else self.sigma
            if sigma <= 0:
                raise ValueError(f"sigma must be positive, got {sigma}")
            object.__setattr__(self, "sigma", float(sigma))
        elif self.sigma is not None:
            raise ValueError(f"sigma only applies to gauss_noise, not {self.kind}")
        if self.kind == "rot90":
            if self.k not in (1, 2, 3):
                raise ValueError(f"k must be 1, 2, or 3, got {self.k}")
        elif self.k is not None:
            raise ValueError(f"k only applies to rot90, not {self.kind}")

    def to_json(self) -> dict:
        out = {"kind": self.kind, "seed": self.seed}
        if self.kind == "gauss_noise":
            out["sigma"] = self.sigma
        elif self.kind == "rot90":
            out["k"] = self.k
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PerturbSpec":
        return cls(kind=obj["kind"], seed=obj.get("seed", 0), sigma=obj.get("sigma"), k=obj.get("k"))


def apply_image(img: GrayImage, spec: PerturbSpec) -> GrayImage:
    if spec.kind == "gauss_noise":
        noise = np.random.default_rng(spec.seed).normal(0.0, spec.sigma, size=img.shape)
        return GrayImage(np.clip(img.values + noise.astype(np.float32), 0.0, 1.0))
    if spec.kind == "hflip":
        return GrayImage(img.values[:, ::-1].copy())
    return GrayImage(np.rot90(img.values, k=spec.k).copy())


def transform_mask(mask: Mask, spec: PerturbSpec) -> Mask:
    """Apply the spatial part of a perturbation to a mask (noise is identity)."""
    if spec.kind == "gauss_noise":
        return mask
    if spec.kind == "hflip":
        return Mask(mask.bits[:, ::-1].copy())
    return Mask(np.rot90(mask.bits, k=spec.k).copy())


def align_prediction(pred: Mask, spec: PerturbSpec) -> Mask:
    """Map a prediction made in the perturbed frame back to the original one."""
    if spec.kind == "gauss_noise":
        return pred
    if spec.kind == "hflip":
        return Mask(pred.bits[:, ::-1].copy())
    return Mask(np.rot90(pred.bits, k=4 - spec.k).copy())


def make_ensemble_specs(seed: int) -> list[PerturbSpec]:
    """Derive one spec of each kind from a single seed, in a fixed order."""
    rng = np.random.default_rng(seed)
    noise_seed = int(rng.integers(0, 2**63))
    k = int(rng.integers(1, 4))
    return [
        PerturbSpec("gauss_noise", seed=noise_seed, sigma=DEFAULT_SIGMA),
        PerturbSpec("hflip", seed=seed),
        PerturbSpec("rot90", seed=seed, k=k),
    ]
