"""Invertible spatial transforms, intensity perturbations and the
test-time-augmentation ensemble."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

SPATIAL_KINDS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")
INTENSITY_KINDS = ("identity", "gamma", "contrast", "gaussian_noise", "gaussian_blur")

_INVERSE = {
    "identity": "identity",
    "hflip": "hflip",
    "vflip": "vflip",
    "rot90": "rot270",
    "rot180": "rot180",
    "rot270": "rot90",
}


def inverse_spatial(kind: str) -> str:
    try:
        return _INVERSE[kind]
    except KeyError:
        raise ValueError(f"unknown spatial transform {kind!r}") from None


def apply_spatial(kind: str, x: np.ndarray) -> np.ndarray:
    """Apply an index-permuting transform to the last two axes of ``x``.

    ``rot90`` is a clockwise quarter turn: element (r, c) moves to (c, H-1-r).
    """
    x = np.asarray(x)
    if x.ndim not in (2, 3):
        raise ValueError(f"spatial transforms need a 2D or 3D array, got rank {x.ndim}")
    if kind == "identity":
        out = x
    elif kind == "hflip":
        out = x[..., ::-1]
    elif kind == "vflip":
        out = x[..., ::-1, :]
    elif kind == "rot90":
        out = np.rot90(x, k=-1, axes=(-2, -1))
    elif kind == "rot180":
        out = np.rot90(x, k=2, axes=(-2, -1))
    elif kind == "rot270":
        out = np.rot90(x, k=1, axes=(-2, -1))
    else:
        raise ValueError(f"unknown spatial transform {kind!r}")
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class IntensityTransform:
    kind: str = "identity"
    param: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.kind not in INTENSITY_KINDS:
            raise ValueError(f"unknown intensity transform {self.kind!r}")


def _gaussian_kernel3(sigma: float) -> np.ndarray:
    ax = np.array([-1.0, 0.0, 1.0])
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _blur3(x: np.ndarray, sigma: float) -> np.ndarray:
    k = _gaussian_kernel3(sigma)
    h, w = x.shape
    xp = np.pad(x, 1, mode="edge")
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            out += k[i, j] * xp[i:i + h, j:j + w]
    return out


def apply_intensity(t: IntensityTransform, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    v = x.astype(np.float64)
    if t.kind == "identity":
        out = v
    elif t.kind == "gamma":
        out = np.power(v, t.param)
    elif t.kind == "contrast":
        m = v.mean()
        out = m + t.param * (v - m)
    elif t.kind == "gaussian_noise":
        rng = np.random.default_rng(t.noise_seed)
        out = v + rng.normal(0.0, t.param, size=v.shape)
    else:
        out = _blur3(v, t.param)
    return np.clip(out, 0.0, 1.0).astype(x.dtype)


@dataclass(frozen=True)
class AugmentationConfig:
    k: int = 8
    gamma_range: tuple = (0.7, 1.5)
    contrast_range: tuple = (0.7, 1.3)
    noise_sigma_max: float = 0.05
    blur_sigma_range: tuple = (0.5, 1.0)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("aug.k must be >= 1")
        lo, hi = self.gamma_range
        if not 0.7 <= lo <= hi <= 1.5:
            raise ValueError(f"gamma range {self.gamma_range} outside [0.7, 1.5]")
        lo, hi = self.contrast_range
        if not 0.7 <= lo <= hi <= 1.3:
            raise ValueError(f"contrast range {self.contrast_range} outside [0.7, 1.3]")
        if not 0.0 <= self.noise_sigma_max <= 0.05:
            raise ValueError("noise sigma must lie in [0, 0.05]")
        lo, hi = self.blur_sigma_range
        if not 0.5 <= lo <= hi <= 1.0:
            raise ValueError(f"blur sigma range {self.blur_sigma_range} outside [0.5, 1.0]")


@dataclass(frozen=True)
class AugmentationPlan:
    """K sampled (intensity, spatial) pairs; a pure function of (K, seed)."""

    k: int
    seed: int
    pairs: tuple = field(default_factory=tuple)

    @classmethod
    def sample(cls, k: int, seed: int, config: AugmentationConfig = None) -> "AugmentationPlan":
        cfg = config or AugmentationConfig(k=k)
        rng = np.random.default_rng(seed)
        pairs = []
        for _ in range(k):
            spatial = SPATIAL_KINDS[rng.integers(len(SPATIAL_KINDS))]
            kind = INTENSITY_KINDS[rng.integers(len(INTENSITY_KINDS))]
            if kind == "gamma":
                param = rng.uniform(*cfg.gamma_range)
            elif kind == "contrast":
                param = rng.uniform(*cfg.contrast_range)
            elif kind == "gaussian_noise":
                param = rng.uniform(0.0, cfg.noise_sigma_max)
            elif kind == "gaussian_blur":
                param = rng.uniform(*cfg.blur_sigma_range)
            else:
                param = 0.0
            noise_seed = int(rng.integers(2 ** 63))
            pairs.append((IntensityTransform(kind, float(param), noise_seed), spatial))
        return cls(k, seed, tuple(pairs))

    @classmethod
    def identity(cls) -> "AugmentationPlan":
        return cls(1, 0, ((IntensityTransform(), "identity"),))


def slice_seed(seed: int, slice_id: str) -> int:
    """Per-slice seed: ``seed`` XOR a stable 64-bit hash of the slice id."""
    digest = hashlib.blake2b(slice_id.encode("utf-8"), digest_size=8).digest()
    return (int(seed) ^ int.from_bytes(digest, "little")) & (2 ** 64 - 1)


def plan_for_slice(config: AugmentationConfig, seed: int, slice_id: str) -> AugmentationPlan:
    return AugmentationPlan.sample(config.k, slice_seed(seed, slice_id), config)


def ensemble_predict(model, image: np.ndarray, plan: AugmentationPlan) -> np.ndarray:
    """Average of inverse-mapped model outputs over the plan's perturbations.

    ``model`` needs ``predict_proba`` mapping (N, H, W) to (N, C, H, W).
    Returns a float32 (C, H, W) probability field.
    """
    image = np.asarray(image)
    acc = None
    for intensity, spatial in plan.pairs:
        x = apply_intensity(intensity, apply_spatial(spatial, image))
        prob = model.predict_proba(x[None])[0]
        back = apply_spatial(inverse_spatial(spatial), prob)
        if acc is None:
            acc = back.astype(np.float64)
        elif back.shape != acc.shape:
            raise RuntimeError(f"inverse-mapped output shape {back.shape} != {acc.shape}")
        else:
            acc += back
    return (acc / plan.k).astype(np.float32)
