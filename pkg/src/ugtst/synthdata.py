"""Synthetic ellipsoid phantoms with a controllable intensity shift."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .tensorio import DatasetManifest, TargetSlice, write_manifest, write_tensor

INTENSITY_FIELDS = ("fg_mean", "bg_mean", "noise_sigma", "gamma", "bias_field_strength")


@dataclass(frozen=True)
class DomainSpec:
    num_cases: int = 8
    slices_per_case: int = 8
    image_size: tuple = (32, 32)
    center_jitter: float = 3.0
    radii_range: tuple = (6.0, 11.0)
    end_contrast: float = 0.6  # contrast lost at the first/last slice of a case
    fg_mean: float = 0.8
    bg_mean: float = 0.2
    noise_sigma: float = 0.04
    gamma: float = 1.0
    bias_field_strength: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.fg_mean == self.bg_mean:
            raise ValueError("fg_mean and bg_mean must differ")
        h, w = self.image_size
        reach = self.radii_range[1] + self.center_jitter
        if 2 * reach >= min(h, w):
            raise ValueError("ellipse radii plus jitter do not fit in the image")
        if self.num_cases < 1 or self.slices_per_case < 1:
            raise ValueError("need at least one case and one slice per case")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def _case_geometry(spec: DomainSpec, rng):
    h, w = spec.image_size
    cy = (h - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    cx = (w - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    ry, rx = rng.uniform(*spec.radii_range, size=2)
    # smooth multiplicative bias field: random tilt plus a saddle term
    coeffs = rng.uniform(-1.0, 1.0, size=3)
    return cy, cx, ry, rx, coeffs


def slice_profile(index: int, count: int) -> float:
    """Position in (-1, 1) of a slice along its case axis."""
    return (index + 0.5) / count * 2.0 - 1.0


def ellipse_mask(shape, cy, cx, ry, rx) -> np.ndarray:
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def render_slice(spec: DomainSpec, geometry, t: float, rng, normalize: bool = True):
    """Return (image float32, label uint8) for one slice at axis position ``t``."""
    h, w = spec.image_size
    cy, cx, ry, rx, coeffs = geometry
    scale = np.sqrt(max(0.0, 1.0 - 0.85 * t * t))
    label = ellipse_mask((h, w), cy, cx, ry * scale, rx * scale)
    contrast = 1.0 - spec.end_contrast * t * t
    level = spec.bg_mean + (spec.fg_mean - spec.bg_mean) * contrast * label
    yy, xx = np.mgrid[0:h, 0:w]
    u, v = yy / (h - 1) * 2 - 1, xx / (w - 1) * 2 - 1
    bias = 1.0 + spec.bias_field_strength * (coeffs[0] * u + coeffs[1] * v + coeffs[2] * u * v) / 3
    img = level * bias + rng.normal(0.0, spec.noise_sigma, size=(h, w))
    img = np.clip(img, 0.0, 1.0) ** spec.gamma
    if normalize:
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return img.astype(np.float32), label.astype(np.uint8)


def generate(spec: DomainSpec, out_dir, name: str = "domain", domain_tag: str = None):
    """Write images, labels, ``manifest.json`` and ``spec.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    slices = []
    for c in range(spec.num_cases):
        case_id = f"{name}_c{c:02d}"
        geometry = _case_geometry(spec, rng)
        for k in range(spec.slices_per_case):
            sid = f"{case_id}_s{k:02d}"
            img, lab = render_slice(spec, geometry, slice_profile(k, spec.slices_per_case), rng)
            ip, lp = out / "images" / f"{sid}.ugts", out / "labels" / f"{sid}.ugts"
            write_tensor(ip, img)
            write_tensor(lp, lab)
            slices.append(TargetSlice(sid, case_id, k, ip, lp))
    manifest = DatasetManifest(name, domain_tag or name, 2, tuple(slices), out)
    write_manifest(out / "manifest.json", manifest)
    (out / "spec.json").write_text(spec.to_json())
    return manifest


def default_shift_pair(seed: int = 0, magnitude: float = 1.0, base: DomainSpec = None):
    """Source spec and an intensity-shifted target spec sharing geometry and seed.

    At magnitude 1 the target has gamma 0.6, half the foreground/background gap,
    twice the noise and a stronger bias field.
    """
    src = replace(base or DomainSpec(), seed=seed)
    mid = 0.5 * (src.fg_mean + src.bg_mean)
    shrink = 0.5 * magnitude
    tgt = replace(
        src,
        fg_mean=src.fg_mean - (src.fg_mean - mid) * shrink,
        bg_mean=src.bg_mean - (src.bg_mean - mid) * shrink,
        noise_sigma=src.noise_sigma * (1.0 + magnitude),
        gamma=src.gamma - 0.4 * magnitude,
        bias_field_strength=src.bias_field_strength + 0.3 * magnitude,
    )
    return src, tgt
