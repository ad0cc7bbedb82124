from dataclasses import asdict, replace

import numpy as np
import pytest

from ugtst.synthdata import (INTENSITY_FIELDS, DomainSpec, _case_geometry, default_shift_pair,
                             ellipse_mask, generate, render_slice, slice_profile)
from conftest import TINY


def test_small_spec_counts(tmp_path):
    spec = replace(TINY, num_cases=2, slices_per_case=4)
    m = generate(spec, tmp_path)
    assert len(m) == 8 and all(s.has_label for s in m.slices)
    assert (tmp_path / "spec.json").exists() and (tmp_path / "manifest.json").exists()
    img = m.slices[0].load_image()
    assert img.dtype == np.float32 and img.min() >= 0 and img.max() <= 1


def test_generation_byte_identical(tmp_path):
    generate(TINY, tmp_path / "a")
    generate(TINY, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        if f.name == "manifest.json":
            continue
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_two_levels_without_noise():
    spec = replace(TINY, noise_sigma=0.0, bias_field_strength=0.0, gamma=1.0)
    geom = _case_geometry(spec, np.random.default_rng(0))
    img, lab = render_slice(spec, geom, 0.3, np.random.default_rng(1), normalize=False)
    assert len(np.unique(img)) == 2 and lab.any() and not lab.all()


def test_label_exactness():
    geom = _case_geometry(TINY, np.random.default_rng(3))
    cy, cx, ry, rx, _ = geom
    t = slice_profile(0, 4)
    _, lab = render_slice(TINY, geom, t, np.random.default_rng(0))
    s = np.sqrt(1 - 0.85 * t * t)
    for (y, x), v in np.ndenumerate(lab):
        inside = ((y - cy) / (ry * s)) ** 2 + ((x - cx) / (rx * s)) ** 2 <= 1
        assert bool(v) == inside


def test_end_slices_smaller():
    full = ellipse_mask((32, 32), 15.5, 15.5, 8, 8)
    geom = (15.5, 15.5, 8.0, 8.0, np.zeros(3))
    _, end = render_slice(DomainSpec(), geom, slice_profile(0, 8), np.random.default_rng(0))
    _, mid = render_slice(DomainSpec(), geom, slice_profile(3, 8), np.random.default_rng(0))
    assert end.sum() < mid.sum() <= full.sum()
    assert not (mid & ~full).any()


def test_invalid_specs():
    with pytest.raises(ValueError):
        DomainSpec(fg_mean=0.5, bg_mean=0.5)
    with pytest.raises(ValueError):
        DomainSpec(image_size=(16, 16))


def test_shift_pair_fields():
    src, tgt = default_shift_pair(seed=4)
    a, b = asdict(src), asdict(tgt)
    changed = {k for k in a if a[k] != b[k]}
    assert changed == set(INTENSITY_FIELDS)
    assert tgt.gamma == pytest.approx(0.6) and tgt.noise_sigma == pytest.approx(2 * src.noise_sigma)
    assert tgt.fg_mean - tgt.bg_mean == pytest.approx(0.5 * (src.fg_mean - src.bg_mean))
    s0, t0 = default_shift_pair(seed=4, magnitude=0.0)
    assert s0 == t0


def _contrast(m):
    fg, bg = [], []
    for s in m.slices:
        img, lab = s.load_image(), m.load_label(s.id).astype(bool)
        fg.append(img[lab].mean())
        bg.append(img[~lab].mean())
    return np.mean(fg) - np.mean(bg)


def test_target_contrast_lower(tiny_pair):
    source, target = tiny_pair
    assert _contrast(target) < _contrast(source)
