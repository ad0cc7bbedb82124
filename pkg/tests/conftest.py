import pytest

from ugtst.segmenter import Segmenter
from ugtst.synthdata import DomainSpec, default_shift_pair, generate

TINY = DomainSpec(num_cases=3, slices_per_case=4, image_size=(12, 12), center_jitter=1.0,
                  radii_range=(2.5, 4.0))

# small training budgets keep end-to-end tests fast
FAST = {"aug.k": 2, "source.epochs": 2, "stage1.epochs": 2, "stage2.epochs": 2,
        "stage1.batch_size": 4, "stage2.batch_size": 4, "select.budget_fraction": 0.1}


@pytest.fixture(scope="session")
def tiny_pair(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    src, tgt = default_shift_pair(seed=1, base=TINY)
    source = generate(src, root / "source", "source")
    target = generate(tgt, root / "target", "target")
    return source, target


@pytest.fixture(scope="session")
def tiny_model(tiny_pair):
    import numpy as np
    source, _ = tiny_pair
    X = np.stack([s.load_image() for s in source.slices])
    y = np.stack([source.load_label(s.id) for s in source.slices])
    return Segmenter(lr0=0.05, epochs=5, batch_size=4, seed=0).fit(X, y)
