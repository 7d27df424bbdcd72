import sys

import numpy as np
import pytest

from hiercascade.backend import ClassifierSpec, LabelSpace, fit
from hiercascade.dataset import generate_synthetic, kfold_split
from hiercascade.routing import HierarchyEnsemble
from hiercascade.taxonomy import load_nw45, synthetic_taxonomy


@pytest.fixture(scope="session")
def nw45():
    return load_nw45()


@pytest.fixture
def small_tax():
    return synthetic_taxonomy([2, 3, 2])


def fit_ensemble(t, spec, train, val, with_flat=True):
    """First-level, per-branch and (optionally) flat models on one split."""
    parent = np.asarray(t.parent)
    tc, vc = parent[train.fine], parent[val.fine]
    first = fit(spec, train.X, tc, val.X, vc, LabelSpace.range(t.n_coarse, "coarse"))
    second = {}
    for c in range(t.n_coarse):
        mt, mv = tc == c, vc == c
        ls = LabelSpace("fine_within", tuple(t.fine_set(c)), c)
        second[c] = fit(spec, train.X[mt], train.fine[mt], val.X[mv], val.fine[mv], ls)
    flat = fit(spec, train.X, train.fine, val.X, val.fine, LabelSpace.range(t.n_fine)) if with_flat else None
    return HierarchyEnsemble(t, first, second, flat)


@pytest.fixture(scope="session")
def trained_small():
    """Softmax ensemble on moderately overlapping synthetic data."""
    t = synthetic_taxonomy([2, 3, 2])
    ds = generate_synthetic(t, 50, separation=4.0, overlap=2.0, seed=3)
    split = kfold_split(ds.fine, 5, 0.6, 0.2, 0.2, seed=3)[0]
    e = fit_ensemble(t, ClassifierSpec("softmax", seed=1), ds.subset(split.train), ds.subset(split.val))
    return t, e, ds.subset(split.test)


def write_image_toy(root, t, per_class=6, size=8, seed=0, spread=0.0):
    """PNG folders whose intensity band encodes the class, so labels survive rotation and flips.

    ``spread`` widens each band into its neighbours to make classes overlap.
    """
    from PIL import Image

    rng = np.random.default_rng(seed)
    bands = np.linspace(0.0, 1.0, t.n_fine + 1)
    for f in range(t.n_fine):
        d = root / t.fine[f].name
        d.mkdir(parents=True)
        for i in range(per_class):
            lo, hi = bands[f] - spread, bands[f + 1] + spread
            g = np.clip(rng.uniform(lo, hi, (size, size)), 0.0, 1.0)
            Image.fromarray((g * 255).round().astype(np.uint8), "L").save(d / f"{i:03d}.png")
    return root


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
