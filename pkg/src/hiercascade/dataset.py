"""Sample generation, ingestion, augmentation, featurization and fold splitting.

Image grids are ``(H, W, C)`` float arrays with values in ``[0, 1]``. Featurized
samples live in a :class:`Dataset`, a thin wrapper over an ``(N, D)`` feature
matrix and an ``(N,)`` vector of fine label ids.
"""
from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .taxonomy import Taxonomy


class DataError(ValueError):
    """Raised for unreadable, malformed or inconsistent sample data."""


class _IOCounter:
    # Incremented on every file read so timing code can prove no I/O happened.
    def __init__(self) -> None:
        self._n = 0
        self._lock = threading.Lock()

    def bump(self, k: int = 1) -> None:
        with self._lock:
            self._n += k

    @property
    def value(self) -> int:
        return self._n


io_events = _IOCounter()


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    fine: int


@dataclass
class Dataset:
    X: np.ndarray | None
    fine: np.ndarray
    grids: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.fine = np.asarray(self.fine, dtype=np.int64)
        if self.X is not None:
            self.X = np.asarray(self.X, dtype=np.float64)
            if self.X.ndim != 2 or len(self.X) != len(self.fine):
                raise DataError("feature matrix must be (N, D) with N matching labels")
        if self.grids is not None and len(self.grids) != len(self.fine):
            raise DataError("grid count does not match label count")

    def __len__(self) -> int:
        return len(self.fine)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.X[i], int(self.fine[i]))

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def coarse(self, taxonomy: Taxonomy) -> np.ndarray:
        return np.asarray(taxonomy.parent, dtype=np.int64)[self.fine]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            None if self.X is None else self.X[idx],
            self.fine[idx],
            None if self.grids is None else self.grids[idx],
        )

    def check_labels(self, taxonomy: Taxonomy) -> None:
        if len(self.fine) and (self.fine.min() < 0 or self.fine.max() >= taxonomy.n_fine):
            raise DataError(f"fine label out of range 0..{taxonomy.n_fine - 1}")


# --------------------------------------------------------------------------
# synthetic data


def generate_synthetic(
    taxonomy: Taxonomy,
    per_class: int,
    separation: float,
    overlap: float,
    seed: int,
    dim: int | None = None,
    fine_radius: float = 8.0,
    noise: float = 1.0,
) -> Dataset:
    """Hierarchical isotropic Gaussian blobs.

    Coarse category ``c`` is centred at ``separation * e_c``. Fine class ``j``
    of that category sits at an extra offset ``fine_radius / (1 + overlap)``
    along axis ``C + j``, so raising ``overlap`` pulls sibling classes together
    while leaving the coarse layout alone. Samples are emitted class by class.
    """
    if per_class < 1:
        raise DataError("per_class must be positive")
    if not separation > 0:
        raise DataError("separation must be > 0")
    if overlap < 0:
        raise DataError("overlap must be >= 0")
    C = taxonomy.n_coarse
    widest = max(len(taxonomy.fine_set(c)) for c in range(C))
    need = C + widest
    dim = need if dim is None else dim
    if dim < need:
        raise DataError(f"dim must be at least {need} for this taxonomy")
    rng = np.random.default_rng(seed)
    radius = fine_radius / (1.0 + overlap)
    centers = np.zeros((taxonomy.n_fine, dim))
    for f in range(taxonomy.n_fine):
        c = taxonomy.coarse_of(f)
        centers[f, c] = separation
        centers[f, C + taxonomy.local_index(f)] = radius
    fine = np.repeat(np.arange(taxonomy.n_fine), per_class)
    X = centers[fine] + noise * rng.standard_normal((len(fine), dim))
    return Dataset(X, fine)


def generate_mixture(
    modes: Sequence[np.ndarray], per_class: int, noise: float, seed: int
) -> Dataset:
    """Class ``f`` draws around one of the rows of ``modes[f]`` (chosen uniformly)."""
    if per_class < 1 or noise < 0:
        raise DataError("per_class must be positive and noise non-negative")
    rng = np.random.default_rng(seed)
    modes = [np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in modes]
    dim = modes[0].shape[1]
    X = np.empty((len(modes) * per_class, dim))
    for f, m in enumerate(modes):
        pick = rng.integers(len(m), size=per_class)
        X[f * per_class:(f + 1) * per_class] = m[pick] + noise * rng.standard_normal((per_class, dim))
    return Dataset(X, np.repeat(np.arange(len(modes)), per_class))


def generate_xor(n_per_blob: int, seed: int, spread: float = 0.35) -> Dataset:
    """Two-class XOR layout: class 0 at (+1,+1),(-1,-1); class 1 at (+1,-1),(-1,+1)."""
    rng = np.random.default_rng(seed)
    corners = np.array([[1, 1], [-1, -1], [1, -1], [-1, 1]], dtype=float)
    labels = np.array([0, 0, 1, 1])
    X = np.repeat(corners, n_per_blob, axis=0) + spread * rng.standard_normal((4 * n_per_blob, 2))
    return Dataset(X, np.repeat(labels, n_per_blob))


# --------------------------------------------------------------------------
# fold splitting


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _whole(x: float, what: str, label: int) -> int:
    r = round(x)
    if abs(x - r) > 1e-9:
        raise DataError(f"{what} for class {label} is not a whole number ({x:g})")
    return int(r)


def kfold_split(
    labels: Sequence[int] | np.ndarray,
    k: int,
    train_frac: float,
    val_frac: float,
    test_frac: float,
    seed: int,
) -> list[FoldSplit]:
    """Stratified k-fold splits over sample indices.

    Each fine class is shuffled once; fold ``i`` tests on the ``i``-th block of
    ``test_frac * n`` indices. The other indices, taken in rotated order
    starting after the test block, give the validation block first and
    training indices after it.
    """
    if k < 2:
        raise DataError("k must be >= 2")
    fr = (train_frac, val_frac, test_frac)
    if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise DataError(f"fractions must be non-negative and sum to 1, got {fr}")
    if test_frac * k > 1 + 1e-9:
        raise DataError("test_frac * k exceeds 1; test blocks would overlap")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    parts: list[tuple[list, list, list]] = [([], [], []) for _ in range(k)]
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        n = len(idx)
        n_test = _whole(test_frac * n, "test count", int(lab))
        n_val = int(math.floor(val_frac * n + 1e-9))
        if n_test < 1 or n - n_test - n_val < 1:
            raise DataError(f"class {int(lab)} has too few samples ({n}) for {k} folds")
        perm = idx[rng.permutation(n)]
        for i in range(k):
            lo, hi = i * n_test, (i + 1) * n_test
            test = perm[lo:hi]
            rest = np.concatenate([perm[hi:], perm[:lo]])
            parts[i][0].append(rest[n_val:])
            parts[i][1].append(rest[:n_val])
            parts[i][2].append(test)
    return [
        FoldSplit(i, *(np.sort(np.concatenate(p)) for p in parts[i]))
        for i in range(k)
    ]


# --------------------------------------------------------------------------
# augmentation and featurization


def _check_grid(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g)
    if g.ndim == 2:
        g = g[:, :, None]
    if g.ndim != 3:
        raise DataError(f"grid must be (H, W) or (H, W, C), got shape {g.shape}")
    return g


def rot90(g: np.ndarray) -> np.ndarray:
    """Quarter turn clockwise: [[a, b], [c, d]] -> [[c, a], [d, b]]."""
    return np.rot90(g, k=-1, axes=(0, 1))


def rot180(g: np.ndarray) -> np.ndarray:
    return np.rot90(g, k=2, axes=(0, 1))


def rot270(g: np.ndarray) -> np.ndarray:
    return np.rot90(g, k=1, axes=(0, 1))


def hflip(g: np.ndarray) -> np.ndarray:
    return g[:, ::-1]


def vflip(g: np.ndarray) -> np.ndarray:
    return g[::-1]


def augment(g: np.ndarray) -> list[np.ndarray]:
    """Original, three clockwise rotations, then horizontal and vertical mirror."""
    g = np.asarray(g)
    if g.ndim not in (2, 3):
        raise DataError(f"grid must be 2-D or 3-D, got shape {g.shape}")
    if g.shape[0] != g.shape[1]:
        raise DataError(f"rotation augmentation needs a square grid, got {g.shape[:2]}")
    return [np.ascontiguousarray(v) for v in (g, rot90(g), rot180(g), rot270(g), hflip(g), vflip(g))]


def parse_mode(mode) -> tuple[str, int | None]:
    """Accept ``"flatten"``, ``"downsample:4"``, ``("histogram", 8)`` and similar."""
    if isinstance(mode, str):
        name, _, arg = mode.partition(":")
        param = int(arg) if arg else None
    else:
        name, param = mode[0], (int(mode[1]) if len(mode) > 1 else None)
    if name == "flatten":
        return name, None
    if name in ("downsample", "histogram"):
        if param is None or param < 1:
            raise DataError(f"{name} needs a positive integer parameter")
        return name, param
    raise DataError(f"unknown featurize mode {name!r}")


def featurize(g: np.ndarray, mode="flatten") -> np.ndarray:
    g = _check_grid(g).astype(np.float64)
    name, p = parse_mode(mode)
    H, W, C = g.shape
    if name == "flatten":
        return g.reshape(-1)
    if name == "downsample":
        if H % p or W % p:
            raise DataError(f"downsample({p}) needs sides divisible by {p}, grid is {H}x{W}")
        pooled = g.reshape(p, H // p, p, W // p, C).mean(axis=(1, 3))
        return pooled.reshape(-1)
    out = np.empty((C, p))
    for ch in range(C):
        counts, _ = np.histogram(g[:, :, ch], bins=p, range=(0.0, 1.0))
        out[ch] = counts / counts.sum()
    return out.reshape(-1)


def featurize_dataset(ds: Dataset, mode="flatten") -> Dataset:
    if ds.grids is None:
        raise DataError("dataset has no image grids to featurize")
    X = np.stack([featurize(g, mode) for g in ds.grids])
    return Dataset(X, ds.fine, ds.grids)


def augment_dataset(ds: Dataset) -> Dataset:
    """Expand every grid into its six variants; labels repeat accordingly."""
    if ds.grids is None:
        raise DataError("augmentation is defined on image grids only")
    grids = np.stack([v for g in ds.grids for v in augment(g)])
    return Dataset(None, np.repeat(ds.fine, 6), grids)


# --------------------------------------------------------------------------
# ingestion


def load_csv(path: str | Path, taxonomy: Taxonomy) -> Dataset:
    """Read ``f0,...,fD-1,label`` rows; labels are fine-class names."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    io_events.bump()
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1].strip() != "label":
            raise DataError(f"{path}: header must end with a 'label' column")
        D = len(header) - 1
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) - 1 != D:
                raise DataError(f"{path}: row {lineno} has {len(row) - 1} features, expected {D}")
            try:
                labels.append(taxonomy.fine_id(row[-1]))
            except KeyError:
                raise DataError(f"{path}: row {lineno}: unknown label {row[-1]!r}") from None
            try:
                rows.append([float(v) for v in row[:-1]])
            except ValueError:
                raise DataError(f"{path}: row {lineno}: non-numeric feature") from None
    if not rows:
        raise DataError(f"{path}: no samples")
    X = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: non-finite feature values")
    return Dataset(X, np.asarray(labels))


def save_csv(ds: Dataset, path: str | Path, taxonomy: Taxonomy) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(ds.dim)] + ["label"])
        for x, f in zip(ds.X, ds.fine):
            w.writerow([repr(float(v)) for v in x] + [taxonomy.fine[int(f)].name])


def load_image_dir(path: str | Path, taxonomy: Taxonomy) -> Dataset:
    """Read ``<fine-name>/*.png`` as grids normalized to ``[0, 1]``.

    Directories are visited in sorted order, files in sorted order within each.
    Grayscale files yield one channel, RGB three; all grids must share a shape.
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    grids, labels = [], []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            fid = taxonomy.fine_id(sub.name)
        except KeyError:
            raise DataError(f"directory {sub.name!r} does not name a fine label") from None
        for img_path in sorted(sub.glob("*.png")):
            io_events.bump()
            try:
                with Image.open(img_path) as im:
                    im = im.convert("L") if im.mode in ("L", "I", "1", "P", "LA") else im.convert("RGB")
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except (OSError, UnidentifiedImageError) as exc:
                raise DataError(f"unreadable image {img_path}: {exc}") from exc
            grids.append(_check_grid(arr))
            labels.append(fid)
    if not grids:
        raise DataError(f"{root}: no samples")
    shapes = {g.shape for g in grids}
    if len(shapes) > 1:
        raise DataError(f"{root}: images have mixed shapes {sorted(shapes)}")
    return Dataset(None, np.asarray(labels), np.stack(grids))
