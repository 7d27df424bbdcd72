"""Probability-emitting classifiers used at every node of the hierarchy.

Three kinds are available:

* ``softmax``: multinomial logistic regression.
* ``mlp``: tanh hidden layers followed by a softmax output layer.
* ``table``: a pseudo-classifier defined by a row-stochastic matrix. It reads
  the true label and a sample uid from the first two feature columns and emits
  a one-hot vector drawn from that label's row. Draws are a pure function of
  ``(seed, uid)``, so each sample gets an independent but repeatable outcome.

Probability vectors are plain numpy arrays; a model's :class:`LabelSpace`
maps their positions back to label ids.
"""
from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

SIMPLEX_TOL = 1e-6

Kind = Literal["softmax", "mlp", "table"]


class BackendError(ValueError):
    pass


class DivergedError(BackendError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class LabelSpace:
    """Ordered label ids a model predicts over.

    ``kind`` is ``"fine"`` (all fine labels), ``"coarse"`` or ``"fine_within"``
    (the fine set of coarse category ``coarse``).
    """

    kind: str
    labels: tuple[int, ...]
    coarse: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        if self.kind not in ("fine", "coarse", "fine_within"):
            raise BackendError(f"unknown label space kind {self.kind!r}")
        if len(set(self.labels)) != len(self.labels) or not self.labels:
            raise BackendError("label space must be non-empty with unique ids")

    def __len__(self) -> int:
        return len(self.labels)

    @functools.cached_property
    def label_array(self) -> np.ndarray:
        a = np.asarray(self.labels, dtype=np.int64)
        a.flags.writeable = False
        return a

    def index_of(self, ids) -> np.ndarray:
        """Map label ids to positions; ids outside the space map to -1."""
        lut = {v: i for i, v in enumerate(self.labels)}
        return np.array([lut.get(int(v), -1) for v in np.ravel(ids)], dtype=np.int64)

    @classmethod
    def range(cls, n: int, kind: str = "fine") -> "LabelSpace":
        return cls(kind, tuple(range(n)))


@dataclass(frozen=True)
class ClassifierSpec:
    kind: Kind = "softmax"
    capacity: Literal["full", "half"] = "full"
    hidden: tuple[int, ...] = (64,)
    lr: float = 0.1
    epochs: int = 200
    batch_size: int = 32
    l2: float = 1e-4
    momentum: float = 0.9
    patience: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in ("softmax", "mlp", "table"):
            raise BackendError(f"unknown classifier kind {self.kind!r}")
        if self.capacity not in ("full", "half"):
            raise BackendError(f"capacity must be 'full' or 'half', got {self.capacity!r}")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise BackendError("lr, epochs, batch_size and patience must be positive")
        if self.l2 < 0 or not 0 <= self.momentum < 1:
            raise BackendError("l2 must be >= 0 and momentum in [0, 1)")
        if self.kind == "mlp" and (not self.hidden or min(self.hidden) < 1):
            raise BackendError("mlp needs at least one positive hidden width")

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        # half capacity halves every hidden width
        if self.capacity == "half":
            return tuple(max(1, h // 2) for h in self.hidden)
        return self.hidden

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierSpec":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class TrainedModel:
    spec: ClassifierSpec
    label_space: LabelSpace
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def n_labels(self) -> int:
        return len(self.label_space)

    @property
    def input_dim(self) -> int:
        if self.spec.kind == "table":
            return 2
        return int(self.params["mu"].shape[0])

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "label_space": {
                "kind": self.label_space.kind,
                "labels": list(self.label_space.labels),
                "coarse": self.label_space.coarse,
            },
            "params": {
                k: {"shape": list(v.shape), "dtype": str(v.dtype), "data": v.ravel().tolist()}
                for k, v in sorted(self.params.items())
            },
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        ls = d["label_space"]
        params = {
            k: np.asarray(v["data"], dtype=v.get("dtype", "float64")).reshape(v["shape"])
            for k, v in d["params"].items()
        }
        return cls(
            ClassifierSpec.from_dict(d["spec"]),
            LabelSpace(ls["kind"], tuple(ls["labels"]), ls.get("coarse")),
            params,
            dict(d.get("meta", {})),
        )


def save_model(m: TrainedModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(m.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> TrainedModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise BackendError(f"cannot load model {path}: {exc}") from exc
    return TrainedModel.from_dict(doc)


# --------------------------------------------------------------------------
# math


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@functools.lru_cache(maxsize=None)
def _layer_names(n_hidden: int) -> tuple[tuple[str, str], ...]:
    return tuple((f"W{i}", f"b{i}") for i in range(n_hidden + 1))


def forward(kind: str, params: dict, Xs: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits for standardized inputs, plus hidden activations for backprop."""
    acts = [Xs]
    h = Xs
    layers = _layer_names(_n_hidden(params))
    for wn, bn in layers[:-1]:
        h = np.tanh(h @ params[wn] + params[bn])
        acts.append(h)
    wn, bn = layers[-1]
    return h @ params[wn] + params[bn], acts


def _infer_logits(params: dict, Xs: np.ndarray, n_hidden: int) -> np.ndarray:
    """Same logits as ``forward`` without keeping activations; works in place."""
    layers = _layer_names(n_hidden)
    h = Xs
    for wn, bn in layers[:-1]:
        h = h @ params[wn]
        h += params[bn]
        np.tanh(h, out=h)
    wn, bn = layers[-1]
    out = h @ params[wn]
    out += params[bn]
    return out


def _n_hidden(params: dict) -> int:
    return sum(1 for k in params if k.startswith("W")) - 1


def loss_and_grad(kind: str, params: dict, Xs: np.ndarray, y: np.ndarray, l2: float):
    """Mean cross-entropy plus ``l2/2 * sum(W**2)`` and its gradient."""
    n = len(y)
    logits, acts = forward(kind, params, Xs)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()
    weights = [k for k in params if k.startswith("W")]
    loss += 0.5 * l2 * sum(float((params[k] ** 2).sum()) for k in weights)

    grads = {}
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    layers = _layer_names(_n_hidden(params))
    for li in range(len(layers) - 1, -1, -1):
        wn, bn = layers[li]
        a = acts[li]
        grads[wn] = a.T @ delta + l2 * params[wn]
        grads[bn] = delta.sum(axis=0)
        if li > 0:
            delta = (delta @ params[wn].T) * (1.0 - a ** 2)
    return loss, grads


def init_params(kind: str, dims: list[int], rng: np.random.Generator) -> dict:
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        params[f"W{i}"] = rng.normal(0.0, scale, size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    return params


# --------------------------------------------------------------------------
# training and inference


def fit(
    spec: ClassifierSpec,
    X: np.ndarray,
    y: np.ndarray,
    X_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
    label_space: LabelSpace | None = None,
) -> TrainedModel:
    """Mini-batch gradient descent with momentum on cross-entropy.

    ``y`` holds label ids from ``label_space`` (default: ``0..max(y)``). Early
    stopping watches validation loss, or training loss when no validation set
    is given, and the best parameters seen are returned.
    """
    if spec.kind == "table":
        raise BackendError("table models are built with make_table_backend, not fit")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(X) == 0:
        raise BackendError("training data must be a non-empty (N, D) matrix with N labels")
    if label_space is None:
        label_space = LabelSpace.range(int(y.max()) + 1)
    yl = label_space.index_of(y)
    if (yl < 0).any():
        raise BackendError("training labels outside the model's label space")
    missing = sorted(set(range(len(label_space))) - set(yl.tolist()))
    if missing:
        names = [label_space.labels[i] for i in missing]
        raise BackendError(f"labels {names} have no training samples")

    mu = X.mean(axis=0)
    sigma = X.std(axis=0)
    sigma[sigma < 1e-12] = 1.0
    Xs = (X - mu) / sigma
    if X_val is not None and len(X_val):
        Xv = (np.asarray(X_val, dtype=np.float64) - mu) / sigma
        yv = label_space.index_of(y_val)
        if (yv < 0).any():
            raise BackendError("validation labels outside the model's label space")
    else:
        Xv, yv = Xs, yl

    rng = np.random.default_rng(spec.seed)
    hidden = list(spec.hidden_sizes) if spec.kind == "mlp" else []
    params = init_params(spec.kind, [X.shape[1], *hidden, len(label_space)], rng)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def val_loss() -> float:
        return loss_and_grad(spec.kind, params, Xv, yv, 0.0)[0]

    best = val_loss()
    best_params = {k: v.copy() for k, v in params.items()}
    best_epoch, stale, epoch = 0, 0, 0
    n = len(Xs)
    for epoch in range(1, spec.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, spec.batch_size):
            bi = order[start:start + spec.batch_size]
            # overflow here surfaces as a non-finite loss, reported below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grad(spec.kind, params, Xs[bi], yl[bi], spec.l2)
            if not np.isfinite(loss):
                raise DivergedError(f"non-finite training loss at epoch {epoch}")
            for k in params:
                velocity[k] = spec.momentum * velocity[k] - spec.lr * grads[k]
                params[k] += velocity[k]
        with np.errstate(over="ignore", invalid="ignore"):
            vl = val_loss()
        if not np.isfinite(vl):
            raise DivergedError(f"non-finite validation loss at epoch {epoch}")
        if vl < best - 1e-12:
            best, best_epoch, stale = vl, epoch, 0
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= spec.patience:
                break

    best_params["mu"] = mu
    best_params["sigma"] = sigma
    meta = {"final_loss": float(best), "epochs_run": epoch, "best_epoch": best_epoch}
    return TrainedModel(spec, label_space, best_params, meta)


def _as_batch(m: TrainedModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != m.input_dim:
        raise BackendError(
            f"dimension mismatch: model expects {m.input_dim} features, got {X.shape[-1]}"
        )
    return X, single


def predict_proba(m: TrainedModel, x) -> np.ndarray:
    """Probabilities over ``m.label_space`` for one vector or an (N, D) batch."""
    X, single = _as_batch(m, x)
    if m.spec.kind == "table":
        P = _table_proba(m, X)
    else:
        Xs = X - m.params["mu"]
        Xs /= m.params["sigma"]
        n_hidden = len(m.spec.hidden_sizes) if m.spec.kind == "mlp" else 0
        P = softmax(_infer_logits(m.params, Xs, n_hidden))
    return P[0] if single else P


def predict_index(m: TrainedModel, x) -> np.ndarray | int:
    """Position of the maximum probability; ties go to the lowest position."""
    P = predict_proba(m, x)
    out = np.argmax(P, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def predict(m: TrainedModel, x) -> np.ndarray | int:
    """Label id with maximum predicted probability (lowest id on ties)."""
    idx = predict_index(m, x)
    labels = np.asarray(m.label_space.labels)
    return int(labels[idx]) if np.ndim(idx) == 0 else labels[idx]


def argmax_label(probs, label_space: LabelSpace | None = None) -> int:
    probs = np.asarray(probs)
    i = int(np.argmax(probs))
    return i if label_space is None else label_space.labels[i]


def on_simplex(P, tol: float = SIMPLEX_TOL) -> bool:
    P = np.atleast_2d(np.asarray(P))
    return bool((P >= -tol).all() and np.allclose(P.sum(axis=1), 1.0, atol=tol, rtol=0))


# --------------------------------------------------------------------------
# table backend



def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def uniform_hash(seed: int, uid: np.ndarray) -> np.ndarray:
    """Counter-based uniforms in [0, 1): one independent value per (seed, uid)."""
    with np.errstate(over="ignore"):
        s = _splitmix64(np.asarray([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        z = _splitmix64(np.asarray(uid, dtype=np.int64).astype(np.uint64) ^ s)
    return (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def make_table_backend(
    rows,
    seed: int,
    label_space: LabelSpace | None = None,
    key_map=None,
) -> TrainedModel:
    """Pseudo-classifier emitting one-hot draws from a row-stochastic matrix.

    Inputs are ``(key, uid)`` pairs. ``key_map[key]`` selects the row (the
    true label's position); keys mapped to -1 fall outside the model's label
    space and draw uniformly. Without ``key_map`` the key is the row index.
    """
    R = np.asarray(rows, dtype=np.float64)
    if R.ndim != 2 or (R < 0).any() or not np.allclose(R.sum(axis=1), 1.0, atol=1e-9):
        raise BackendError("table rows must be non-negative and each sum to 1")
    if label_space is None:
        label_space = LabelSpace.range(R.shape[1])
    if len(label_space) != R.shape[1]:
        raise BackendError("table width does not match the label space size")
    km = np.arange(R.shape[0]) if key_map is None else np.asarray(key_map, dtype=np.int64)
    if km.max() >= R.shape[0]:
        raise BackendError("key_map points past the last table row")
    spec = ClassifierSpec(kind="table", seed=int(seed))
    return TrainedModel(spec, label_space, {"rows": R, "key_map": km}, {})


def _table_proba(m: TrainedModel, X: np.ndarray) -> np.ndarray:
    R = m.params["rows"]
    km = m.params["key_map"]
    L = R.shape[1]
    keys = X[:, 0].astype(np.int64)
    if (keys < 0).any() or (keys >= len(km)).any():
        raise BackendError("table input key out of range")
    rows = km[keys]
    u = uniform_hash(m.spec.seed, X[:, 1].astype(np.int64))
    cdf = np.cumsum(R, axis=1)
    cdf[:, -1] = 1.0
    draw = np.empty(len(X), dtype=np.int64)
    inside = rows >= 0
    if inside.any():
        c = cdf[rows[inside]]
        draw[inside] = (u[inside, None] >= c).sum(axis=1)
    draw[~inside] = np.minimum((u[~inside] * L).astype(np.int64), L - 1)
    P = np.zeros((len(X), L))
    P[np.arange(len(X)), draw] = 1.0
    return P


def table_features(keys, uids=None) -> np.ndarray:
    """``(key, uid)`` feature rows for the table backend; uids default to positions."""
    keys = np.asarray(keys, dtype=np.int64)
    uids = np.arange(len(keys)) if uids is None else np.asarray(uids, dtype=np.int64)
    return np.stack([keys, uids], axis=1).astype(np.float64)


def diagonal_rows(n: int, acc: float) -> np.ndarray:
    """``n x n`` stochastic matrix with ``acc`` on the diagonal, rest spread evenly."""
    if n == 1:
        return np.ones((1, 1))
    R = np.full((n, n), (1.0 - acc) / (n - 1))
    np.fill_diagonal(R, acc)
    return R


# --------------------------------------------------------------------------
# confusion matrix


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @classmethod
    def from_labels(cls, truth, pred, n_labels: int) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if truth.shape != pred.shape:
            raise BackendError("truth and prediction lengths differ")
        for arr in (truth, pred):
            if len(arr) and (arr.min() < 0 or arr.max() >= n_labels):
                raise BackendError(f"label out of range 0..{n_labels - 1}")
        counts = np.zeros((n_labels, n_labels), dtype=np.int64)
        np.add.at(counts, (truth, pred), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def collapse(self, groups) -> "ConfusionMatrix":
        """Sum rows and columns by ``groups[label]`` (e.g. a taxonomy parent map)."""
        g = np.asarray(groups, dtype=np.int64)
        G = np.zeros((len(g), g.max() + 1), dtype=np.int64)
        G[np.arange(len(g)), g] = 1
        return ConfusionMatrix(G.T @ self.counts @ G)

    def normalized(self) -> np.ndarray:
        rs = self.row_sums()[:, None].astype(float)
        return np.divide(self.counts, rs, out=np.zeros(self.counts.shape), where=rs > 0)

    def to_list(self) -> list[list[int]]:
        return self.counts.tolist()


def with_seed(spec: ClassifierSpec, seed: int) -> ClassifierSpec:
    return replace(spec, seed=int(seed))
