"""Hierarchical inference: pruned top-down, oracle top-down, bottom-up and flat."""
from __future__ import annotations

import json
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal

import numpy as np

from .backend import TrainedModel, load_model, predict_proba, save_model
from .taxonomy import Taxonomy, load_taxonomy, save_taxonomy

Mode = Literal["topdown", "oracle", "bottomup", "flat"]
MODES: tuple[str, ...] = ("topdown", "oracle", "bottomup", "flat")


class RoutingError(ValueError):
    pass


class InvocationCounter:
    """Thread-safe tally of model calls and of the samples each call saw."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls: Counter = Counter()
        self.samples: Counter = Counter()

    def record(self, node: str, n: int) -> None:
        with self._lock:
            self.calls[node] += 1
            self.samples[node] += n

    def second_samples(self) -> int:
        return sum(v for k, v in self.samples.items() if k.startswith("second"))

    def reset(self) -> None:
        with self._lock:
            self.calls.clear()
            self.samples.clear()


@dataclass
class HierarchyEnsemble:
    taxonomy: Taxonomy
    first: TrainedModel | None
    second: dict[int, TrainedModel]
    flat: TrainedModel | None = None
    counter: InvocationCounter | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        t = self.taxonomy
        if self.first is not None and self.first.label_space.labels != tuple(range(t.n_coarse)):
            raise RoutingError("first-level model must predict over all coarse labels in order")
        for c, m in self.second.items():
            if not 0 <= c < t.n_coarse:
                raise RoutingError(f"second-level model keyed by unknown coarse id {c}")
            if m.label_space.labels != tuple(t.fine_set(c)):
                raise RoutingError(
                    f"second-level model for {t.coarse[c].name!r} does not cover its fine set"
                )
        if self.flat is not None and self.flat.label_space.labels != tuple(range(t.n_fine)):
            raise RoutingError("flat model must predict over all fine labels in order")

    def _call(self, node: str, m: TrainedModel, X: np.ndarray) -> np.ndarray:
        if self.counter is not None:
            self.counter.record(node, len(X))
        return predict_proba(m, X)

    def _need_first(self) -> TrainedModel:
        if self.first is None:
            raise RoutingError("missing first-level model")
        return self.first

    def _need_second(self, c: int) -> TrainedModel:
        try:
            return self.second[c]
        except KeyError:
            raise RoutingError(
                f"missing second-level model for {self.taxonomy.coarse[c].name!r}"
            ) from None

    def _need_flat(self) -> TrainedModel:
        if self.flat is None:
            raise RoutingError("missing flat model")
        return self.flat

    def models(self) -> Iterator[tuple[str, TrainedModel]]:
        if self.first is not None:
            yield "first", self.first
        for c in sorted(self.second):
            yield f"second-{c}", self.second[c]
        if self.flat is not None:
            yield "flat", self.flat


@dataclass(frozen=True)
class RoutedPrediction:
    fine: int
    coarse_used: int
    coarse_mpp: float
    fine_mpp: float
    mode: str


@dataclass
class BatchPrediction:
    """Column-oriented routed predictions for a batch."""

    mode: str
    fine: np.ndarray
    coarse_used: np.ndarray
    coarse_mpp: np.ndarray
    fine_mpp: np.ndarray

    def __len__(self) -> int:
        return len(self.fine)

    def __getitem__(self, i: int) -> RoutedPrediction:
        return RoutedPrediction(
            int(self.fine[i]), int(self.coarse_used[i]),
            float(self.coarse_mpp[i]), float(self.fine_mpp[i]), self.mode,
        )

    def __iter__(self) -> Iterator[RoutedPrediction]:
        return (self[i] for i in range(len(self)))


def _second_pass(e: HierarchyEnsemble, X: np.ndarray, branch: np.ndarray):
    # one call per distinct branch, each seeing only the samples routed to it;
    # a single stable sort makes every branch a contiguous slice
    order = np.argsort(branch, kind="stable")
    Xo = X[order]
    bounds = np.cumsum(np.bincount(branch, minlength=e.taxonomy.n_coarse))
    fine = np.empty(len(X), dtype=np.int64)
    mpp = np.empty(len(X))
    start = 0
    for c, stop in enumerate(bounds.tolist()):
        if stop == start:
            continue
        m = e._need_second(c)
        P = e._call(f"second-{c}", m, Xo[start:stop])
        j = np.argmax(P, axis=1)
        idx = order[start:stop]
        fine[idx] = m.label_space.label_array[j]
        mpp[idx] = P[np.arange(stop - start), j]
        start = stop
    return fine, mpp


def _coarse_mass(taxonomy: Taxonomy, P: np.ndarray) -> np.ndarray:
    G = np.zeros((taxonomy.n_fine, taxonomy.n_coarse))
    G[np.arange(taxonomy.n_fine), taxonomy.parent] = 1.0
    return P @ G


def route_batch(e: HierarchyEnsemble, X, mode: str, true_coarse=None) -> BatchPrediction:
    """Classify an (N, D) batch under one inference mode."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    t = e.taxonomy
    n = len(X)
    if n == 0:
        raise RoutingError("empty batch")
    if mode == "topdown":
        P1 = e._call("first", e._need_first(), X)
        branch = np.argmax(P1, axis=1)
        cmpp = P1[np.arange(n), branch]
        fine, fmpp = _second_pass(e, X, branch)
    elif mode == "oracle":
        if true_coarse is None:
            raise RoutingError("oracle routing needs the true coarse labels")
        branch = np.broadcast_to(np.asarray(true_coarse, dtype=np.int64), (n,)).copy()
        if branch.min() < 0 or branch.max() >= t.n_coarse:
            raise RoutingError("true coarse label out of range")
        cmpp = np.ones(n)
        fine, fmpp = _second_pass(e, X, branch)
    elif mode == "bottomup":
        Pf = e._call("flat", e._need_flat(), X)
        f0 = np.argmax(Pf, axis=1)
        branch = np.asarray(t.parent)[f0]
        cmpp = _coarse_mass(t, Pf)[np.arange(n), branch]
        fine, fmpp = _second_pass(e, X, branch)
    elif mode == "flat":
        Pf = e._call("flat", e._need_flat(), X)
        fine = np.argmax(Pf, axis=1)
        branch = np.asarray(t.parent)[fine]
        fmpp = Pf[np.arange(n), fine]
        cmpp = _coarse_mass(t, Pf)[np.arange(n), branch]
    else:
        raise RoutingError(f"unknown mode {mode!r}; expected one of {MODES}")
    return BatchPrediction(mode, fine, branch, cmpp, fmpp)


def classify_topdown(e: HierarchyEnsemble, x) -> RoutedPrediction:
    """Route by the first-level argmax and evaluate only that branch."""
    return route_batch(e, x, "topdown")[0]


def classify_oracle(e: HierarchyEnsemble, x, true_coarse: int) -> RoutedPrediction:
    """Skip the first level and route by the ground-truth coarse label."""
    return route_batch(e, x, "oracle", true_coarse=[true_coarse])[0]


def classify_bottomup(e: HierarchyEnsemble, x) -> RoutedPrediction:
    """Flat prediction picks the branch; that branch's model always has the final say."""
    return route_batch(e, x, "bottomup")[0]


def classify_flat(e: HierarchyEnsemble, x) -> RoutedPrediction:
    return route_batch(e, x, "flat")[0]


# --------------------------------------------------------------------------
# manifests


def save_ensemble(e: HierarchyEnsemble, directory: str | Path) -> Path:
    """Write every node model plus ``manifest.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_taxonomy(e.taxonomy, d / "taxonomy.json")
    manifest: dict = {"taxonomy": "taxonomy.json", "second": {}}
    for name, m in e.models():
        fname = f"{name}.model.json"
        save_model(m, d / fname)
        if name.startswith("second-"):
            manifest["second"][name.split("-", 1)[1]] = fname
        else:
            manifest[name] = fname
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_ensemble(manifest_path: str | Path) -> HierarchyEnsemble:
    p = Path(manifest_path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise RoutingError(f"cannot read manifest {p}: {exc}") from exc
    base = p.parent
    taxonomy = load_taxonomy(base / doc["taxonomy"])
    first = load_model(base / doc["first"]) if doc.get("first") else None
    flat = load_model(base / doc["flat"]) if doc.get("flat") else None
    second = {int(c): load_model(base / f) for c, f in doc.get("second", {}).items()}
    return HierarchyEnsemble(taxonomy, first, second, flat)
