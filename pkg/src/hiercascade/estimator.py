"""Analytic and Monte-Carlo accuracy of a two-stage classification cascade.

A sample of coarse category ``c`` ends up correct only if the first stage
routes it to ``c`` and the second stage then picks the right fine class.
Treating the stages as independent gives ``route_acc[c] * fine_acc[c]`` per
branch; weighting branches by the test prior gives the overall estimate.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .backend import LabelSpace, diagonal_rows, make_table_backend, predict_index
from .routing import HierarchyEnsemble
from .taxonomy import Taxonomy

PRIOR_TOL = 1e-9


class EstimatorError(ValueError):
    pass


def _check_fraction(name: str, v: float) -> float:
    v = float(v)
    if not 0.0 <= v <= 1.0 or math.isnan(v):
        raise EstimatorError(f"{name} must lie in [0, 1], got {v}")
    return v


@dataclass(frozen=True)
class CascadeInputs:
    route_acc: dict[int, float]
    fine_acc: dict[int, float]
    prior: dict[int, float]

    def __post_init__(self) -> None:
        keys = set(self.prior)
        if set(self.route_acc) != keys or set(self.fine_acc) != keys:
            raise EstimatorError("route_acc, fine_acc and prior must share the same categories")
        for name, d in (("route_acc", self.route_acc), ("fine_acc", self.fine_acc), ("prior", self.prior)):
            for c, v in d.items():
                _check_fraction(f"{name}[{c}]", v)
        total = sum(self.prior.values())
        if abs(total - 1.0) > PRIOR_TOL:
            raise EstimatorError(f"priors must sum to 1 (got {total!r})")

    @property
    def categories(self) -> list[int]:
        return sorted(self.prior)

    def to_dict(self) -> dict:
        return {
            "route_acc": {str(c): self.route_acc[c] for c in self.categories},
            "fine_acc": {str(c): self.fine_acc[c] for c in self.categories},
            "prior": {str(c): self.prior[c] for c in self.categories},
        }


@dataclass(frozen=True)
class CascadeEstimate:
    branch: dict[int, float]
    overall: float


def estimate_branch(route_acc: float, fine_acc: float) -> float:
    return _check_fraction("route_acc", route_acc) * _check_fraction("fine_acc", fine_acc)


def estimate_overall(ci: CascadeInputs) -> CascadeEstimate:
    branch = {c: estimate_branch(ci.route_acc[c], ci.fine_acc[c]) for c in ci.categories}
    overall = math.fsum(ci.prior[c] * branch[c] for c in ci.categories)
    return CascadeEstimate(branch, overall)


def back_solve_route(branch_acc: float, fine_acc: float) -> float:
    """Routing accuracy that, times ``fine_acc``, yields ``branch_acc``."""
    if fine_acc <= 0:
        raise EstimatorError("fine_acc must be positive to back-solve")
    r = branch_acc / fine_acc
    return _check_fraction("back-solved route_acc", r)


@dataclass(frozen=True)
class MonteCarloResult:
    mean: float
    stderr: float
    n: int

    def within(self, target: float, sigmas: float) -> bool:
        return abs(self.mean - target) <= sigmas * self.stderr


def _simulate(ci: CascadeInputs, n: int, seed_seq: np.random.SeedSequence) -> int:
    rng = np.random.default_rng(seed_seq)
    cats = ci.categories
    p = np.array([ci.prior[c] for c in cats])
    r = np.array([ci.route_acc[c] for c in cats])
    f = np.array([ci.fine_acc[c] for c in cats])
    which = rng.choice(len(cats), size=n, p=p / p.sum())
    routed = rng.random(n) < r[which]
    # a misrouted sample lands in a branch that cannot hold its label
    fine_ok = rng.random(n) < f[which]
    return int(np.count_nonzero(routed & fine_ok))


def monte_carlo_cascade(
    ci: CascadeInputs, n: int, seed: int, shards: int = 1, workers: int = 1
) -> MonteCarloResult:
    """Simulate ``n`` independent passes through the cascade.

    Draws are split into ``shards`` chunks whose seeds derive from ``seed``,
    so the result depends on ``(seed, shards)`` but not on ``workers``.
    """
    if n < 1:
        raise EstimatorError("n must be >= 1")
    if shards < 1:
        raise EstimatorError("shards must be >= 1")
    sizes = [n // shards + (1 if i < n % shards else 0) for i in range(shards)]
    seqs = np.random.SeedSequence(seed).spawn(shards)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hits = sum(pool.map(lambda a: _simulate(ci, *a), zip(sizes, seqs)))
    else:
        hits = sum(_simulate(ci, k, s) for k, s in zip(sizes, seqs) if k)
    mean = hits / n
    return MonteCarloResult(mean, math.sqrt(mean * (1.0 - mean) / n), n)


def table_cascade(
    taxonomy: Taxonomy,
    route_acc,
    fine_acc,
    seed: int,
    flat_acc: float | None = None,
) -> HierarchyEnsemble:
    """Ensemble of table backends with exact, independent per-stage accuracies.

    ``route_acc`` and ``fine_acc`` are scalars or per-coarse sequences. Errors
    are spread evenly over the wrong labels. Feed it ``table_features`` rows.
    """
    C, F = taxonomy.n_coarse, taxonomy.n_fine
    ra = np.broadcast_to(np.asarray(route_acc, dtype=np.float64), (C,))
    fa = np.broadcast_to(np.asarray(fine_acc, dtype=np.float64), (C,))
    seqs = np.random.SeedSequence(seed).generate_state(C + 2)
    rows = diagonal_rows(C, 0.0)
    for c in range(C):
        rows[c] = diagonal_rows(C, ra[c])[c]
    first = make_table_backend(rows, int(seqs[0]), LabelSpace.range(C, "coarse"), taxonomy.parent)
    second = {}
    for c in range(C):
        kids = taxonomy.fine_set(c)
        rows = diagonal_rows(len(kids), fa[c])
        key_map = np.full(F, -1)
        key_map[kids] = np.arange(len(kids))
        ls = LabelSpace("fine_within", tuple(kids), c)
        second[c] = make_table_backend(rows, int(seqs[c + 1]), ls, key_map)
    flat = None
    if flat_acc is not None:
        flat = make_table_backend(diagonal_rows(F, flat_acc), int(seqs[-1]), LabelSpace.range(F))
    return HierarchyEnsemble(taxonomy, first, second, flat)


def measure_cascade_inputs(e: HierarchyEnsemble, X, fine) -> CascadeInputs:
    """Per-category routing accuracy, standalone branch accuracy and test prior."""
    X = np.asarray(X, dtype=np.float64)
    fine = np.asarray(fine, dtype=np.int64)
    if len(fine) == 0:
        raise EstimatorError("empty test set")
    t: Taxonomy = e.taxonomy
    true_c = np.asarray(t.parent)[fine]
    first = e._need_first()
    routed = np.asarray(first.label_space.labels)[predict_index(first, X)]
    route_acc, fine_acc, prior = {}, {}, {}
    for c in range(t.n_coarse):
        mask = true_c == c
        if not mask.any():
            raise EstimatorError(f"coarse category {t.coarse[c].name!r} has no test samples")
        route_acc[c] = float(np.mean(routed[mask] == c))
        m = e._need_second(c)
        pred = np.asarray(m.label_space.labels)[predict_index(m, X[mask])]
        fine_acc[c] = float(np.mean(pred == fine[mask]))
        prior[c] = float(mask.sum()) / len(fine)
    # renormalize away float drift so the prior check is exact
    s = math.fsum(prior.values())
    prior = {c: v / s for c, v in prior.items()}
    return CascadeInputs(route_acc, fine_acc, prior)


def estimate_report(
    ci: CascadeInputs,
    taxonomy: Taxonomy | None = None,
    empirical: float | None = None,
    mc: MonteCarloResult | None = None,
    first_level_accuracy: float | None = None,
) -> dict:
    est = estimate_overall(ci)
    rows = []
    for c in ci.categories:
        rows.append({
            "category": taxonomy.coarse[c].name if taxonomy else str(c),
            "route_acc": ci.route_acc[c],
            "fine_acc": ci.fine_acc[c],
            "product": est.branch[c],
            "prior": ci.prior[c],
        })
    out: dict = {"branches": rows, "overall": est.overall}
    if first_level_accuracy is not None:
        out["first_level_accuracy"] = first_level_accuracy
    if mc is not None:
        out["monte_carlo"] = {"mean": mc.mean, "stderr": mc.stderr, "n": mc.n}
    if empirical is not None:
        out["empirical_topdown"] = empirical
        out["gap"] = abs(est.overall - empirical)
    return out
