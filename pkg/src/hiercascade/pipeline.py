"""End-to-end orchestration: data preparation, training, evaluation, estimation, timing.

Everything a run produces is written under ``<out>/<config-hash>/``:

    config.json  splits.json
    fold-<i>/manifest.json  fold-<i>/*.model.json
    reports/<mode>.json  reports/overall.csv  reports/categories.csv
    estimate.json  bench.json  bench.csv
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .backend import ClassifierSpec, LabelSpace, fit, predict, with_seed
from .dataset import (
    DataError,
    Dataset,
    augment_dataset,
    featurize_dataset,
    generate_synthetic,
    kfold_split,
    load_csv,
    load_image_dir,
)
from .estimator import estimate_report, measure_cascade_inputs, monte_carlo_cascade
from .evaluation import aggregate, category_table_csv, overall_table_csv, score
from .routing import HierarchyEnsemble, load_ensemble, route_batch, save_ensemble
from .taxonomy import Taxonomy, load_nw45, load_taxonomy

log = logging.getLogger(__name__)

EXPERIMENTS = {"1": "topdown", "2": "oracle", "3": "bottomup", "flat": "flat"}


class ConfigError(ValueError):
    pass


class DominanceViolation(RuntimeError):
    pass


@dataclass
class RunConfig:
    taxonomy: str = "nw45"
    data: dict = field(default_factory=lambda: {"source": "synthetic", "per_class": 50,
                                                "separation": 10.0, "overlap": 0.0})
    backend: dict = field(default_factory=lambda: {"kind": "softmax"})
    backends: dict = field(default_factory=dict)
    folds: int = 5
    fractions: tuple = (0.64, 0.16, 0.20)
    seed: int = 0
    out: str = "runs"
    jobs: int = 1
    mc_draws: int = 1_000_000

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**d)
        cfg.fractions = tuple(float(f) for f in cfg.fractions)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def validate(self) -> None:
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if len(self.fractions) != 3:
            raise ConfigError("fractions must be (train, val, test)")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.data.get("source") not in ("synthetic", "csv", "image_dir"):
            raise ConfigError(f"unknown data source {self.data.get('source')!r}")
        for role in ("first", "second", "flat"):
            spec = self.spec_for(role)
            if spec.kind == "table":
                raise ConfigError("table backends cannot be trained by the pipeline")

    def spec_for(self, role: str) -> ClassifierSpec:
        d = dict(self.backend)
        d.update(self.backends.get(role, {}))
        try:
            return ClassifierSpec.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid backend spec for {role}: {exc}") from exc

    def identity(self) -> dict:
        # output location and parallelism do not change results
        return {
            "taxonomy": self.taxonomy, "data": self.data, "backend": self.backend,
            "backends": self.backends, "folds": self.folds,
            "fractions": list(self.fractions), "seed": self.seed, "mc_draws": self.mc_draws,
        }

    def digest(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / self.digest()


def node_seed(root: int, fold: int, node: int) -> int:
    return int(np.random.SeedSequence([root, fold, node]).generate_state(1)[0])


def resolve_taxonomy(name: str) -> Taxonomy:
    return load_nw45() if name == "nw45" else load_taxonomy(name)


@dataclass
class Prepared:
    taxonomy: Taxonomy
    data: Dataset
    splits: list
    featurize_mode: str | None = None
    augment: bool = False


def prepare(cfg: RunConfig) -> Prepared:
    """Load the taxonomy and samples and compute the fold splits."""
    t = resolve_taxonomy(cfg.taxonomy)
    src = cfg.data
    mode, aug = None, False
    if src["source"] == "synthetic":
        ds = generate_synthetic(
            t, int(src.get("per_class", 50)), float(src.get("separation", 10.0)),
            float(src.get("overlap", 0.0)), int(src.get("seed", cfg.seed)), src.get("dim"),
        )
    elif src["source"] == "csv":
        ds = load_csv(src["path"], t)
    else:
        ds = load_image_dir(src["path"], t)
        mode = src.get("featurize", "flatten")
        aug = bool(src.get("augment", True))
        ds = featurize_dataset(ds, mode)
    ds.check_labels(t)
    splits = kfold_split(ds.fine, cfg.folds, *cfg.fractions, seed=cfg.seed)
    return Prepared(t, ds, splits, mode, aug)


def _train_set(p: Prepared, idx: np.ndarray) -> Dataset:
    part = p.data.subset(idx)
    if p.augment:
        part = featurize_dataset(augment_dataset(part), p.featurize_mode)
    return part


def train_fold(cfg: RunConfig, p: Prepared, fold) -> HierarchyEnsemble:
    """One coarse model, one model per coarse category, one flat model."""
    t = p.taxonomy
    tr = _train_set(p, fold.train)
    va = p.data.subset(fold.val)
    parent = np.asarray(t.parent)
    tr_c, va_c = parent[tr.fine], parent[va.fine]

    jobs = [("first", -1), ("flat", -2)] + [("second", c) for c in range(t.n_coarse)]

    def run(job):
        role, c = job
        seed = node_seed(cfg.seed, fold.fold_index, c + 2)
        spec = with_seed(cfg.spec_for(role), seed)
        if role == "first":
            return job, fit(spec, tr.X, tr_c, va.X, va_c, LabelSpace.range(t.n_coarse, "coarse"))
        if role == "flat":
            return job, fit(spec, tr.X, tr.fine, va.X, va.fine, LabelSpace.range(t.n_fine, "fine"))
        mt, mv = tr_c == c, va_c == c
        ls = LabelSpace("fine_within", tuple(t.fine_set(c)), c)
        return job, fit(spec, tr.X[mt], tr.fine[mt], va.X[mv], va.fine[mv], ls)

    if cfg.jobs > 1:
        with bench_mod.background.busy(cfg.jobs), ThreadPoolExecutor(cfg.jobs) as pool:
            done = dict(pool.map(run, jobs))
    else:
        done = dict(run(j) for j in jobs)
    second = {c: done[("second", c)] for c in range(t.n_coarse)}
    return HierarchyEnsemble(t, done[("first", -1)], second, done[("flat", -2)])


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train(cfg: RunConfig) -> Path:
    """Train every fold; the run directory appears only if all folds succeed."""
    p = prepare(cfg)
    final = cfg.run_dir
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}-", dir=final.parent))
    try:
        _dump(tmp / "config.json", cfg.identity())
        _dump(tmp / "splits.json", [
            {"fold": s.fold_index, "train": s.train.tolist(), "val": s.val.tolist(),
             "test": s.test.tolist()} for s in p.splits
        ])
        for fold in p.splits:
            log.info("training fold %d", fold.fold_index)
            e = train_fold(cfg, p, fold)
            save_ensemble(e, tmp / f"fold-{fold.fold_index}")
        if final.exists():
            shutil.rmtree(final)
        tmp.rename(final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return final


def _load_folds(cfg: RunConfig):
    run = cfg.run_dir
    if not (run / "splits.json").exists():
        raise FileNotFoundError(f"no trained run at {run}; run `train` first")
    p = prepare(cfg)
    ensembles = []
    for s in p.splits:
        mf = run / f"fold-{s.fold_index}" / "manifest.json"
        if not mf.exists():
            raise FileNotFoundError(f"missing models for fold {s.fold_index}: {mf}")
        ensembles.append(load_ensemble(mf))
    return p, ensembles


def _metadata(cfg: RunConfig, t: Taxonomy) -> dict:
    return {"seed": cfg.seed, "config_hash": cfg.digest(), "taxonomy_hash": t.digest(),
            "backend": cfg.backend, "backends": cfg.backends, "folds": cfg.folds}


def cmd_evaluate(cfg: RunConfig, experiments=("1", "2", "3", "flat")) -> dict:
    """Score each requested experiment on every test fold and write the reports."""
    modes = []
    for x in experiments:
        if str(x) not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {x!r}; choose from {sorted(EXPERIMENTS)}")
        modes.append(EXPERIMENTS[str(x)])
    p, ensembles = _load_folds(cfg)
    t = p.taxonomy
    per_mode: dict[str, list] = {m: [] for m in modes}
    for s, e in zip(p.splits, ensembles):
        test = p.data.subset(s.test)
        true_c = test.coarse(t)
        fold_scores = {}
        for m in modes:
            pred = route_batch(e, test.X, m, true_coarse=true_c if m == "oracle" else None)
            fold_scores[m] = score(pred, test.fine, t, mode=m)
            per_mode[m].append(fold_scores[m])
        if "oracle" in fold_scores and "topdown" in fold_scores:
            if fold_scores["oracle"].overall_accuracy < fold_scores["topdown"].overall_accuracy:
                raise DominanceViolation(f"fold {s.fold_index}: oracle accuracy below top-down")
    meta = _metadata(cfg, t)
    reports = {m: aggregate(f, meta) for m, f in per_mode.items()}
    out = cfg.run_dir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    for m, r in reports.items():
        _dump(out / f"{m}.json", r.to_dict(t))
    ordered = [reports[m] for m in modes]
    (out / "overall.csv").write_text(overall_table_csv(ordered), encoding="utf-8")
    (out / "categories.csv").write_text(category_table_csv(ordered, t), encoding="utf-8")
    return reports


def cmd_estimate(cfg: RunConfig) -> dict:
    """Cascade estimate, Monte-Carlo check and empirical top-down accuracy per fold."""
    p, ensembles = _load_folds(cfg)
    t = p.taxonomy
    folds = []
    for s, e in zip(p.splits, ensembles):
        test = p.data.subset(s.test)
        ci = measure_cascade_inputs(e, test.X, test.fine)
        mc = monte_carlo_cascade(ci, cfg.mc_draws, node_seed(cfg.seed, s.fold_index, 10_000))
        empirical = score(route_batch(e, test.X, "topdown"), test.fine, t).overall_accuracy
        first_acc = float(np.mean(predict(e.first, test.X) == test.coarse(t)))
        rep = estimate_report(ci, t, empirical=empirical, mc=mc, first_level_accuracy=first_acc)
        rep["fold"] = s.fold_index
        folds.append(rep)
    doc = {"folds": folds, "metadata": _metadata(cfg, t),
           "mean_overall_estimate": float(np.mean([f["overall"] for f in folds])),
           "mean_empirical_topdown": float(np.mean([f["empirical_topdown"] for f in folds]))}
    doc["mean_gap"] = abs(doc["mean_overall_estimate"] - doc["mean_empirical_topdown"])
    _dump(cfg.run_dir / "estimate.json", doc)
    return doc


def cmd_bench(cfg: RunConfig, batch_size: int = bench_mod.DEFAULT_BATCH_SIZE,
              repeats: int = bench_mod.DEFAULT_REPEATS, mode: str = "all") -> dict:
    """Time flat and hierarchical inference on fold 0's test samples."""
    p, ensembles = _load_folds(cfg)
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    test = p.data.subset(p.splits[0].test)
    # batch is materialized before any clock starts
    idx = np.resize(np.arange(len(test)), batch_size)
    batch = np.ascontiguousarray(test.X[idx])
    modes = bench_mod.BENCH_MODES if mode == "all" else (mode,)
    results = bench_mod.time_modes(ensembles[0], modes, batch, repeats)
    report = bench_mod.bench_report(results)
    report["per_repeat_seconds"] = {r.mode: r.per_repeat_seconds for r in results}
    _dump(cfg.run_dir / "bench.json", report)
    (cfg.run_dir / "bench.csv").write_text(bench_mod.bench_csv(report), encoding="utf-8")
    return report


def data_error_types() -> tuple:
    from .taxonomy import TaxonomyError
    return (DataError, TaxonomyError, ConfigError, FileNotFoundError)
