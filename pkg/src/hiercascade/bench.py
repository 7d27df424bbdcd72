"""Batch wall-clock timing of flat versus hierarchical inference.

The batch must already be featurized and in memory: the clock covers model
evaluation only. A warm-up pass runs before the measured repeats and is
discarded.
"""
from __future__ import annotations

import contextlib
import csv
import gc
import io
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataset
from .routing import HierarchyEnsemble, route_batch

DEFAULT_BATCH_SIZE = 135
DEFAULT_REPEATS = 10
BENCH_MODES = ("flat", "topdown", "bottomup")


class BenchError(RuntimeError):
    pass


class _Workers:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.active = 0

    @contextlib.contextmanager
    def busy(self, n: int = 1):
        with self._lock:
            self.active += n
        try:
            yield
        finally:
            with self._lock:
                self.active -= n


# Worker pools register here; timing refuses to start while any are active.
background = _Workers()


@dataclass
class TimingResult:
    mode: str
    batch_size: int
    repeats: int
    per_repeat_seconds: list[float]
    io_events: int = 0
    total_mean_seconds: float = field(init=False)
    per_image_ms: float = field(init=False)

    def __post_init__(self) -> None:
        if self.repeats < 1 or len(self.per_repeat_seconds) != self.repeats:
            raise BenchError("repeats must be >= 1 and match the measurements")
        if self.batch_size < 1:
            raise BenchError("batch_size must be >= 1")
        self.total_mean_seconds = float(np.mean(self.per_repeat_seconds))
        self.per_image_ms = 1000.0 * self.total_mean_seconds / self.batch_size

    def to_dict(self) -> dict:
        return asdict(self)


def _check_batch(mode: str, batch, repeats: int) -> np.ndarray:
    if mode not in BENCH_MODES:
        raise BenchError(f"mode must be one of {BENCH_MODES}, got {mode!r}")
    if repeats < 1:
        raise BenchError("repeats must be >= 1")
    X = np.ascontiguousarray(batch, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise BenchError("empty batch")
    return X


@contextlib.contextmanager
def _exclusive(e: HierarchyEnsemble):
    if background.active:
        raise BenchError(f"{background.active} background workers active; timing needs exclusivity")
    saved, e.counter = e.counter, None
    gc_was_on = gc.isenabled()
    try:
        # like timeit: collector pauses would bill unrelated heap size to a mode
        gc.collect()
        gc.disable()
        with threadpool_limits(limits=1):
            yield
    finally:
        if gc_was_on:
            gc.enable()
        e.counter = saved


def time_modes(
    e: HierarchyEnsemble,
    modes: Sequence[str],
    batch,
    repeats: int = DEFAULT_REPEATS,
    warmup: bool = True,
    clock=time.perf_counter,
) -> list[TimingResult]:
    """Time several modes on one in-memory batch, interleaving them per repeat.

    Round-robin order spreads slow drifts of machine speed over every mode
    instead of charging them to whichever mode happened to run during them.
    For hierarchical modes the clock spans the first pass and the routed
    second-level passes over the same array.
    """
    if not modes:
        raise BenchError("no modes to time")
    X = _check_batch(modes[0], batch, repeats)
    for m in modes:
        _check_batch(m, X, repeats)
    times: dict[str, list[float]] = {m: [] for m in modes}
    with _exclusive(e):
        if warmup:
            for m in modes:
                route_batch(e, X, m)
        io_before = dataset.io_events.value
        for _ in range(repeats):
            for m in modes:
                t0 = clock()
                route_batch(e, X, m)
                times[m].append(clock() - t0)
        io_during = dataset.io_events.value - io_before
    return [TimingResult(m, len(X), repeats, times[m], io_during) for m in modes]


def time_batch(
    e: HierarchyEnsemble,
    mode: str,
    batch,
    repeats: int = DEFAULT_REPEATS,
    warmup: bool = True,
    clock=time.perf_counter,
) -> TimingResult:
    """Time ``repeats`` evaluations of one in-memory batch under ``mode``."""
    return time_modes(e, [mode], batch, repeats, warmup, clock)[0]


def bench_report(results: Sequence[TimingResult], baseline: str = "flat") -> dict:
    """Mode-by-mode totals plus per-image ratios against the baseline mode."""
    if not results:
        raise BenchError("no timing results")
    rows = [
        {"mode": r.mode, "batch_size": r.batch_size, "repeats": r.repeats,
         "total_seconds": r.total_mean_seconds, "per_image_ms": r.per_image_ms}
        for r in results
    ]
    base = next((r for r in results if r.mode == baseline), results[0])
    ratios = [
        {"mode": r.mode, "baseline": base.mode, "ratio": r.per_image_ms / base.per_image_ms}
        for r in results if r is not base
    ]
    return {"rows": rows, "ratios": ratios}


def format_bench_table(report: dict, digits: int = 2) -> str:
    lines = [f"{'mode':<10} {'total (s)':>10} {'per image (ms)':>15}"]
    for row in report["rows"]:
        lines.append(
            f"{row['mode']:<10} {row['total_seconds']:>10.{digits}f} {row['per_image_ms']:>15.{digits}f}"
        )
    for r in report["ratios"]:
        lines.append(f"{r['mode']}/{r['baseline']} per-image ratio: {r['ratio']:.3f}")
    return "\n".join(lines)


def bench_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "batch_size", "repeats", "total_seconds", "per_image_ms", "ratio_vs_baseline"])
    ratio = {r["mode"]: r["ratio"] for r in report["ratios"]}
    for row in report["rows"]:
        w.writerow([row["mode"], row["batch_size"], row["repeats"],
                    f"{row['total_seconds']:.6f}", f"{row['per_image_ms']:.4f}",
                    f"{ratio[row['mode']]:.4f}" if row["mode"] in ratio else "1.0000"])
    return buf.getvalue()
