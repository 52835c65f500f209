"""Single-host synchronous data-parallel training and the scaling benchmark.

Workers evaluate a shard closure against a read-only parameter snapshot; the
reducer averages their gradients in ascending worker order, so the result is
bitwise independent of scheduling and of the execution backend.
"""

import csv
import io
import multiprocessing as mp
import statistics
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import MvclError, WorkerError


@dataclass(frozen=True)
class ShardPlan:
    workers: int
    bounds: tuple  # (start, stop) per worker, into ``items``
    items: tuple

    def index_lists(self):
        return [np.asarray(self.items[a:b], dtype=np.int64) for a, b in self.bounds]


def shard(batch_indices, k):
    items = tuple(int(i) for i in batch_indices)
    n = len(items)
    if k < 1:
        raise MvclError("worker count must be >= 1")
    if k > n:
        raise MvclError(f"cannot split {n} items across {k} workers")
    base, extra = divmod(n, k)
    bounds, start = [], 0
    for w in range(k):
        stop = start + base + (1 if w < extra else 0)
        bounds.append((start, stop))
        start = stop
    return ShardPlan(k, tuple(bounds), items)


def _timed(fn, params, task):
    t0 = time.perf_counter()
    out = fn(params, *task)
    return out, time.perf_counter() - t0


class WorkerPool:
    """A fixed set of ``k`` workers; ``backend`` is process, thread or serial."""

    def __init__(self, k, backend="process"):
        self.k = k
        self.backend = backend
        if backend == "process" and k > 1:
            self._ex = ProcessPoolExecutor(max_workers=k, mp_context=mp.get_context("fork"))
        elif backend == "thread" and k > 1:
            self._ex = ThreadPoolExecutor(max_workers=k)
        else:
            self._ex = None

    def run(self, fn, params, tasks):
        """Run ``fn(params, *task)`` for every task; results come back in task order."""
        if self._ex is None or len(tasks) == 1:
            futures = None
        else:
            futures = [self._ex.submit(_timed, fn, params, t) for t in tasks]
        results = []
        for w, task in enumerate(tasks):
            try:
                results.append(futures[w].result() if futures else _timed(fn, params, task))
            except Exception as exc:  # noqa: BLE001 - re-raised with the worker index
                raise WorkerError(w, exc) from exc
        return results

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()
            self._ex = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def mean_reduce(grad_lists):
    """Average per-worker gradient lists, accumulating in worker-index order."""
    acc = [np.array(g, dtype=np.float64, copy=True) for g in grad_lists[0]]
    for grads in grad_lists[1:]:
        for a, g in zip(acc, grads):
            a += g
    k = len(grad_lists)
    return [a / k for a in acc]


def parallel_epoch(params, tasks, closure, pool=None):
    """One synchronous data-parallel step.

    ``closure(params, *task)`` must return ``(loss, grads)`` for its shard.
    Returns ``(mean_loss, mean_grads, per_worker_seconds)``.
    """
    pool = pool or WorkerPool(1, "serial")
    results = pool.run(closure, params, tasks)
    losses = [r[0][0] for r in results]
    grads = mean_reduce([r[0][1] for r in results])
    return losses, grads, [r[1] for r in results]


def parallel_step(params, tasks, pool=None):
    """Data-parallel step of the training objective (mean of per-shard losses)."""
    from .pipeline import mean_reports, shard_objective

    reports, grads, timings = parallel_epoch(params, tasks, shard_objective, pool)
    return mean_reports(reports), grads, timings


# ---------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class ScalingRow:
    workers: int
    batch: int
    seconds: float
    speedup: float
    final_loss: float


def benchmark_scaling(
    ds, anchors, base_cfg, workers=(1, 2, 3), batches=(8, 16, 32, 64, 128, 256), repeats=5, backend="process"
):
    """Median-of-``repeats`` seconds per epoch for every (workers, batch) cell."""
    from .pipeline import train

    rows = []
    for b in batches:
        times = {}
        losses = {}
        for k in workers:
            cfg = replace(base_cfg, epochs=1, batch_subjects=b, workers=k, shards=k, backend=backend)
            samples = []
            with WorkerPool(k, backend) as pool:
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    rep, _ = train(ds, anchors, cfg, pool=pool)
                    samples.append(time.perf_counter() - t0)
            times[k] = statistics.median(samples)
            losses[k] = rep.epochs[-1].total
        base = times[workers[0]] if workers[0] == 1 else float("nan")
        for k in workers:
            rows.append(ScalingRow(k, b, times[k], base / times[k], losses[k]))
    return rows


def scaling_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["workers", "batch", "seconds", "speedup"])
    for r in rows:
        w.writerow([r.workers, r.batch, repr(r.seconds), repr(r.speedup)])
    return buf.getvalue()


def checks_csv(rows):
    """The wall-clock-free part of a benchmark: the loss each cell reached."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["workers", "batch", "final_loss"])
    for r in rows:
        w.writerow([r.workers, r.batch, repr(r.final_loss)])
    return buf.getvalue()


def parse_scaling_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    return [(int(r["workers"]), int(r["batch"]), float(r["seconds"]), float(r["speedup"])) for r in rows]
