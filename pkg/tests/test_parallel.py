from dataclasses import replace

import numpy as np
import pytest

from mvcl.errors import MvclError, WorkerError
from mvcl.linalg import mix
from mvcl.losses import LossConfig
from mvcl.parallel import (
    ScalingRow,
    WorkerPool,
    benchmark_scaling,
    checks_csv,
    mean_reduce,
    parallel_epoch,
    parse_scaling_csv,
    scaling_csv,
    shard,
)
from mvcl.pipeline import TrainConfig, init_encoder, shard_loss, shard_objective, train


def zero_closure(params, n):
    return 0.0, [np.zeros(n), np.zeros((n, 2))]


def failing_closure(params, w):
    if w == 1:
        raise ValueError("boom")
    return 0.0, [np.zeros(1)]


def batch_tasks(ds, texts, idx, k, seed=0):
    plan = shard(idx, k)
    return [
        (ds.features[s], texts[s], ds.truth[s], LossConfig(), 8, mix(seed, 3, 0, w))
        for w, s in enumerate(plan.index_lists())
    ]


class TestShard:
    @pytest.mark.parametrize("n,k,sizes", [(10, 1, [10]), (10, 3, [4, 3, 3]), (3, 3, [1, 1, 1])])
    def test_sizes(self, n, k, sizes):
        plan = shard(range(n), k)
        assert [len(s) for s in plan.index_lists()] == sizes
        assert np.concatenate(plan.index_lists()).tolist() == list(range(n))

    def test_partition_property(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 60))
            k = int(rng.integers(1, n + 1))
            items = rng.permutation(1000)[:n]
            parts = shard(items, k).index_lists()
            sizes = [len(p) for p in parts]
            assert max(sizes) - min(sizes) <= 1
            assert np.concatenate(parts).tolist() == items.tolist()

    def test_errors(self):
        with pytest.raises(MvclError):
            shard(range(2), 3)
        with pytest.raises(MvclError):
            shard(range(2), 0)


class TestReduce:
    def test_zero_average(self):
        _, grads, times = parallel_epoch(None, [(3,)] * 3, zero_closure, WorkerPool(1, "serial"))
        assert all(not g.any() for g in grads) and len(times) == 3

    def test_mean_reduce_order(self, rng):
        lists = [[rng.normal(size=4)] for _ in range(3)]
        expect = ((lists[0][0] + lists[1][0]) + lists[2][0]) / 3
        assert mean_reduce(lists)[0].tobytes() == expect.tobytes()

    @pytest.mark.parametrize("backend", ["serial", "thread", "process"])
    def test_worker_error_names_index(self, backend):
        with WorkerPool(2, backend) as pool:
            with pytest.raises(WorkerError) as info:
                parallel_epoch(None, [(0,), (1,)], failing_closure, pool)
        assert info.value.worker == 1 and "worker 1" in str(info.value)


@pytest.fixture(scope="module")
def setup(easy_dataset, anchors):
    return init_encoder(32, 32, (16,), seed=5), anchors.vectors[easy_dataset.truth]


class TestEquivalence:
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_matches_sequential_shard_loop(self, easy_dataset, setup, k):
        params, texts = setup
        tasks = batch_tasks(easy_dataset, texts, np.arange(0, 120, 5), k)
        with WorkerPool(k, "process") as pool:
            reports, grads, _ = parallel_epoch(params, tasks, shard_objective, pool)
        # oracle: plain loop, then a stacked mean
        seq = [shard_objective(params, *t) for t in tasks]
        for i, g in enumerate(grads):
            oracle = np.mean(np.stack([s[1][i] for s in seq]), axis=0)
            assert np.abs(g - oracle).max() <= 1e-12
        assert [r.total for r in reports] == [s[0].total for s in seq]
        if k == 1:
            assert all(a.tobytes() == b.tobytes() for a, b in zip(grads, seq[0][1]))

    def test_gradient_of_shard_mean_loss(self, easy_dataset, setup):
        # the reduced gradient is the derivative of the mean of per-shard losses
        params, texts = setup
        tasks = batch_tasks(easy_dataset, texts, np.arange(0, 120, 10), 3)
        _, grads, _ = parallel_epoch(params, tasks, shard_objective)
        flat = np.concatenate([g.reshape(-1) for g in grads])
        rng = np.random.default_rng(0)
        h = 1e-6
        for i in rng.choice(flat.size, 20, replace=False):
            v = params.flat()
            up, dn = v.copy(), v.copy()
            up[i] += h
            dn[i] -= h
            f = lambda z: np.mean([shard_loss(params.with_flat(z), *t).total for t in tasks])  # noqa: E731
            assert abs((f(up) - f(dn)) / (2 * h) - flat[i]) <= 1e-6 * max(1.0, abs(flat[i]))

    @pytest.mark.parametrize("backend", ["process", "thread"])
    def test_training_bitwise_equal_to_sequential(self, easy_dataset, anchors, backend):
        cfg = TrainConfig(epochs=3, hidden=(16,), kmeans_restarts=2, shards=3)
        _, seq = train(easy_dataset, anchors, replace(cfg, workers=1))
        _, par = train(easy_dataset, anchors, replace(cfg, workers=3, backend=backend))
        assert seq.flat().tobytes() == par.flat().tobytes()


class TestBenchmark:
    def test_small_grid(self, easy_dataset, anchors):
        cfg = TrainConfig(hidden=(8,), kmeans_restarts=1)
        rows = benchmark_scaling(easy_dataset, anchors, cfg, workers=(1, 2), batches=(16,), repeats=1, backend="thread")
        assert [(r.workers, r.batch) for r in rows] == [(1, 16), (2, 16)]
        assert rows[0].speedup == 1.0
        assert rows[1].speedup == pytest.approx(rows[0].seconds / rows[1].seconds, rel=1e-15)
        assert all(np.isfinite(r.final_loss) for r in rows)

    def test_csv_round_trip(self):
        rows = [ScalingRow(1, 8, 0.1234567890123, 1.0, 2.0), ScalingRow(2, 8, 1 / 3, 0.3703703703703704, 2.0)]
        back = parse_scaling_csv(scaling_csv(rows))
        assert back == [(r.workers, r.batch, r.seconds, r.speedup) for r in rows]
        assert scaling_csv(rows).splitlines()[0] == "workers,batch,seconds,speedup"
        assert checks_csv(rows).splitlines()[1] == "1,8,2.0"
