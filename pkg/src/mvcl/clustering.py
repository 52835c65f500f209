"""Multiview aggregation, seeded k-means pseudo-labels and agreement metrics."""

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .errors import DimensionMismatchError, MvclError, ZeroNormError
from .linalg import EPS, Rng, as_matrix, l2_normalize_rows, mix, row_norms
from .losses import as_views


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray
    k: int
    inertia: float
    labels: np.ndarray = field(repr=False, default=None)
    inertia_history: tuple = ()
    iterations: int = 0


def aggregate_many(views):
    """Normalized mean of the three views for every subject of an (N, 3, d) array."""
    mean = as_views(views).mean(axis=1)
    if np.any(row_norms(mean) <= EPS):
        raise ZeroNormError("views cancel: zero-norm mean")
    return l2_normalize_rows(mean)


def aggregate_views(mv):
    """Normalized mean of one subject's three views."""
    return aggregate_many([mv])[0]


def _sq_dists(x, c):
    # (n, k) squared Euclidean distances, computed directly for exact zeros on coincident points
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    centers = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[centers])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a chosen center; take the first unused index
            nxt = next(i for i in range(n) if i not in centers)
        else:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.uniform() * total, side="right"))
            nxt = min(nxt, n - 1)
        centers.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[centers].copy()


def kmeans(points, k, seed=0, max_iters=100, tol=1e-6, n_init=10):
    """Seeded k-means++ / Lloyd, then Hartigan single-point transfers.

    The lowest-inertia of ``n_init`` restarts wins. Restart 0 uses ``seed``
    itself and restart ``r`` uses ``mix(seed, r)``.
    """
    x = as_matrix(points, "points")
    n = x.shape[0]
    if k < 1 or n < k:
        raise MvclError(f"kmeans needs at least k={k} points, got {n}")
    if max_iters < 1 or not tol > 0 or n_init < 1:
        raise MvclError("max_iters and n_init must be >= 1 and tol > 0")
    best = None
    for r in range(n_init):
        model = _lloyd(x, k, Rng(seed if r == 0 else mix(seed, r)), max_iters, tol)
        if best is None or model.inertia < best.inertia:
            best = model
    return best


def _lloyd(x, k, rng, max_iters, tol):
    n = x.shape[0]
    c = _kmeanspp(x, k, rng)
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(x, c)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), labels].sum()))
        new = np.empty_like(c)
        taken = set()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
        for j in range(k):
            if not (labels == j).any():
                # re-seed an empty cluster at the point farthest from its centroid
                far = d2[np.arange(n), labels].copy()
                far[list(taken)] = -1.0
                i = int(np.argmax(far))
                taken.add(i)
                new[j] = x[i]
                labels[i] = j
        shift = float(np.max(row_norms(new - c)))
        c = new
        if shift < tol:
            break
    d2 = _sq_dists(x, c)
    labels = np.argmin(d2, axis=1)
    history.append(float(d2[np.arange(n), labels].sum()))
    if _hartigan(x, labels, k, max_iters):
        c = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
        d2 = _sq_dists(x, c)
        history.append(float(d2[np.arange(n), labels].sum()))
    return ClusterModel(c, k, history[-1], labels, tuple(history), it)


def _hartigan(x, labels, k, max_sweeps):
    """Move single points while that strictly lowers inertia; edits ``labels`` in place.

    Escapes many Lloyd fixed points: a move is taken when the exact change
    n_a/(n_a-1)|x-c_a|^2 - n_j/(n_j+1)|x-c_j|^2 is positive.
    """
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    if counts.min() == 0:
        # only duplicate points can leave a cluster empty here; nothing to transfer
        return False
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    moved_any = False
    for _ in range(max_sweeps):
        moved = False
        for i in range(x.shape[0]):
            a = labels[i]
            if counts[a] <= 1:
                continue
            d2 = np.sum((x[i] - sums / counts[:, None]) ** 2, axis=1)
            out = counts[a] / (counts[a] - 1) * d2[a]
            into = counts / (counts + 1) * d2
            into[a] = np.inf
            j = int(np.argmin(into))
            if out - into[j] > 1e-12 * max(out, 1.0):
                counts[a] -= 1
                counts[j] += 1
                sums[a] -= x[i]
                sums[j] += x[i]
                labels[i] = j
                moved = moved_any = True
        if not moved:
            break
    return moved_any


def nearest_centroid(centroids, x):
    d2 = _sq_dists(np.atleast_2d(x), centroids)
    # argmin returns the first minimum, so ties go to the lowest index
    return np.argmin(d2, axis=1)


def assign_pseudo_labels(model, subjects):
    """Map ``[(subject_id, aggregated_embedding), ...]`` to ``{subject_id: cluster}``."""
    if not subjects:
        return {}
    ids = [int(s) for s, _ in subjects]
    x = as_matrix([v for _, v in subjects], "subjects")
    if x.shape[1] != model.centroids.shape[1]:
        raise DimensionMismatchError(f"dim {x.shape[1]} does not match centroid dim {model.centroids.shape[1]}")
    return dict(zip(ids, (int(j) for j in nearest_centroid(model.centroids, x))))


def _aligned(pred, truth):
    keys = sorted(set(pred) & set(truth))
    if not keys or set(pred) != set(truth):
        raise MvclError("pred and truth must cover the same non-empty set of keys")
    return [pred[k] for k in keys], [truth[k] for k in keys]


def match_labels(pred, truth, k):
    """Accuracy maximized over every relabeling of the predicted clusters (brute force)."""
    if k > 8:
        raise MvclError(f"match_labels brute force supports k <= 8, got {k}; use nmi")
    p, t = _aligned(pred, truth)
    p_codes = {v: i for i, v in enumerate(sorted(set(p)))}
    t_codes = {v: i for i, v in enumerate(sorted(set(t)))}
    size = max(k, len(p_codes), len(t_codes))
    if size > 8:
        raise MvclError(f"{size} distinct labels exceed the brute-force limit of 8")
    conf = np.zeros((size, size), dtype=np.int64)
    for a, b in zip(p, t):
        conf[p_codes[a], t_codes[b]] += 1
    perms = np.array(list(permutations(range(size))))
    best = conf[np.arange(size), perms].sum(axis=1).max()
    return float(best) / len(p)


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(pred, truth):
    """Normalized mutual information with arithmetic-mean normalization."""
    p, t = _aligned(pred, truth)
    _, pi = np.unique(p, return_inverse=True)
    _, ti = np.unique(t, return_inverse=True)
    n = len(p)
    joint = np.zeros((pi.max() + 1, ti.max() + 1))
    np.add.at(joint, (pi, ti), 1.0)
    hp = _entropy(joint.sum(axis=1), n)
    ht = _entropy(joint.sum(axis=0), n)
    if hp + ht == 0:
        return 0.0
    nz = joint > 0
    outer = np.outer(joint.sum(axis=1), joint.sum(axis=0))
    mi = float(np.sum(joint[nz] / n * np.log(joint[nz] * n / outer[nz])))
    return min(1.0, max(0.0, 2.0 * mi / (hp + ht)))


def map_clusters_to_anchors(centroids, anchors):
    """Greedy one-to-one cluster -> anchor mapping, most similar pair first.

    Returns an int array: ``mapping[cluster] = anchor index``. Clusters left
    over when there are more clusters than anchors fall back to their most
    similar anchor.
    """
    c = as_matrix(centroids)
    a = as_matrix(anchors)
    cn = c / np.maximum(row_norms(c), EPS)[:, None]
    an = a / np.maximum(row_norms(a), EPS)[:, None]
    sim = cn @ an.T
    k, m = sim.shape
    mapping = np.full(k, -1, dtype=np.int64)
    used_a = np.zeros(m, dtype=bool)
    # stable sort on -sim keeps (cluster, anchor) index order among ties
    order = np.argsort(-sim, axis=None, kind="stable")
    for flat in order:
        i, j = divmod(int(flat), m)
        if mapping[i] < 0 and not used_a[j]:
            mapping[i] = j
            used_a[j] = True
    for i in np.where(mapping < 0)[0]:
        mapping[i] = int(np.argmax(sim[i]))
    return mapping

