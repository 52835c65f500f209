"""Synthetic multiview data, the MLP encoder, optimizers, training and inference."""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .clustering import aggregate_many, kmeans, map_clusters_to_anchors, match_labels, nearest_centroid, nmi
from .errors import ConfigError, DimensionMismatchError, MvclError, NonFiniteError, ZeroNormError
from .gradients import grad_total
from .linalg import EPS, Rng, as_matrix, l2_normalize, mix, row_norms
from .losses import Batch, LossConfig, LossReport, total_loss, total_loss_arrays
from .pairs import PairSets, build_negative_pairs, build_positive_pairs, labeled_views
from .parallel import WorkerPool, parallel_step, shard

log = logging.getLogger(__name__)

# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    dim_feature: int = 32
    dim_embed: int = 32
    classes: int = 6
    subjects_per_class: int = 20
    view_noise_sigma: float = 0.05
    view_rotation_angle: float = 0.1
    subject_noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.dim_feature < 2 or self.dim_embed < 2:
            raise ConfigError("synthetic dims must be >= 2")
        if self.classes < 1 or self.subjects_per_class < 1:
            raise ConfigError("synthetic.classes and synthetic.subjects_per_class must be >= 1")
        for name in ("view_noise_sigma", "subject_noise_sigma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"synthetic.{name} must be finite and >= 0")
        if not np.isfinite(self.view_rotation_angle):
            raise ConfigError("synthetic.view_rotation_angle must be finite")


@dataclass(frozen=True)
class Dataset:
    subject_ids: np.ndarray
    truth: np.ndarray
    features: np.ndarray  # (n, 3, dim_feature) in (front, right, left) order
    class_anchors: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.subject_ids)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.subject_ids[idx], self.truth[idx], self.features[idx], self.class_anchors)

    def split(self, holdout_per_class, seed=0):
        """Hold out ``holdout_per_class`` subjects of every truth class."""
        rng = Rng(seed)
        test = []
        for c in np.unique(self.truth):
            members = np.where(self.truth == c)[0]
            pick = rng.choice(members.size, min(holdout_per_class, members.size))
            test.extend(members[np.sort(pick)].tolist())
        test = np.array(sorted(test), dtype=np.int64)
        train = np.setdiff1d(np.arange(len(self)), test)
        return self.subset(train), self.subset(test)


def _plane_rotation(dim, angle, rng):
    q, _ = np.linalg.qr(rng.normal((dim, 2)))
    u, w = q[:, 0], q[:, 1]
    return (
        np.eye(dim)
        + (np.cos(angle) - 1.0) * (np.outer(u, u) + np.outer(w, w))
        + np.sin(angle) * (np.outer(w, u) - np.outer(u, w))
    )


def _draw_class_anchors(spec, rng, max_draws=10_000):
    anchors = []
    draws = 0
    while len(anchors) < spec.classes:
        if draws >= max_draws:
            raise MvclError(
                f"could not place {spec.classes} anchors with pairwise cosine < 0.5 in dim {spec.dim_feature}"
            )
        draws += 1
        a = l2_normalize(rng.normal(spec.dim_feature))
        if all(float(a @ b) < 0.5 for b in anchors):
            anchors.append(a)
    return np.array(anchors)


def generate_synthetic(spec):
    rng = Rng(spec.seed)
    anchors = _draw_class_anchors(spec, rng)
    rotations = [np.eye(spec.dim_feature)] + [
        _plane_rotation(spec.dim_feature, spec.view_rotation_angle, rng) for _ in range(2)
    ]
    n = spec.classes * spec.subjects_per_class
    truth = np.repeat(np.arange(spec.classes), spec.subjects_per_class)
    base = anchors[truth] + rng.normal((n, spec.dim_feature), spec.subject_noise_sigma)
    feats = np.empty((n, 3, spec.dim_feature))
    for k, rot in enumerate(rotations):
        feats[:, k] = base @ rot.T
        if spec.view_noise_sigma > 0:
            feats[:, k] += rng.normal((n, spec.dim_feature), spec.view_noise_sigma)
    return Dataset(np.arange(n, dtype=np.int64), truth, feats, anchors)


def nearest_anchor_accuracy(ds, view=0):
    """Fraction of subjects whose chosen view is closest (cosine) to its own class anchor."""
    x = ds.features[:, view]
    sims = (x / row_norms(x)[:, None]) @ ds.class_anchors.T
    return float(np.mean(np.argmax(sims, axis=1) == ds.truth))


# ---------------------------------------------------------------- encoder


@dataclass
class EncoderParams:
    weights: list  # weights[l] has shape (out, in)
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionMismatchError("encoder needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionMismatchError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionMismatchError(f"layer {i} input {w.shape[1]} != previous output")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NonFiniteError(f"layer {i} has non-finite parameters")

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    def arrays(self):
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    @classmethod
    def from_arrays(cls, arrays):
        return cls([np.asarray(a) for a in arrays[0::2]], [np.asarray(a) for a in arrays[1::2]])

    def flat(self):
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def with_flat(self, vec):
        out, pos = [], 0
        for a in self.arrays():
            out.append(vec[pos : pos + a.size].reshape(a.shape))
            pos += a.size
        return EncoderParams.from_arrays(out)

    def copy(self):
        return EncoderParams.from_arrays([a.copy() for a in self.arrays()])


def init_encoder(in_dim, out_dim, hidden=(64, 64), seed=0):
    rng = Rng(seed)
    dims = [in_dim, *hidden, out_dim]
    weights = [rng.normal((o, i), 1.0 / np.sqrt(i)) for i, o in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(o) for o in dims[1:]]
    return EncoderParams(weights, biases)


def _forward(p, x, normalize=True):
    x = as_matrix(x, "features")
    if x.shape[1] != p.in_dim:
        raise DimensionMismatchError(f"input dim {x.shape[1]} != encoder input {p.in_dim}")
    acts = [x]
    h = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    if not normalize:
        return h, acts
    n = row_norms(h)
    if np.any(n <= EPS):
        raise ZeroNormError("encoder produced a zero vector; cannot normalize")
    return h / n[:, None], acts


def encode(p, x, normalize=True):
    """Encode a batch of feature rows into unit embeddings."""
    return _forward(p, x, normalize)[0]


def encoder_forward(p, x):
    return encode(p, np.atleast_2d(np.asarray(x, dtype=np.float64)))[0]


def encoder_backward(p, x, upstream, normalize=True):
    """Parameter gradients, as a list aligned with ``p.arrays()``."""
    out, acts = _forward(p, x, normalize)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != out.shape:
        raise DimensionMismatchError(f"upstream gradient {g.shape} != output {out.shape}")
    if normalize:
        z = acts[-1]
        n = row_norms(z)
        # d(z/|z|)^T g = (g - (g . y) y) / |z|
        g = (g - np.einsum("ij,ij->i", g, out)[:, None] * out) / n[:, None]
    grads = []
    for i in range(len(p.weights) - 1, -1, -1):
        if i < len(p.weights) - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        grads.append(g.sum(axis=0))
        grads.append(g.T @ acts[i])
        g = g @ p.weights[i]
    grads.reverse()  # now [W0, b0, W1, b1, ...]
    return grads


# ---------------------------------------------------------------- optimizers


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 0.01
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"train.optimizer must be sgd|adam, got {self.kind!r}")
        if not self.learning_rate >= 0:
            raise ConfigError("train.learning_rate must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"train.schedule must be constant|cosine, got {self.schedule!r}")

    def at_epoch(self, epoch, epochs):
        """Config with the learning rate scheduled for ``epoch`` of ``epochs``."""
        if self.schedule == "constant" or epochs <= 1:
            return self
        lr = self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs))
        return replace(self, learning_rate=lr)


@dataclass
class OptimizerState:
    step: int = 0
    m: list = None
    v: list = None


def optimizer_step(state, params, grads, cfg):
    """Return ``(new_params, new_state)`` for parameter and gradient array lists."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise DimensionMismatchError("parameter and gradient shapes differ")
    lr = cfg.learning_rate
    if cfg.kind == "sgd":
        return [p - lr * g for p, g in zip(params, grads)], OptimizerState(state.step + 1)
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    t = state.step + 1
    m = [cfg.beta1 * a + (1 - cfg.beta1) * g for a, g in zip(m, grads)]
    v = [cfg.beta2 * a + (1 - cfg.beta2) * g * g for a, g in zip(v, grads)]
    c1 = 1 - cfg.beta1**t
    c2 = 1 - cfg.beta2**t
    new = [p - lr * (a / c1) / (np.sqrt(b / c2) + cfg.eps) for p, a, b in zip(params, m, v)]
    return new, OptimizerState(t, m, v)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_subjects: int = 16
    optimizer: OptimizerConfig = OptimizerConfig()
    loss: LossConfig = LossConfig()
    hidden: tuple = (64, 64)
    recluster_every: int = 1
    cap_per_anchor: int = 8
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-6
    kmeans_restarts: int = 10
    workers: int = 1
    shards: int = 0  # 0 means "same as workers"
    backend: str = "process"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        for name in ("batch_subjects", "recluster_every", "cap_per_anchor", "kmeans_iters", "kmeans_restarts", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.shards < 0:
            raise ConfigError("train.shards must be >= 0")
        if self.backend not in ("process", "thread", "serial"):
            raise ConfigError(f"train.backend must be process|thread|serial, got {self.backend!r}")

    @property
    def shard_count(self):
        return self.shards or self.workers


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # LossReport per epoch
    seconds: list = field(default_factory=list)
    accuracy: float = float("nan")
    nmi: float = float("nan")
    pseudo_labels: dict = field(default_factory=dict)


def _shard_pairs(labels, cap_per_anchor, neg_seed):
    m = len(labels)
    lv = labeled_views(range(m), labels)
    neg = []
    if len(set(int(v) for v in labels)) > 1:
        neg = build_negative_pairs(lv, cap_per_anchor, Rng(neg_seed))
    return PairSets(build_positive_pairs(lv), neg, 3 * m)


def _shard_forward(params, features, texts, labels, cap_per_anchor, neg_seed):
    m, _, f = features.shape
    x = features.reshape(3 * m, f)
    emb = encode(params, x)
    views = emb.reshape(m, 3, emb.shape[1])
    batch = Batch(emb, np.repeat(texts, 3, axis=0))
    return x, batch, views, _shard_pairs(labels, cap_per_anchor, neg_seed)


def shard_loss(params, features, texts, labels, loss_cfg, cap_per_anchor, neg_seed):
    """Loss report of one shard, without gradients."""
    _, batch, views, ps = _shard_forward(params, features, texts, labels, cap_per_anchor, neg_seed)
    return total_loss(batch, views, texts, ps, loss_cfg)


def shard_objective(params, features, texts, labels, loss_cfg, cap_per_anchor, neg_seed):
    """Loss report and parameter gradients for one shard of subjects.

    ``features`` is (m, 3, f); ``texts`` holds each subject's text target and
    ``labels`` its pseudo-label. The contrastive term pairs every view row
    with its subject's text target.
    """
    x, batch, views, ps = _shard_forward(params, features, texts, labels, cap_per_anchor, neg_seed)
    m, _, d = views.shape
    report = total_loss(batch, views, texts, ps, loss_cfg)
    tg = grad_total(batch, views, texts, ps, loss_cfg)
    upstream = tg.batch.d_visual + tg.d_views.reshape(3 * m, d)
    return report, encoder_backward(params, x, upstream)


def shard_loss_stack(template, flat_stack, features, texts, labels, loss_cfg, cap_per_anchor, neg_seed):
    """Shard total loss for a stack of flattened parameter vectors (B, P) -> (B,).

    Same arithmetic as ``shard_objective``, vectorized over parameter sets;
    used by finite-difference checks.
    """
    m, _, f = features.shape
    x = features.reshape(3 * m, f)
    ps = _shard_pairs(labels, cap_per_anchor, neg_seed)
    h = x[None]
    pos = 0
    last = len(template.weights) - 1
    for i, (w, b) in enumerate(zip(template.weights, template.biases)):
        ws = flat_stack[:, pos : pos + w.size].reshape((-1,) + w.shape)
        pos += w.size
        bs = flat_stack[:, pos : pos + b.size]
        pos += b.size
        h = h @ np.swapaxes(ws, -1, -2) + bs[:, None, :]
        if i < last:
            h = np.tanh(h)
    emb = h / np.sqrt(np.sum(h * h, axis=-1, keepdims=True))
    views = emb.reshape(emb.shape[0], m, 3, -1)
    p = np.asarray(ps.positives, dtype=np.int64).reshape(-1, 2)
    n = np.asarray(ps.negatives, dtype=np.int64).reshape(-1, 2)
    return total_loss_arrays(emb, np.repeat(texts, 3, axis=0), views, texts, p, n, loss_cfg)


def mean_reports(reports):
    keys = LossReport.__dataclass_fields__
    return LossReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})


def _targets(ds, params, anchors, model, cfg, epoch):
    emb = encode(params, ds.features.reshape(-1, ds.features.shape[2])).reshape(len(ds), 3, -1)
    agg = aggregate_many(emb)
    if model is None or epoch % cfg.recluster_every == 0:
        k = anchors.shape[0]
        model = kmeans(
            agg, k, seed=mix(cfg.seed, 1, epoch), max_iters=cfg.kmeans_iters, tol=cfg.kmeans_tol, n_init=cfg.kmeans_restarts
        )
    labels = nearest_centroid(model.centroids, agg)
    mapping = map_clusters_to_anchors(model.centroids, anchors)
    return model, labels, anchors[mapping[labels]], agg


def _batch_tasks(ds, idx, texts, labels, cfg, bi):
    plan = shard(idx, min(cfg.shard_count, len(idx)))
    return [
        (ds.features[s], texts[s], labels[s], cfg.loss, cfg.cap_per_anchor, mix(cfg.seed, 3, int(bi), w))
        for w, s in enumerate(plan.index_lists())
    ]


def train(ds, anchors, cfg, params=None, pool=None):
    """Train the encoder; returns ``(TrainReport, EncoderParams)``.

    ``anchors`` is a TextAnchorSet or a (classes, d) array. ``pool`` is an
    optional ``parallel.WorkerPool`` reused across calls; otherwise one is
    created when ``cfg.workers > 1``.
    """

    anchor_vecs = as_matrix(getattr(anchors, "vectors", anchors), "anchors")
    if params is None:
        params = init_encoder(ds.features.shape[2], anchor_vecs.shape[1], cfg.hidden, seed=mix(cfg.seed, 0))
    params = params.copy()
    report = TrainReport()
    state = OptimizerState()
    model = None
    own_pool = pool is None and cfg.workers > 1
    if own_pool:
        pool = WorkerPool(cfg.workers, cfg.backend)
    # batch membership is fixed for the whole run; only the visiting order is reshuffled
    members = Rng(mix(cfg.seed, 2)).permutation(len(ds))
    batches = [members[i : i + cfg.batch_subjects] for i in range(0, len(ds), cfg.batch_subjects)]
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            model, labels, texts, _ = _targets(ds, params, anchor_vecs, model, cfg, epoch)
            opt = cfg.optimizer.at_epoch(epoch, cfg.epochs)
            tasks = {bi: _batch_tasks(ds, idx, texts, labels, cfg, bi) for bi, idx in enumerate(batches)}
            for bi in Rng(mix(cfg.seed, 2, epoch)).permutation(len(batches)):
                rep, grads, _ = parallel_step(params, tasks[bi], pool)
                if not np.isfinite(rep.total):
                    raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {bi}: {rep}")
                new, state = optimizer_step(state, params.arrays(), grads, opt)
                params = EncoderParams.from_arrays(new)
            # the epoch's objective, measured once at the parameters the epoch ends with
            rep = mean_reports([mean_reports([shard_loss(params, *t) for t in tasks[bi]]) for bi in range(len(batches))])
            if not np.isfinite(rep.total):
                raise NonFiniteError(f"non-finite loss at the end of epoch {epoch}: {rep}")
            report.epochs.append(rep)
            report.seconds.append(time.perf_counter() - t0)
            log.debug("epoch %d total %.6f", epoch, report.epochs[-1].total)
    finally:
        if own_pool:
            pool.close()
    if len(ds) >= anchor_vecs.shape[0]:
        model, labels, _, _ = _targets(ds, params, anchor_vecs, None, replace(cfg, recluster_every=1), cfg.epochs)
        report.pseudo_labels = {int(s): int(c) for s, c in zip(ds.subject_ids, labels)}
        truth = {int(s): int(c) for s, c in zip(ds.subject_ids, ds.truth)}
        if len(truth) and min(truth.values()) >= 0:  # -1 marks unknown truth
            k = anchor_vecs.shape[0]
            if k <= 8 and len(set(truth.values())) <= 8:
                report.accuracy = match_labels(report.pseudo_labels, truth, k)
            report.nmi = nmi(report.pseudo_labels, truth)
    return report, params


# ---------------------------------------------------------------- inference


def infer(params, view_features, anchors):
    """Encode three views, aggregate, and return ``(class token, scores)``.

    ``scores`` is the cosine of the aggregated embedding with each anchor.
    """
    x = as_matrix(view_features, "view_features")
    if x.shape[0] != 3:
        raise DimensionMismatchError(f"expected 3 views, got {x.shape[0]}")
    agg = aggregate_many(encode(params, x)[None])[0]
    return classify(agg, anchors)


def classify(embedding, anchors):
    vecs = anchors.vectors
    scores = (vecs @ embedding) / (row_norms(vecs) * np.linalg.norm(embedding))
    best = int(np.argmax(scores))  # first maximum wins ties
    return anchors.classes[best], scores


def predict(params, ds, anchors):
    """Anchor-index predictions for every subject in ``ds``."""
    emb = encode(params, ds.features.reshape(-1, ds.features.shape[2])).reshape(len(ds), 3, -1)
    agg = aggregate_many(emb)
    sims = agg @ anchors.vectors.T
    return np.argmax(sims, axis=1)


def evaluate(params, ds, anchors):
    """Permutation-matched accuracy and nmi of anchor predictions against truth."""
    pred = predict(params, ds, anchors)
    p = {int(s): int(c) for s, c in zip(ds.subject_ids, pred)}
    t = {int(s): int(c) for s, c in zip(ds.subject_ids, ds.truth)}
    k = max(len(anchors.classes), len(set(t.values())))
    return match_labels(p, t, k), nmi(p, t)


def cosine_margin(params, ds):
    """Mean intra-class minus mean inter-class cosine of aggregated embeddings (truth classes)."""
    emb = encode(params, ds.features.reshape(-1, ds.features.shape[2])).reshape(len(ds), 3, -1)
    agg = aggregate_many(emb)
    sims = agg @ agg.T
    same = ds.truth[:, None] == ds.truth[None, :]
    off = ~np.eye(len(ds), dtype=bool)
    return float(sims[same & off].mean() - sims[~same].mean())


# ---------------------------------------------------------------- snapshots


def write_dataset(path, ds):
    """Embedding-file snapshot with ids ``subject_id << 2 | view``."""
    from .textbank import write_embeddings

    n, _, f = ds.features.shape
    ids = (ds.subject_ids.astype(np.uint64)[:, None] << np.uint64(2)) | np.arange(3, dtype=np.uint64)[None, :]
    write_embeddings(path, ids.reshape(-1), ds.features.reshape(3 * n, f))


def read_dataset(path, truth=None):
    """Inverse of ``write_dataset``; ``truth`` maps subject_id -> class when known."""
    from .errors import DataFormatError
    from .textbank import read_embeddings

    ids, vecs = read_embeddings(path)
    views = {}
    for i, v in zip(ids.tolist(), vecs):
        sid, slot = i >> 2, i & 3
        if slot > 2:
            raise DataFormatError(f"id {i} encodes unknown view slot {slot}")
        views.setdefault(sid, {})[slot] = v
    sids = sorted(views)
    for sid in sids:
        if len(views[sid]) != 3:
            raise DataFormatError(f"subject {sid} does not have exactly three views")
    feats = np.array([[views[s][k] for k in range(3)] for s in sids]).reshape(len(sids), 3, vecs.shape[1])
    t = np.array([truth.get(s, -1) for s in sids], dtype=np.int64) if truth else np.full(len(sids), -1)
    return Dataset(np.array(sids, dtype=np.int64), t, feats)


def write_truth_csv(path, ds):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("subject_id,class\n")
        for s, c in zip(ds.subject_ids, ds.truth):
            f.write(f"{int(s)},{int(c)}\n")


def read_truth_csv(path):
    import csv

    from .errors import DataFormatError

    out = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["subject_id", "class"]:
            raise DataFormatError(f"{path}: expected header subject_id,class, got {header}")
        for lineno, row in enumerate(reader, 2):
            try:
                out[int(row[0])] = int(row[1])
            except (ValueError, IndexError):
                raise DataFormatError(f"{path}:{lineno}: malformed row {row}") from None
    return out


def params_to_json(p):
    import json

    layers = [{"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(p.weights, p.biases)]
    return json.dumps({"layers": layers}, separators=(",", ":")) + "\n"


def params_from_json(text):
    import json

    from .errors import DataFormatError

    try:
        doc = json.loads(text)
        ws = [np.array(layer["weight"], dtype=np.float64) for layer in doc["layers"]]
        bs = [np.array(layer["bias"], dtype=np.float64) for layer in doc["layers"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"malformed params file: {exc}") from None
    return EncoderParams(ws, bs)
