"""Loss terms of the multiview contrastive objective.

Symmetric temperature-scaled InfoNCE between visual and textual embeddings,
the multiview consistency distance, and sigmoid pair losses over positive
(same subject, different view) and negative (different pseudo-label) pairs.
"""

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DimensionMismatchError, EmptyInputError, PairError
from .linalg import as_matrix, cosine_matrix, l2_normalize_rows, log_softmax

VIEW_ORDER = ("front", "right", "left")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    weight_contrastive: float = 1.0
    weight_pos: float = 1.0
    weight_neg: float = 1.0
    weight_consistency: float = 1.0
    pair_reduction: str = "mean"
    neg_sign: str = "corrected"
    sigmoid_clamp: float = 1e-7

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"loss.tau must be > 0, got {self.tau}")
        for name in ("weight_contrastive", "weight_pos", "weight_neg", "weight_consistency"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"loss.{name} must be >= 0")
        if self.pair_reduction not in ("mean", "sum"):
            raise ConfigError(f"loss.pair_reduction must be mean|sum, got {self.pair_reduction!r}")
        if self.neg_sign not in ("corrected", "paper_literal"):
            raise ConfigError(f"loss.neg_sign must be corrected|paper_literal, got {self.neg_sign!r}")
        if not 0 < self.sigmoid_clamp < 0.5:
            raise ConfigError("loss.sigmoid_clamp must lie in (0, 0.5)")


@dataclass(frozen=True)
class LossReport:
    total: float
    contrastive: float = 0.0
    image_to_text: float = 0.0
    text_to_image: float = 0.0
    consistency: float = 0.0
    positive: float = 0.0
    negative: float = 0.0

    def as_dict(self):
        return asdict(self)


class MultiviewEmbedding(NamedTuple):
    front: np.ndarray
    right: np.ndarray
    left: np.ndarray


@dataclass(frozen=True)
class Batch:
    """Paired visual/textual rows; every row is unit-normalized on construction."""

    visual: np.ndarray
    textual: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = as_matrix(self.visual, "visual")
        t = as_matrix(self.textual, "textual")
        if v.shape[0] < 1 or v.shape != t.shape:
            raise DimensionMismatchError(f"visual {v.shape} and textual {t.shape} must match, N >= 1")
        if v.shape[1] < 2:
            raise DimensionMismatchError("embedding dim must be >= 2")
        v = l2_normalize_rows(v)
        t = l2_normalize_rows(t)
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "visual", v)
        object.__setattr__(self, "textual", t)

    @property
    def n(self):
        return self.visual.shape[0]


def as_views(views):
    """Coerce a list of MultiviewEmbedding (or an (N, 3, d) array) to an array."""
    if isinstance(views, np.ndarray):
        arr = views.astype(np.float64, copy=False)
    else:
        arr = np.asarray([np.stack([np.asarray(x, dtype=np.float64) for x in mv]) for mv in views])
    if arr.ndim != 3 or arr.shape[1] != 3:
        raise DimensionMismatchError(f"views must have shape (N, 3, d), got {arr.shape}")
    return arr


def similarity_matrix(b, tau):
    return cosine_matrix(b.visual, b.textual) / tau


# The *_arrays functions broadcast over any leading stack axes, e.g. v and t of
# shape (..., N, d); the Batch-level functions below are thin wrappers.


def cosine_stack(v, t):
    nv = np.sqrt(np.sum(v * v, axis=-1))
    nt = np.sqrt(np.sum(t * t, axis=-1))
    c = (v @ np.swapaxes(t, -1, -2)) / (nv[..., :, None] * nt[..., None, :])
    return np.clip(c, -1.0, 1.0)


def image_to_text_from_cos(c, tau):
    ls = log_softmax(c / tau, axis=-1)
    return -np.mean(np.diagonal(ls, axis1=-2, axis2=-1), axis=-1)


def text_to_image_from_cos(c, tau):
    return image_to_text_from_cos(np.swapaxes(c, -1, -2), tau)


def image_to_text_arrays(v, t, tau):
    return image_to_text_from_cos(cosine_stack(v, t), tau)


def text_to_image_arrays(v, t, tau):
    return text_to_image_from_cos(cosine_stack(v, t), tau)


def consistency_arrays(views, texts):
    # the mean of views stays un-normalized here; differencing first keeps
    # collapsed views (all equal to the text) at an exact zero
    r = (views - texts[..., None, :]).mean(axis=-2)
    return np.mean(np.sqrt(np.sum(r * r, axis=-1)), axis=-1)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def pair_cosine_arrays(embs, p):
    # via the Gram matrix: one batched matmul instead of per-pair gathers
    n = np.sqrt(np.sum(embs * embs, axis=-1))
    g = embs @ np.swapaxes(embs, -1, -2)
    c = g[..., p[:, 0], p[:, 1]] / (n[..., p[:, 0]] * n[..., p[:, 1]])
    return np.clip(c, -1.0, 1.0)


def positive_from_cos(c, cfg):
    sig = np.clip(_sigmoid(c), cfg.sigmoid_clamp, 1 - cfg.sigmoid_clamp)
    return _reduce(-np.log(sig), cfg)


def negative_from_cos(c, cfg):
    sig = np.clip(_sigmoid(c), cfg.sigmoid_clamp, 1 - cfg.sigmoid_clamp)
    terms = np.log(1.0 - sig)
    if cfg.neg_sign == "corrected":
        terms = -terms
    return _reduce(terms, cfg)


def positive_pair_arrays(embs, p, cfg):
    return positive_from_cos(pair_cosine_arrays(embs, p), cfg)


def negative_pair_arrays(embs, p, cfg):
    return negative_from_cos(pair_cosine_arrays(embs, p), cfg)


def _reduce(terms, cfg):
    total = np.sum(terms, axis=-1)
    return total / terms.shape[-1] if cfg.pair_reduction == "mean" else total


def image_to_text_loss(b, cfg=LossConfig()):
    return float(image_to_text_arrays(b.visual, b.textual, cfg.tau)) + 0.0  # no -0.0


def text_to_image_loss(b, cfg=LossConfig()):
    return float(text_to_image_arrays(b.visual, b.textual, cfg.tau)) + 0.0


def contrastive_loss(b, cfg=LossConfig()):
    return (image_to_text_loss(b, cfg) + text_to_image_loss(b, cfg)) / 2


def multiview_consistency_loss(views, texts):
    v = as_views(views)
    t = as_matrix(texts, "texts")
    if v.shape[0] < 1 or v.shape[0] != t.shape[0] or v.shape[2] != t.shape[1]:
        raise DimensionMismatchError(f"views {v.shape} and texts {t.shape} disagree")
    return float(consistency_arrays(v, t))


def pair_array(pairs, universe):
    p = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if p.size and (p.min() < 0 or p.max() >= universe):
        raise PairError(f"pair index out of range for {universe} embeddings")
    return p


def _checked_pairs(embs, pairs, kind):
    e = as_matrix(embs, "embs")
    p = pair_array(pairs, e.shape[0])
    if p.shape[0] == 0:
        raise EmptyInputError(f"{kind} pair list is empty")
    return e, p


def positive_pair_loss(embs, pairs, cfg=LossConfig()):
    e, p = _checked_pairs(embs, pairs, "positive")
    return float(positive_pair_arrays(e, p, cfg))


def negative_pair_loss(embs, pairs, cfg=LossConfig()):
    e, p = _checked_pairs(embs, pairs, "negative")
    return float(negative_pair_arrays(e, p, cfg))


def total_loss(b, views, texts, pairsets, cfg=LossConfig()):
    """Weighted objective over all terms.

    Pair indices in ``pairsets`` address the flattened views, i.e. view ``k``
    of sample ``i`` is embedding ``3 * i + k``. An empty pair list contributes
    zero rather than raising.
    """
    i2t = image_to_text_loss(b, cfg)
    t2i = text_to_image_loss(b, cfg)
    con = (i2t + t2i) / 2
    v = as_views(views)
    cons = multiview_consistency_loss(v, texts)
    embs = v.reshape(-1, v.shape[2])
    pos = positive_pair_loss(embs, pairsets.positives, cfg) if len(pairsets.positives) else 0.0
    neg = negative_pair_loss(embs, pairsets.negatives, cfg) if len(pairsets.negatives) else 0.0
    total = (
        cfg.weight_contrastive * con
        + cfg.weight_consistency * cons
        + cfg.weight_pos * pos
        + cfg.weight_neg * neg
    )
    return LossReport(
        total=total,
        contrastive=con,
        image_to_text=i2t,
        text_to_image=t2i,
        consistency=cons,
        positive=pos,
        negative=neg,
    )


def total_loss_arrays(visual, textual, views, texts, positives, negatives, cfg=LossConfig()):
    """``total_loss`` weighted sum over stacked arrays, without validation.

    ``positives``/``negatives`` are (P, 2) index arrays into the flattened
    views; an empty array contributes zero.
    """
    con = (image_to_text_arrays(visual, textual, cfg.tau) + text_to_image_arrays(visual, textual, cfg.tau)) / 2
    total = cfg.weight_contrastive * con + cfg.weight_consistency * consistency_arrays(views, texts)
    embs = views.reshape(views.shape[:-3] + (-1, views.shape[-1]))
    if len(positives):
        total = total + cfg.weight_pos * positive_pair_arrays(embs, positives, cfg)
    if len(negatives):
        total = total + cfg.weight_neg * negative_pair_arrays(embs, negatives, cfg)
    return total
