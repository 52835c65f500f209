"""Positive and negative pair construction over labeled multiview embeddings."""

from dataclasses import dataclass, field

import numpy as np

from .errors import PairError
from .linalg import Rng, mix
from .losses import VIEW_ORDER

# same-subject pairings, as slots into VIEW_ORDER: (front, right), (right, left), (front, left)
POSITIVE_VIEW_PAIRS = ((0, 1), (1, 2), (0, 2))


@dataclass(frozen=True)
class LabeledView:
    subject_id: int
    view: str
    label: int
    index: int

    def __post_init__(self):
        if self.view not in VIEW_ORDER:
            raise PairError(f"unknown view {self.view!r}")


def labeled_views(subject_ids, labels):
    """Views for subjects in the given order; view ``k`` of position ``i`` gets index ``3*i + k``."""
    return [
        LabeledView(int(sid), view, int(lab), 3 * i + k)
        for i, (sid, lab) in enumerate(zip(subject_ids, labels))
        for k, view in enumerate(VIEW_ORDER)
    ]


def _canon(a, b):
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class PairSets:
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)
    universe: int = 0

    def __post_init__(self):
        pos = [tuple(int(i) for i in p) for p in self.positives]
        neg = [tuple(int(i) for i in p) for p in self.negatives]
        for a, b in pos + neg:
            if a == b:
                raise PairError(f"self-pair ({a}, {b})")
            if not (0 <= a < self.universe and 0 <= b < self.universe):
                raise PairError(f"pair ({a}, {b}) outside universe of {self.universe}")
        if set(map(lambda p: _canon(*p), pos)) & set(map(lambda p: _canon(*p), neg)):
            raise PairError("a pair is both positive and negative")
        object.__setattr__(self, "positives", pos)
        object.__setattr__(self, "negatives", neg)


def _by_subject(views):
    subjects = {}
    for lv in views:
        slots = subjects.setdefault(lv.subject_id, {})
        if lv.view in slots:
            raise PairError(f"subject {lv.subject_id} has a duplicate {lv.view} view")
        slots[lv.view] = lv
    for sid, slots in subjects.items():
        if len(slots) != 3:
            missing = sorted(set(VIEW_ORDER) - set(slots))
            raise PairError(f"subject {sid} is missing views {missing}")
    return subjects


def build_positive_pairs(views):
    subjects = _by_subject(views)
    pairs = []
    for sid in sorted(subjects):
        slots = subjects[sid]
        for a, b in POSITIVE_VIEW_PAIRS:
            pairs.append(_canon(slots[VIEW_ORDER[a]].index, slots[VIEW_ORDER[b]].index))
    return pairs


def build_negative_pairs(views, cap_per_anchor=8, rng=None):
    """Cross-label pairs; each anchor view keeps up to ``cap_per_anchor`` partners.

    ``cap_per_anchor=None`` keeps every partner. Partners of anchor ``a`` are
    drawn with a generator seeded from ``mix(master, a)``, where ``master``
    is one draw from ``rng``, so anchors can be sampled independently.
    Returns canonical (smaller index first) pairs, deduplicated and sorted.
    """
    if cap_per_anchor is not None and cap_per_anchor < 1:
        raise PairError("cap_per_anchor must be >= 1")
    views = sorted(views, key=lambda lv: lv.index)
    labels = np.array([lv.label for lv in views])
    if len(np.unique(labels)) < 2:
        raise PairError("negative pairs need at least two distinct labels")
    idx = np.array([lv.index for lv in views])
    master = None
    if cap_per_anchor is not None:
        master = (rng if rng is not None else Rng(0)).spawn_seed()
    out = set()
    for pos, anchor in enumerate(views):
        partners = idx[labels != anchor.label]
        if cap_per_anchor is not None and partners.size > cap_per_anchor:
            pick = Rng(mix(master, anchor.index)).choice(partners.size, cap_per_anchor)
            partners = partners[np.sort(pick)]
        for p in partners:
            out.add(_canon(anchor.index, int(p)))
    return sorted(out)


def _subsample(pairs, cap, rng):
    if cap >= len(pairs):
        return list(pairs)
    keep = np.sort(rng.choice(len(pairs), cap))
    return [pairs[i] for i in keep]


def sample_pairs(ps, max_pos, max_neg, rng):
    if max_pos < 1 or max_neg < 1:
        raise PairError("max_pos and max_neg must be >= 1")
    return PairSets(_subsample(ps.positives, max_pos, rng), _subsample(ps.negatives, max_neg, rng), ps.universe)
