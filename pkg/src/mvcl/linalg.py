"""Dense vector primitives, similarity kernels and the seeded generator.

Everything works on float64 numpy arrays. An "embedding" is a 1-D array of
finite values with at least two entries; batches of embeddings are 2-D arrays
with one embedding per row.
"""

import numpy as np

from .errors import DimensionMismatchError, EmptyInputError, NonFiniteError, ZeroNormError

EPS = 1e-12


def as_embedding(v, name="vector"):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise DimensionMismatchError(f"{name} must have dim >= 2, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return arr


def as_matrix(m, name="matrix"):
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return arr


def cosine_sim(a, b):
    a = as_embedding(a, "a")
    b = as_embedding(b, "b")
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na <= EPS or nb <= EPS:
        raise ZeroNormError("cosine of a zero-norm vector is undefined")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


def row_norms(m):
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def cosine_matrix(a, b):
    """Pairwise cosines between the rows of ``a`` and the rows of ``b``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    na = row_norms(a)
    nb = row_norms(b)
    if np.any(na <= EPS) or np.any(nb <= EPS):
        raise ZeroNormError("cosine of a zero-norm vector is undefined")
    c = (a @ b.T) / np.outer(na, nb)
    return np.clip(c, -1.0, 1.0)


def log_softmax_row(scores):
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] == 0:
        raise EmptyInputError("log_softmax_row needs a non-empty 1-D score vector")
    if not np.all(np.isfinite(s)):
        raise NonFiniteError("scores must be finite")
    return log_softmax(s[None, :], axis=1)[0]


def log_softmax(s, axis=1):
    """Max-shifted log-softmax along ``axis``.

    One copy of the max term (exactly 1 after shifting) is taken out of the
    sum and restored through log1p, so a nearly saturated softmax keeps its
    small log-probabilities to full relative precision.
    """
    m = np.max(s, axis=axis, keepdims=True)
    shifted = s - m
    e = np.exp(shifted)
    np.put_along_axis(e, np.argmax(s, axis=axis, keepdims=True), 0.0, axis=axis)
    return shifted - np.log1p(np.sum(e, axis=axis, keepdims=True))


def l2_normalize(v):
    v = as_embedding(v)
    n = np.sqrt(np.dot(v, v))
    if n <= EPS:
        raise ZeroNormError("cannot normalize a zero-norm vector")
    return v / n


def l2_normalize_rows(m):
    m = as_matrix(m)
    n = row_norms(m)
    if np.any(n <= EPS):
        raise ZeroNormError("cannot normalize a zero-norm row")
    return m / n[:, None]


def mix(seed, *keys):
    """Derive an independent 63-bit seed from a master seed and integer keys."""
    # fixed-width words plus a trailing length, so (s, 2) and (s, 2, 0) stay distinct
    words = []
    for v in (seed, *keys):
        v = int(v) & (2**64 - 1)
        words += [v & 0xFFFFFFFF, v >> 32]
    words.append(len(words))
    ss = np.random.SeedSequence(np.array(words, dtype=np.uint32))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


class Rng:
    """Seeded generator (PCG64). Not safe to share between concurrent callers."""

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed & (2**64 - 1)))

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size)

    def uniform(self, size=None):
        return self._gen.random(size)

    def integers(self, high, size=None):
        return self._gen.integers(0, high, size=size)

    def choice(self, n, k):
        """``k`` distinct indices from ``range(n)``, uniformly without replacement."""
        return self._gen.choice(n, size=k, replace=False)

    def permutation(self, n):
        return self._gen.permutation(n)

    def spawn_seed(self):
        return int(self._gen.integers(0, 2**63 - 1))
