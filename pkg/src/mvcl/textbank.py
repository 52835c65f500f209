"""Emotion prompt bank, a hashing text encoder, class anchors and embedding files.

Embedding file layout (little-endian)::

    b"MVLM" | version u32 = 1 | count u64 | dim u64 | count x (id u64, dim x f64)
"""

import re
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    BadVersionError,
    ConfigError,
    DataFormatError,
    DimensionMismatchError,
    EmptyInputError,
    TruncatedError,
    ZeroNormError,
)
from .linalg import EPS, Rng, l2_normalize

DEFAULT_CLASSES = ("Happy", "Angry", "Disgust", "Fear", "Sad", "Surprise")
N_BUCKETS = 4096
MAGIC = b"MVLM"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")

_DEFAULT_PROMPTS = {
    "Happy": ["a smiling face", "a happy individual", "a person smiling", "a joyful expression with raised cheeks"],
    "Angry": ["an angry person", "a furious face with lowered brows", "a scowling individual", "a glaring expression"],
    "Disgust": ["a disgusted face", "a wrinkled nose of revulsion", "a person looking repulsed", "a grimace of distaste"],
    "Fear": ["a fearful face", "a frightened person with wide eyes", "a terrified expression", "a scared individual"],
    "Sad": ["a sad face", "a person looking unhappy", "a sorrowful expression with drooping lips", "a crying individual"],
    "Surprise": ["a surprised face", "an astonished person with raised eyebrows", "a shocked expression", "an open mouth of amazement"],
}


@dataclass(frozen=True)
class PromptBank:
    classes: tuple
    prompts: dict

    def __post_init__(self):
        classes = tuple(self.classes)
        if len(set(classes)) != len(classes):
            raise ConfigError("class tokens must be unique")
        for c in classes:
            if not self.prompts.get(c):
                raise ConfigError(f"class {c!r} has no prompts")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "prompts", {c: list(self.prompts[c]) for c in classes})


@dataclass(frozen=True)
class TextAnchorSet:
    classes: tuple
    vectors: np.ndarray

    def anchor(self, cls):
        return self.vectors[self.classes.index(cls)]


def default_prompt_bank():
    return PromptBank(DEFAULT_CLASSES, {c: list(_DEFAULT_PROMPTS[c]) for c in DEFAULT_CLASSES})


def load_prompt_bank(path):
    """Read ``ClassToken<TAB>prompt`` lines; classes keep first-seen order."""
    classes, prompts = [], {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ConfigError(f"{path}:{lineno}: expected ClassToken<TAB>prompt")
        cls, text = line.split("\t", 1)
        cls, text = cls.strip(), text.strip()
        if not cls or not text:
            raise ConfigError(f"{path}:{lineno}: empty class or prompt")
        if cls not in prompts:
            classes.append(cls)
            prompts[cls] = []
        prompts[cls].append(text)
    return PromptBank(tuple(classes), prompts)


def tokenize(text):
    return re.findall(r"[^\W_]+", text.lower())


def fnv1a_64(data):
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@lru_cache(maxsize=16)
def _projection(dim, seed):
    m = Rng(seed).normal((N_BUCKETS, dim))
    m.flags.writeable = False
    return m


def bucket_counts(text):
    counts = np.zeros(N_BUCKETS)
    for tok in tokenize(text):
        counts[fnv1a_64(tok.encode("utf-8")) % N_BUCKETS] += 1.0
    return counts


def encode_prompt(text, dim, seed):
    if not text or not text.strip():
        raise EmptyInputError("prompt text is empty")
    if dim < 2:
        raise DimensionMismatchError(f"dim must be >= 2, got {dim}")
    counts = bucket_counts(text)
    if not counts.any():
        raise EmptyInputError(f"prompt {text!r} has no tokens")
    return l2_normalize(counts @ _projection(dim, seed))


def build_anchors(bank, dim, seed):
    vecs = []
    for cls in bank.classes:
        mean = np.mean([encode_prompt(p, dim, seed) for p in bank.prompts[cls]], axis=0)
        if np.linalg.norm(mean) <= EPS:
            raise ZeroNormError(f"prompt embeddings of {cls!r} cancel out")
        vecs.append(l2_normalize(mean))
    return TextAnchorSet(bank.classes, np.array(vecs))


def write_embeddings(path, ids, vectors, dim=None):
    vectors = np.asarray(vectors, dtype="<f8")
    ids = np.asarray(ids, dtype="<u8")
    if vectors.size == 0 and (vectors.ndim != 2 or dim is not None):
        vectors = vectors.reshape(0, dim or 0)
    if vectors.ndim != 2 or vectors.shape[0] != ids.shape[0]:
        raise DimensionMismatchError(f"{ids.shape[0]} ids for vectors of shape {vectors.shape}")
    count, d = vectors.shape
    rec = np.empty(count, dtype=[("id", "<u8"), ("v", "<f8", (d,))])
    rec["id"] = ids
    rec["v"] = vectors
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, count, d))
        f.write(rec.tobytes())


def read_embeddings(path):
    """Return ``(ids, vectors)`` from an embedding file."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("bad magic", offset=0)
    if len(data) < _HEADER.size:
        raise TruncatedError("truncated header", offset=len(data))
    _, version, count, d = _HEADER.unpack_from(data)
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}", offset=4)
    expected = _HEADER.size + count * (8 + 8 * d)
    if len(data) < expected:
        raise TruncatedError(f"truncated payload: expected {expected} bytes, got {len(data)}", offset=len(data))
    if len(data) > expected:
        raise DataFormatError(f"{len(data) - expected} trailing bytes", offset=expected)
    rec = np.frombuffer(data, dtype=[("id", "<u8"), ("v", "<f8", (d,))], count=count, offset=_HEADER.size)
    return rec["id"].astype(np.uint64), rec["v"].astype(np.float64).reshape(count, d)
