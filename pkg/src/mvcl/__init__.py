"""Multiview contrastive learning of expression embeddings against text anchors.

numpy-only reference implementation: losses and their analytic gradients,
pseudo-labelling by k-means, a small MLP encoder, deterministic data-parallel
training, and the ``mvcl`` command line.
"""

from .errors import (
    ConfigError,
    DataFormatError,
    DimensionMismatchError,
    EmptyInputError,
    MvclError,
    NonFiniteError,
    PairError,
    WorkerError,
    ZeroNormError,
)
from .losses import Batch, LossConfig, LossReport, MultiviewEmbedding, total_loss
from .pipeline import SyntheticSpec, TrainConfig, generate_synthetic, infer, train

__version__ = "0.1.0"
