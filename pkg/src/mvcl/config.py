"""Flat ``section.key = value`` configuration files.

Lines are ``key = value``; ``#`` starts a comment. Every key must be known,
values are parsed with the type of the key's default, and tuples are written
comma-separated.
"""

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .losses import LossConfig
from .pipeline import OptimizerConfig, SyntheticSpec, TrainConfig


@dataclass(frozen=True)
class SyntheticSection:
    dim_feature: int = 32
    dim_embed: int = 32
    classes: int = 6
    subjects_per_class: int = 20
    view_noise_sigma: float = 0.05
    view_rotation_angle: float = 0.1
    subject_noise_sigma: float = 0.1


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 50
    batch_subjects: int = 16
    optimizer: str = "adam"
    learning_rate: float = 0.01
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: tuple = (64, 64)
    recluster_every: int = 1
    cap_per_anchor: int = 8
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-6
    kmeans_restarts: int = 10
    workers: int = 1
    shards: int = 0
    backend: str = "process"


@dataclass(frozen=True)
class TextSection:
    prompts: str = ""  # empty means the built-in bank
    seed: int = 7


@dataclass(frozen=True)
class EvalSection:
    holdout_per_class: int = 5


@dataclass(frozen=True)
class BenchSection:
    workers: tuple = (1, 2, 3)
    batches: tuple = (8, 16, 32, 64, 128, 256)
    repeats: int = 5
    subjects_per_class: int = 64


@dataclass(frozen=True)
class PathsSection:
    out: str = "out"
    data: str = ""  # empty means the output directory
    params: str = ""  # empty means <out>/params.json


@dataclass(frozen=True)
class CliConfig:
    seed: int = 0
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossConfig = field(default_factory=LossConfig)
    text: TextSection = field(default_factory=TextSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def synthetic_spec(self):
        return SyntheticSpec(**{f.name: getattr(self.synthetic, f.name) for f in fields(SyntheticSection)}, seed=self.seed)

    def train_config(self):
        t = self.train
        opt = OptimizerConfig(t.optimizer, t.learning_rate, t.schedule, t.beta1, t.beta2, t.adam_eps)
        return TrainConfig(
            epochs=t.epochs,
            batch_subjects=t.batch_subjects,
            optimizer=opt,
            loss=self.loss,
            hidden=tuple(t.hidden),
            recluster_every=t.recluster_every,
            cap_per_anchor=t.cap_per_anchor,
            kmeans_iters=t.kmeans_iters,
            kmeans_tol=t.kmeans_tol,
            kmeans_restarts=t.kmeans_restarts,
            workers=t.workers,
            shards=t.shards,
            backend=t.backend,
            seed=self.seed,
        )


def _sections():
    return {f.name: f for f in fields(CliConfig) if f.name != "seed"}


def _parse_value(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _format_value(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def apply_overrides(cfg, pairs):
    """Return ``cfg`` with ``[(key, raw_value), ...]`` applied; unknown keys raise ConfigError."""
    sections = {name: getattr(cfg, name) for name in _sections()}
    seed = cfg.seed
    for key, raw in pairs:
        if key == "seed":
            seed = _parse_value(key, raw, 0)
            continue
        sec, _, name = key.partition(".")
        if sec not in sections or not name:
            raise ConfigError(f"unknown config key {key!r}")
        current = sections[sec]
        if name not in {f.name for f in fields(current)}:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            sections[sec] = replace(current, **{name: _parse_value(key, raw, getattr(current, name))})
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return CliConfig(seed=seed, **sections)


def parse_config_text(text, base=None):
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        pairs.append((key.strip(), raw))
    return apply_overrides(base or CliConfig(), pairs)


def load_config(path, base=None):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, base)


def dump_config(cfg):
    lines = [f"seed = {cfg.seed}"]
    for name in _sections():
        sec = getattr(cfg, name)
        for f in fields(sec):
            lines.append(f"{name}.{f.name} = {_format_value(getattr(sec, f.name))}")
    return "\n".join(lines) + "\n"
