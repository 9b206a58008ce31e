"""
Flat ``key = value`` run configuration shared by every CLI subcommand.

Precedence: built-in defaults, then the ``AFFINITY_SEED`` environment
variable (seed only), then the config file, then explicit flags.
"""

import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Tuple

from features import SyntheticSpec, SyntheticSpecError
from gcn import GcnConfig
from loss import LossConfig
from train import TrainConfig

logger = logging.getLogger(__name__)

SEED_ENV = "AFFINITY_SEED"
EFFECTIVE_CONFIG_FILE = "effective_config.txt"


class ConfigError(ValueError):
    """Unknown key, unparsable value or a value its owning module rejects."""


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _path(text: str) -> Optional[str]:
    return text.strip() or None


def _opt(parse: Callable, default, help: str):
    return field(default=default, metadata={"parse": parse, "help": help})


@dataclass(frozen=True)
class RunConfig:
    # paths; unset inputs resolve inside ``out``
    out: str = _opt(str, "out", "output directory; also where inputs are looked up")
    features: Optional[str] = _opt(_path, None, "AFM1 feature file")
    annotations: Optional[str] = _opt(_path, None, "annotation ranks (JSON lines)")
    scores: Optional[str] = _opt(_path, None, "soft score table (JSON)")
    ground_truth: Optional[str] = _opt(_path, None, "ground truth map (JSON)")
    split: Optional[str] = _opt(_path, None, "dataset split (JSON)")
    graph: Optional[str] = _opt(_path, None, "graph export directory")
    checkpoint: Optional[str] = _opt(_path, None, "GCK1 checkpoint")

    seed: int = _opt(int, 0, "seed for every randomized step")

    # annotations and split
    min_opinions: int = _opt(int, 1, "non-zero ranks a receptacle needs to be scored")
    split_ratios: Tuple[int, ...] = _opt(_ints, (15, 5, 10), "train,val,test ratio")
    room_features: str = _opt(str, "file", "room node features: file, onehot or random")

    # synthetic data
    categories: int = _opt(int, 20, "synthetic categories")
    rooms: int = _opt(int, 4, "synthetic rooms")
    images: int = _opt(int, 30, "synthetic images per category")
    dim: int = _opt(int, 32, "synthetic feature dimension")
    separation: float = _opt(float, 4.0, "synthetic cluster separation")
    noise: float = _opt(float, 0.3, "synthetic noise sigma")
    synthetic_room_features: str = _opt(str, "onehot", "synthetic room features: onehot or random")

    # model
    hidden_dims: Tuple[int, ...] = _opt(_ints, (256,), "comma-separated hidden layer sizes")
    out_dim: int = _opt(int, 128, "embedding dimension")
    bias: bool = _opt(_bool, False, "add a bias to every GCN layer")

    # training
    steps: int = _opt(int, 2000, "training steps")
    learning_rate: float = _opt(float, 1e-3, "Adam learning rate")
    schedule: str = _opt(str, "constant", "learning rate schedule: constant or step")
    decay_every: int = _opt(int, 500, "steps between step-schedule decays")
    decay_gamma: float = _opt(float, 0.5, "step-schedule decay factor")
    eval_every: int = _opt(int, 100, "steps between validation evaluations (0: final only)")
    checkpoint_every: int = _opt(int, 0, "steps between checkpoints (0: final only)")
    temperature: float = _opt(float, 0.01, "loss temperature")
    negatives: int = _opt(int, 10, "negatives per sample")
    samples: int = _opt(int, 32, "samples per step")
    include_positive: bool = _opt(_bool, False, "add the positive term to the loss denominator")
    edge_weights: str = _opt(str, "raw", "positive edge weight in the loss: raw, normalized or off")
    anchor_embedding: str = _opt(str, "selfedges", "room anchor embeddings: selfedges or graph")

    # evaluation
    temperatures: Tuple[float, ...] = _opt(_floats, (0.01, 0.1, 1.0), "tune-temp candidates")
    eval_split: str = _opt(str, "test", "split part to evaluate: train, val or test")
    hit_ks: Tuple[int, ...] = _opt(_ints, (1, 3, 5), "k values for the top-k hit ratio")
    top_k_relevant: int = _opt(int, 0, "score against the top-k annotated rooms (0: ground truth room only)")
    untuned: bool = _opt(_bool, False, "score raw features instead of GCN embeddings")

    @classmethod
    def keys(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def help_for(cls, key: str) -> str:
        return {f.name: f.metadata["help"] for f in fields(cls)}[key]

    @classmethod
    def from_strings(cls, values: Mapping[str, str], base: Optional["RunConfig"] = None) -> "RunConfig":
        base = base if base is not None else cls()
        parsers = {f.name: f.metadata["parse"] for f in fields(cls)}
        unknown = sorted(set(values) - set(parsers))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        parsed = {}
        for key, text in values.items():
            try:
                parsed[key] = parsers[key](text)
            except ValueError as e:
                raise ConfigError(f"bad value for {key!r}: {text!r} ({e})") from e
        return replace(base, **parsed)

    @classmethod
    def resolve(cls, file_path=None, flags: Optional[Mapping[str, str]] = None,
                env: Optional[Mapping[str, str]] = None) -> "RunConfig":
        env = os.environ if env is None else env
        config = cls()
        if env.get(SEED_ENV):
            config = cls.from_strings({"seed": env[SEED_ENV]}, config)
        if file_path is not None:
            config = cls.from_strings(read_config_file(file_path), config)
        if flags:
            config = cls.from_strings(flags, config)
        return config

    # owning-module configs; their validation errors surface as ConfigError

    def gcn_config(self, in_dim: int) -> GcnConfig:
        try:
            return GcnConfig(in_dim=in_dim, hidden_dims=self.hidden_dims, out_dim=self.out_dim,
                             seed=self.seed, bias=self.bias)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def loss_config(self) -> LossConfig:
        try:
            return LossConfig(self.temperature, self.negatives, self.samples, self.include_positive,
                              edge_weights=self.edge_weights)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(steps=self.steps, learning_rate=self.learning_rate, schedule=self.schedule,
                               decay_every=self.decay_every, decay_gamma=self.decay_gamma,
                               loss=self.loss_config(), seed=self.seed, eval_every=self.eval_every,
                               checkpoint_every=self.checkpoint_every, anchor_embedding=self.anchor_embedding)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def synthetic_spec(self) -> SyntheticSpec:
        try:
            return SyntheticSpec(n_categories=self.categories, n_rooms=self.rooms,
                                 images_per_category=self.images, dim=self.dim,
                                 cluster_separation=self.separation, noise_sigma=self.noise,
                                 seed=self.seed, room_features=self.synthetic_room_features)
        except SyntheticSpecError as e:
            raise ConfigError(str(e)) from e

    def path(self, key: str, default_name: str) -> Path:
        """Configured path for ``key``, or ``default_name`` inside ``out``."""
        value = getattr(self, key)
        return Path(value) if value else Path(self.out) / default_name

    def to_strings(self) -> Dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                out[f.name] = ""
            elif isinstance(value, bool):
                out[f.name] = "true" if value else "false"
            elif isinstance(value, tuple):
                out[f.name] = ",".join(repr(v) for v in value)
            else:
                out[f.name] = repr(value) if isinstance(value, float) else str(value)
        return out

    def echo(self, out_dir=None) -> Path:
        """Write the effective config, keys sorted, to ``<out>/effective_config.txt``."""
        out_dir = Path(out_dir if out_dir is not None else self.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / EFFECTIVE_CONFIG_FILE
        lines = [f"{k} = {v}\n" for k, v in sorted(self.to_strings().items())]
        path.write_text("".join(lines), encoding="utf-8")
        return path


def read_config_file(path) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values: Dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    logger.debug("read %d config values from %s", len(values), path)
    return values
