"""
Graph convolutional encoder with an analytic backward pass.

Each layer computes Z = (Â H) W (+ b). Hidden layers apply relu; the last
layer is linear so the embeddings keep signed components for cosine scoring.

Checkpoint layout (GCK1, little-endian):
    b"GCK1" | u32 layer count | per layer: u32 rows, u32 cols, f64 values |
    u64 checksum of everything between the magic and the checksum
A sidecar ``<file>.json`` echoes the GcnConfig. With ``bias`` enabled each
layer's weight matrix is followed by its 1 x out bias row, written as a
matrix of its own (rows, cols, values); the layer count does not include
these rows.
"""

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from linalg import DenseMatrix, ShapeMismatchError, SparseMatrix, matmul, relu, relu_mask, spmm

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GCK1"


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or does not match its config."""


@dataclass(frozen=True)
class GcnConfig:
    in_dim: int = 512
    hidden_dims: Tuple[int, ...] = (256,)
    out_dim: int = 128
    seed: int = 0
    bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if min((self.in_dim, self.out_dim) + self.hidden_dims) < 1:
            raise ValueError(f"all GCN dimensions must be >= 1, got {self}")

    @property
    def layer_dims(self) -> List[Tuple[int, int]]:
        dims = (self.in_dim,) + self.hidden_dims + (self.out_dim,)
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class GcnModel:
    config: GcnConfig
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        shapes = self.config.layer_dims
        if len(self.weights) != len(shapes):
            raise ShapeMismatchError(f"{len(self.weights)} weight matrices for {len(shapes)} layers")
        for i, (w, shape) in enumerate(zip(self.weights, shapes)):
            if w.shape != shape:
                raise ShapeMismatchError(f"layer {i}: weight shape {w.shape}, config expects {shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"layer {i}: non-finite weights")
        if self.config.bias and len(self.biases) != len(shapes):
            raise ShapeMismatchError(f"{len(self.biases)} bias vectors for {len(shapes)} layers")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> List[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def with_parameters(self, params: List[np.ndarray]) -> "GcnModel":
        n = self.n_layers
        return GcnModel(self.config, tuple(params[:n]), tuple(params[n:]))


@dataclass
class ForwardCache:
    x: DenseMatrix
    a_hat: SparseMatrix
    propagated: List[DenseMatrix] = field(default_factory=list)
    pre_activations: List[DenseMatrix] = field(default_factory=list)
    activations: List[DenseMatrix] = field(default_factory=list)


@dataclass(frozen=True)
class GcnGradients:
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...] = ()

    def parameters(self) -> List[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def __add__(self, other: "GcnGradients") -> "GcnGradients":
        if len(self.weights) != len(other.weights) or len(self.biases) != len(other.biases):
            raise ShapeMismatchError("cannot add gradients of differently shaped models")
        return GcnGradients(tuple(a + b for a, b in zip(self.weights, other.weights)),
                            tuple(a + b for a, b in zip(self.biases, other.biases)))


def init_weights(config: GcnConfig) -> GcnModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(config.seed)
    weights = []
    for fan_in, fan_out in config.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
    biases = tuple(np.zeros(out) for _, out in config.layer_dims) if config.bias else ()
    return GcnModel(config, tuple(weights), biases)


def forward(model: GcnModel, a_hat: SparseMatrix, x: DenseMatrix) -> Tuple[DenseMatrix, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if a_hat.shape[0] != a_hat.shape[1] or a_hat.shape[1] != x.shape[0]:
        raise ShapeMismatchError(f"propagation matrix {a_hat.shape} does not match {x.shape[0]} feature rows")
    if x.shape[1] != model.config.in_dim:
        raise ShapeMismatchError(f"features have dim {x.shape[1]}, model expects {model.config.in_dim}")

    cache = ForwardCache(x=x, a_hat=a_hat)
    h = x
    last = model.n_layers - 1
    for i, w in enumerate(model.weights):
        p = spmm(a_hat, h)
        z = matmul(p, w)
        if model.biases:
            z = z + model.biases[i]
        h = z if i == last else relu(z)
        cache.propagated.append(p)
        cache.pre_activations.append(z)
        cache.activations.append(h)
    return h, cache


def backward(model: GcnModel, cache: ForwardCache, grad_h: DenseMatrix) -> GcnGradients:
    """Gradients of sum(grad_h * H) with respect to every weight (and bias).

    Â is symmetric, so Âᵀ G = Â G.
    """
    if not cache.activations or grad_h.shape != cache.activations[-1].shape:
        raise ShapeMismatchError(f"grad_h shape {grad_h.shape} does not match the forward output")
    g = np.asarray(grad_h, dtype=np.float64)
    grad_w: List[Optional[np.ndarray]] = [None] * model.n_layers
    grad_b: List[Optional[np.ndarray]] = [None] * model.n_layers
    for i in reversed(range(model.n_layers)):
        if i != model.n_layers - 1:
            g = g * relu_mask(cache.pre_activations[i])
        grad_w[i] = matmul(cache.propagated[i].T, g)
        if model.biases:
            grad_b[i] = g.sum(axis=0)
        if i > 0:
            g = spmm(cache.a_hat, matmul(g, model.weights[i].T))
    return GcnGradients(tuple(grad_w), tuple(grad_b) if model.biases else ())


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_checkpoint(model: GcnModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    matrices: List[np.ndarray] = []
    for i, w in enumerate(model.weights):
        matrices.append(w)
        if model.biases:
            matrices.append(model.biases[i].reshape(1, -1))
    chunks = [struct.pack("<I", model.n_layers)]
    for m in matrices:
        chunks.append(struct.pack("<II", *m.shape))
        chunks.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
    payload = b"".join(chunks)
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(payload)
        f.write(struct.pack("<Q", _checksum(payload)))
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(asdict(model.config), sort_keys=True) + '\n', encoding='utf-8')
    logger.info("checkpoint written: %s", path)
    return path


def load_checkpoint(path, config: Optional[GcnConfig] = None) -> GcnModel:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated checkpoint")
    payload, (stored,) = raw[4:-8], struct.unpack("<Q", raw[-8:])
    if _checksum(payload) != stored:
        raise CheckpointError(f"{path}: checksum mismatch")

    (count,), offset = struct.unpack_from("<I", payload), 4
    matrices = []
    # bias rows, when present, follow each weight matrix
    while offset < len(payload) and len(matrices) < 2 * count:
        k = len(matrices)
        if offset + 8 > len(payload):
            raise CheckpointError(f"{path}: matrix {k} header past end of payload")
        rows, cols = struct.unpack_from("<II", payload, offset)
        offset += 8
        size = rows * cols * 8
        if offset + size > len(payload):
            raise CheckpointError(f"{path}: matrix {k} declares {rows}x{cols} but the payload is short")
        matrices.append(np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=offset)
                        .reshape(rows, cols).astype(np.float64))
        offset += size
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes after {len(matrices)} matrices")
    if count == 0 or len(matrices) not in (count, 2 * count):
        raise CheckpointError(f"{path}: {len(matrices)} matrices for {count} layers")
    has_bias = len(matrices) == 2 * count
    if has_bias:
        weights, biases = matrices[0::2], [b.ravel() for b in matrices[1::2]]
    else:
        weights, biases = matrices, []

    if config is None:
        sidecar = path.with_name(path.name + ".json")
        if sidecar.exists():
            data = json.loads(sidecar.read_text(encoding='utf-8'))
            data["hidden_dims"] = tuple(data["hidden_dims"])
            config = GcnConfig(**data)
    if config is None:
        config = GcnConfig(in_dim=weights[0].shape[0], hidden_dims=tuple(w.shape[1] for w in weights[:-1]),
                           out_dim=weights[-1].shape[1], bias=has_bias)
    elif config.bias != has_bias:
        raise CheckpointError(f"{path}: config bias={config.bias} but the checkpoint "
                              f"{'has' if has_bias else 'has no'} bias rows")

    for i in range(1, len(weights)):
        if weights[i].shape[0] != weights[i - 1].shape[1]:
            raise CheckpointError(f"{path}: layer {i} expects {weights[i].shape[0]} inputs, "
                                  f"layer {i - 1} produces {weights[i - 1].shape[1]}")
    try:
        return GcnModel(config, tuple(weights), tuple(biases))
    except (ShapeMismatchError, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from e
