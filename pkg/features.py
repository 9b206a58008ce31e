"""
Node feature matrices, dataset splits and synthetic feature datasets.

Feature file layout (AFM1, little-endian):
    b"AFM1" | u32 n_rows | u32 dim | n_rows*dim f32 values (row-major)
A sidecar ``<file>.json`` holds ``{"rows": [name_0, name_1, ...]}``.

Object-image rows are named ``<category>/<image index>``; room rows carry
the plain room name.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from annotations import GroundTruthMap, PairScore, SoftScoreTable, ground_truth_map

logger = logging.getLogger(__name__)

MAGIC = b"AFM1"
_HEADER = struct.Struct("<4sII")

ROOM_FEATURE_MODES = ("onehot", "random", "file")


class FeatureFileError(ValueError):
    """A feature file could not be parsed."""


class ShapeMismatchError(FeatureFileError):
    """Payload size or manifest length disagrees with the declared shape."""


class NonFiniteError(FeatureFileError):
    """A feature row contains NaN or infinity."""


class SplitError(ValueError):
    """Dataset split cannot be produced from the given sizes."""


class SyntheticSpecError(ValueError):
    """Invalid synthetic dataset parameters."""


def image_node_name(category: str, index: int) -> str:
    return f"{category}/{index}"


def parse_image_node_name(name: str) -> Tuple[str, int]:
    category, _, index = name.rpartition("/")
    return category, int(index)


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ShapeMismatchError(f"feature data must be 2-D, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        names = tuple(self.names) if self.names else tuple(str(i) for i in range(data.shape[0]))
        if len(names) != data.shape[0]:
            raise ShapeMismatchError(f"{len(names)} row names for {data.shape[0]} rows")
        object.__setattr__(self, "names", names)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def index(self) -> Dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}

    def select(self, names: Sequence[str]) -> "FeatureMatrix":
        """Rows in the given order; unknown names raise ``KeyError``."""
        lookup = self.index()
        missing = [n for n in names if n not in lookup]
        if missing:
            raise KeyError(f"feature rows missing: {missing[:5]}")
        rows = [lookup[n] for n in names]
        return FeatureMatrix(self.data[rows], tuple(names))

    def stack(self, other: "FeatureMatrix") -> "FeatureMatrix":
        if other.dim != self.dim:
            raise ShapeMismatchError(f"cannot stack dim {self.dim} with dim {other.dim}")
        return FeatureMatrix(np.vstack([self.data, other.data]), self.names + other.names)


def payload_checksum(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def save_features(fm: FeatureMatrix, path) -> None:
    path = Path(path)
    payload = fm.data.astype("<f4").tobytes()
    with open(path, 'wb') as f:
        f.write(_HEADER.pack(MAGIC, fm.n_rows, fm.dim))
        f.write(payload)
    manifest = {"rows": list(fm.names)}
    manifest_path(path).write_text(json.dumps(manifest, ensure_ascii=False) + '\n', encoding='utf-8')
    logger.debug("wrote %s (%dx%d, sha256 %s)", path, fm.n_rows, fm.dim, payload_checksum(payload)[:16])


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_features(path) -> FeatureMatrix:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"{path}: file too short for AFM1 header")
    magic, n_rows, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    payload = raw[_HEADER.size:]
    expected = n_rows * dim * 4
    if len(payload) != expected:
        raise ShapeMismatchError(
            f"{path}: header declares {n_rows}x{dim} ({expected} bytes), payload has {len(payload)} bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape(n_rows, dim).astype(np.float64)
    bad_rows = np.flatnonzero(~np.all(np.isfinite(data), axis=1))
    if bad_rows.size:
        raise NonFiniteError(f"{path}: row {int(bad_rows[0])} contains non-finite values")

    names: Tuple[str, ...] = ()
    sidecar = manifest_path(path)
    if sidecar.exists():
        names = tuple(json.loads(sidecar.read_text(encoding='utf-8'))["rows"])
        if len(names) != n_rows:
            raise ShapeMismatchError(f"{sidecar}: {len(names)} names for {n_rows} rows")
    logger.info("loaded features %s: %dx%d, payload sha256 %s", path, n_rows, dim, payload_checksum(payload))
    return FeatureMatrix(data, names)


def room_features(rooms: Sequence[str], dim: int, mode: str = "onehot", seed: int = 0,
                  source: Optional[FeatureMatrix] = None) -> FeatureMatrix:
    """Room node features: one-hot padded to ``dim``, seeded random unit vectors, or rows of ``source``."""
    rooms = list(rooms)
    if mode == "onehot":
        if dim < len(rooms):
            raise SyntheticSpecError(f"one-hot room features need dim >= {len(rooms)} rooms, got {dim}")
        data = np.zeros((len(rooms), dim))
        data[np.arange(len(rooms)), np.arange(len(rooms))] = 1.0
    elif mode == "random":
        rng = np.random.default_rng(seed)
        data = rng.standard_normal((len(rooms), dim))
        data /= np.linalg.norm(data, axis=1, keepdims=True)
        data = data.astype(np.float32).astype(np.float64)
    elif mode == "file":
        if source is None:
            raise FeatureFileError("room feature mode 'file' needs a source feature matrix")
        return source.select(rooms)
    else:
        raise ValueError(f"unknown room feature mode {mode!r}; use one of {ROOM_FEATURE_MODES}")
    return FeatureMatrix(data, tuple(rooms))


@dataclass(frozen=True)
class DatasetSplit:
    parts: Dict[str, Tuple[Tuple[int, ...], Tuple[int, ...], Tuple[int, ...]]]

    @property
    def categories(self) -> List[str]:
        return sorted(self.parts)

    def train(self, category: str) -> Tuple[int, ...]:
        return self.parts[category][0]

    def val(self, category: str) -> Tuple[int, ...]:
        return self.parts[category][1]

    def test(self, category: str) -> Tuple[int, ...]:
        return self.parts[category][2]

    def names(self, which: str) -> List[str]:
        """Image node names of one part ('train', 'val' or 'test') in canonical order."""
        slot = {"train": 0, "val": 1, "test": 2}[which]
        return [image_node_name(cat, i) for cat in self.categories for i in self.parts[cat][slot]]

    def category_of(self, which: str) -> Dict[str, str]:
        return {name: parse_image_node_name(name)[0] for name in self.names(which)}

    def to_json(self) -> Dict:
        return {cat: {"train": list(p[0]), "val": list(p[1]), "test": list(p[2])}
                for cat, p in sorted(self.parts.items())}

    @classmethod
    def from_json(cls, data: Mapping) -> "DatasetSplit":
        return cls({cat: (tuple(p["train"]), tuple(p["val"]), tuple(p["test"])) for cat, p in data.items()})


def _part_sizes(n: int, ratios: Sequence[int]) -> List[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier part."""
    total = sum(ratios)
    quotas = [Fraction(n * r, total) for r in ratios]
    sizes = [int(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(categories: Sequence[str], images_per_category: Union[int, Mapping[str, int]],
                  ratios: Sequence[int] = (15, 5, 10), seed: int = 0,
                  allow_scaling: bool = False) -> DatasetSplit:
    """Seeded shuffle per category, then contiguous train/val/test assignment."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) == 0:
        raise SplitError(f"ratios must be three non-negative parts with a positive sum, got {tuple(ratios)}")
    rng = np.random.default_rng(seed)
    parts = {}
    for cat in sorted(categories):
        n = images_per_category if isinstance(images_per_category, int) else images_per_category[cat]
        if n < 1 or (n < sum(ratios) and not allow_scaling):
            raise SplitError(f"category {cat!r} has {n} images, fewer than the {sum(ratios)} the ratios need")
        sizes = _part_sizes(n, ratios)
        perm = rng.permutation(n)
        train = tuple(sorted(int(i) for i in perm[:sizes[0]]))
        val = tuple(sorted(int(i) for i in perm[sizes[0]:sizes[0] + sizes[1]]))
        test = tuple(sorted(int(i) for i in perm[sizes[0] + sizes[1]:]))
        parts[cat] = (train, val, test)
    return DatasetSplit(parts)


def save_split(split: DatasetSplit, path) -> None:
    Path(path).write_text(json.dumps(split.to_json(), indent=1, sort_keys=True) + '\n', encoding='utf-8')


def load_split(path) -> DatasetSplit:
    return DatasetSplit.from_json(json.loads(Path(path).read_text(encoding='utf-8')))


@dataclass(frozen=True)
class SyntheticSpec:
    n_categories: int = 20
    n_rooms: int = 4
    images_per_category: int = 30
    dim: int = 32
    cluster_separation: float = 4.0
    noise_sigma: float = 0.3
    seed: int = 0
    room_features: str = "onehot"

    def __post_init__(self):
        if self.n_rooms < 2 or self.n_categories < self.n_rooms:
            raise SyntheticSpecError(
                f"need n_categories >= n_rooms >= 2, got {self.n_categories} categories, {self.n_rooms} rooms")
        if self.images_per_category < 1 or self.dim < 1:
            raise SyntheticSpecError("images_per_category and dim must be >= 1")
        if not self.cluster_separation > 0 or self.noise_sigma < 0:
            raise SyntheticSpecError("cluster_separation must be > 0 and noise_sigma >= 0")
        if self.room_features not in ("onehot", "random"):
            raise SyntheticSpecError(f"synthetic room features must be 'onehot' or 'random', got {self.room_features!r}")

    @property
    def categories(self) -> List[str]:
        return [f"category_{i:03d}" for i in range(self.n_categories)]

    @property
    def rooms(self) -> List[str]:
        return [f"room_{j:02d}" for j in range(self.n_rooms)]


def room_centers(n_rooms: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm centers; orthonormal when ``dim >= n_rooms``."""
    g = rng.standard_normal((n_rooms, dim))
    if dim >= n_rooms:
        q, r = np.linalg.qr(g.T)
        # fix QR sign ambiguity so the result depends on g only
        return (q * np.sign(np.diag(r))).T[:n_rooms]
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def gen_synthetic(spec: SyntheticSpec) -> Tuple[FeatureMatrix, GroundTruthMap, SoftScoreTable]:
    """Clustered image features around per-room centers plus matching soft scores.

    Category ``i`` lives in room ``i mod n_rooms``. Values are rounded to f32 so
    that the in-memory dataset equals its saved form.
    """
    if spec.room_features == "onehot" and spec.dim < spec.n_rooms:
        raise SyntheticSpecError(f"one-hot room features need dim >= {spec.n_rooms}, got {spec.dim}")
    rng = np.random.default_rng(spec.seed)
    rooms = spec.rooms
    centers = room_centers(spec.n_rooms, spec.dim, rng) * spec.cluster_separation

    names, rows = [], []
    pairs = {}
    for i, cat in enumerate(spec.categories):
        home = i % spec.n_rooms
        noise = rng.standard_normal((spec.images_per_category, spec.dim)) * spec.noise_sigma
        rows.append(centers[home] + noise)
        names.extend(image_node_name(cat, k) for k in range(spec.images_per_category))
        for j, room in enumerate(rooms):
            if j == home:
                pos = float(rng.uniform(0.7, 1.0))
                pairs[(cat, room)] = PairScore(pos, 0.0, pos)
            else:
                pairs[(cat, room)] = PairScore(0.0, float(rng.uniform(0.1, 0.5)), 0.0)

    images = FeatureMatrix(np.vstack(rows).astype(np.float32).astype(np.float64), tuple(names))
    rooms_fm = room_features(rooms, spec.dim, spec.room_features, seed=spec.seed + 1)
    table = SoftScoreTable(pairs)
    gt = ground_truth_map(table, rooms)
    logger.info("synthetic dataset: %d categories x %d images, %d rooms, dim %d",
                spec.n_categories, spec.images_per_category, spec.n_rooms, spec.dim)
    return images.stack(rooms_fm), gt, table
