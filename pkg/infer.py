"""
Test-time inference: self-edges-only encoding, cosine affinities against room
embeddings and per-category aggregation.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Collection, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from annotations import GroundTruthMap
from features import DatasetSplit, FeatureMatrix
from gcn import GcnModel, forward
from linalg import DenseMatrix, ShapeMismatchError, cosine_matrix, identity
from metrics import DEFAULT_KS, EvalReport, evaluate_affinity

logger = logging.getLogger(__name__)

NODE_COLUMN = "node"


class InferenceError(ValueError):
    """Inputs to inference are inconsistent."""


@dataclass(frozen=True)
class AffinityMatrix:
    values: np.ndarray
    row_names: Tuple[str, ...]
    col_names: Tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_names", tuple(self.row_names))
        object.__setattr__(self, "col_names", tuple(self.col_names))
        if values.shape != (len(self.row_names), len(self.col_names)):
            raise InferenceError(f"affinity values {values.shape} do not match "
                                 f"{len(self.row_names)} rows x {len(self.col_names)} columns")
        if not np.all(np.isfinite(values)):
            raise InferenceError("affinity matrix contains non-finite values")

    def row(self, name: str) -> np.ndarray:
        return self.values[self.row_names.index(name)]


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)


def embed_selfedges(model: GcnModel, x) -> DenseMatrix:
    """Forward pass with identity propagation."""
    data = _data(x)
    if data.ndim != 2 or data.shape[1] != model.config.in_dim:
        raise ShapeMismatchError(f"features have shape {data.shape}, model expects dim {model.config.in_dim}")
    h, _ = forward(model, identity(data.shape[0]), data)
    return h


def image_affinities(model: GcnModel, image_x: FeatureMatrix, room_x: FeatureMatrix) -> AffinityMatrix:
    """Cosine similarity of every image embedding with every room embedding."""
    img = embed_selfedges(model, image_x)
    rooms = embed_selfedges(model, room_x)
    return AffinityMatrix(cosine_matrix(img, rooms, image_x.names, room_x.names), image_x.names, room_x.names)


def raw_feature_affinities(image_x: FeatureMatrix, room_x: FeatureMatrix) -> AffinityMatrix:
    """Affinities straight from the input features, without any GCN."""
    if image_x.dim != room_x.dim:
        raise InferenceError(f"image features have dim {image_x.dim}, room features {room_x.dim}")
    return AffinityMatrix(cosine_matrix(image_x.data, room_x.data, image_x.names, room_x.names),
                          image_x.names, room_x.names)


def aggregate_category(per_image: AffinityMatrix, category_of: Mapping[str, str],
                       categories: Optional[Sequence[str]] = None) -> AffinityMatrix:
    """Unweighted mean of the image rows of each category; rows come out in sorted category order."""
    unmapped = [n for n in per_image.row_names if n not in category_of]
    if unmapped:
        raise InferenceError(f"image {unmapped[0]!r} has no category")
    groups: Dict[str, list] = {}
    for i, name in enumerate(per_image.row_names):
        groups.setdefault(category_of[name], []).append(i)
    wanted = sorted(categories) if categories is not None else sorted(groups)
    empty = [c for c in wanted if c not in groups]
    if empty:
        raise InferenceError(f"category {empty[0]!r} has no images")

    rows = []
    for cat in wanted:
        block = per_image.values[groups[cat]]
        # fsum per column: the mean does not depend on image order
        rows.append([math.fsum(col) / block.shape[0] for col in block.T])
    return AffinityMatrix(np.array(rows).reshape(len(wanted), len(per_image.col_names)),
                          tuple(wanted), per_image.col_names)


def export_embeddings(model: GcnModel, x: FeatureMatrix, path) -> Path:
    """TSV: node name then one column per embedding dimension, 17 significant digits."""
    emb = embed_selfedges(model, x)
    frame = pd.DataFrame(emb, columns=[f"dim_{j}" for j in range(emb.shape[1])])
    frame.insert(0, NODE_COLUMN, list(x.names))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, sep="\t", index=False, float_format="%.17g", lineterminator="\n")
    logger.info("exported %d embeddings of dim %d to %s", emb.shape[0], emb.shape[1], path)
    return path


def load_embeddings(path) -> FeatureMatrix:
    frame = pd.read_csv(path, sep="\t", dtype={NODE_COLUMN: str}, float_precision="round_trip")
    names = tuple(frame.pop(NODE_COLUMN))
    return FeatureMatrix(frame.to_numpy(dtype=np.float64), names)


def rankings_frame(affinity: AffinityMatrix) -> pd.DataFrame:
    """One row per (category, room), rooms in descending affinity."""
    records = []
    for i, cat in enumerate(affinity.row_names):
        order = np.argsort(-affinity.values[i], kind="stable")
        for rank, j in enumerate(order, 1):
            records.append({"category": cat, "rank": rank, "room": affinity.col_names[j],
                            "affinity": float(affinity.values[i, j])})
    return pd.DataFrame.from_records(records, columns=["category", "rank", "room", "affinity"])


def write_rankings(affinity: AffinityMatrix, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rankings_frame(affinity).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logger.info("rankings for %d categories written to %s", len(affinity.row_names), path)
    return path


@dataclass(frozen=True)
class EvaluationSet:
    image_features: FeatureMatrix
    category_of: Dict[str, str]
    room_features: FeatureMatrix
    gt: GroundTruthMap

    @classmethod
    def from_split(cls, features: FeatureMatrix, split: DatasetSplit, which: str, room_features: FeatureMatrix,
                   gt: GroundTruthMap) -> "EvaluationSet":
        """Images of one split part, looked up by node name in ``features``."""
        names = split.names(which)
        if not names:
            raise InferenceError(f"split part {which!r} holds no images")
        try:
            images = features.select(names)
        except KeyError as e:
            raise InferenceError(f"feature file lacks {which} images: {e}") from e
        return cls(images, split.category_of(which), room_features, gt)


def category_affinities(model: GcnModel, eval_set: EvaluationSet) -> AffinityMatrix:
    per_image = image_affinities(model, eval_set.image_features, eval_set.room_features)
    return aggregate_category(per_image, eval_set.category_of)


def evaluate(model: GcnModel, eval_set: EvaluationSet, ks: Sequence[int] = DEFAULT_KS,
             relevant: Optional[Mapping[str, Collection[str]]] = None) -> EvalReport:
    return evaluate_affinity(category_affinities(model, eval_set), eval_set.gt, ks, relevant)
