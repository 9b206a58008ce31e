"""Shared fixtures. The modules live at the repository root."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from annotations import AnnotationRecord, compute_soft_scores, ground_truth_map  # noqa: E402
from features import SyntheticSpec, gen_synthetic, split_dataset  # noqa: E402
from kgraph import build_graph  # noqa: E402


@pytest.fixture
def tiny_records():
    """Two objects, two rooms, two receptacles per room, three annotators."""
    return [
        AnnotationRecord("cup", "kitchen", "shelf", (1, 2, 0)),
        AnnotationRecord("cup", "kitchen", "sink", (2, 1, -1)),
        AnnotationRecord("cup", "bedroom", "bed", (-1, -2, 0)),
        AnnotationRecord("cup", "bedroom", "desk", (0, 0, 2)),
        AnnotationRecord("pillow", "kitchen", "shelf", (-1, -1, -1)),
        AnnotationRecord("pillow", "kitchen", "sink", (-2, -2, 0)),
        AnnotationRecord("pillow", "bedroom", "bed", (1, 1, 1)),
        AnnotationRecord("pillow", "bedroom", "desk", (2, 0, 2)),
    ]


@pytest.fixture
def tiny_scores(tiny_records):
    return compute_soft_scores(tiny_records)


@pytest.fixture
def tiny_gt(tiny_scores):
    return ground_truth_map(tiny_scores)


@pytest.fixture
def small_synthetic():
    """A small separable dataset: 8 categories, 4 rooms, 6 images each, dim 8."""
    spec = SyntheticSpec(n_categories=8, n_rooms=4, images_per_category=6, dim=8, seed=3)
    features, gt, scores = gen_synthetic(spec)
    split = split_dataset(spec.categories, spec.images_per_category, (3, 1, 2), seed=3)
    return spec, features, gt, scores, split


@pytest.fixture
def small_graph(small_synthetic):
    _, _, gt, scores, split = small_synthetic
    return build_graph(split, gt, scores, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
