"""
Edge-weight-modulated contrastive loss with room-anchored sampling.

For an anchor room a, a positive image p in that room and K negative images
from other rooms:

    L = -exp(-w_p) * ( sim(a, p) / T - logsumexp_i sim(a, n_i) / T )

where sim is cosine similarity and w_p the type-4 edge weight between p and
a (raw, taken from the normalized propagation matrix, or switched off). The
denominator holds the negatives only unless ``include_positive`` is set.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from annotations import GroundTruthMap
from kgraph import KnowledgeGraph, propagation_matrix
from linalg import DenseMatrix, ZeroNormError

logger = logging.getLogger(__name__)

RowGradients = Dict[int, np.ndarray]

# raw: the type-4 edge weight; normalized: its entry in D^-1/2 (A+ + I) D^-1/2; off: w = 0
EDGE_WEIGHT_MODES = ("raw", "normalized", "off")


class SamplingError(ValueError):
    """The graph cannot supply the requested anchors, positives or negatives."""


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.01
    negatives: int = 10
    samples: int = 32
    include_positive: bool = False
    edge_weights: str = "raw"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.negatives < 1 or self.samples < 1:
            raise ValueError("negatives and samples must be >= 1")
        if self.edge_weights not in EDGE_WEIGHT_MODES:
            raise ValueError(f"unknown edge weight mode {self.edge_weights!r}; use one of {EDGE_WEIGHT_MODES}")


@dataclass(frozen=True)
class SampleBatch:
    anchor: int
    positive: int
    negatives: Tuple[int, ...]
    weight_pos: float


def positive_weights(graph: KnowledgeGraph, mode: str = "raw") -> np.ndarray:
    """Weight of the edge between every image node and its ground-truth room."""
    if mode == "raw":
        return graph.correct_room_weights()
    if mode == "off":
        return np.zeros(graph.n_obj_nodes)
    if mode == "normalized":
        a_hat = propagation_matrix(graph)
        rows = np.arange(graph.n_obj_nodes)
        cols = np.asarray(graph.node_gt_room[:graph.n_obj_nodes], dtype=np.int64)
        return np.asarray(a_hat[rows, cols], dtype=np.float64).ravel()
    raise ValueError(f"unknown edge weight mode {mode!r}; use one of {EDGE_WEIGHT_MODES}")


def sample_batch(graph: KnowledgeGraph, gt: GroundTruthMap, cfg: LossConfig,
                 rng: np.random.Generator, weights: Optional[np.ndarray] = None) -> List[SampleBatch]:
    """Draw ``cfg.samples`` anchor/positive/negatives triples.

    Anchors are uniform over rooms holding at least one image; negatives are
    drawn without replacement from images whose ground truth is another room.
    ``weights`` overrides the per-image positive weights of ``cfg.edge_weights``.
    """
    unknown = sorted(set(graph.node_category) - set(gt.gt_room))
    if unknown:
        raise SamplingError(f"no ground truth room for categories: {', '.join(unknown)}")

    groups = graph.images_by_room()
    anchors = [room for room in graph.room_nodes if groups[room]]
    if not anchors:
        raise SamplingError("no room has any training image")
    node_gt = np.asarray(graph.node_gt_room, dtype=np.int64)
    outside = {room: np.flatnonzero(node_gt != room) for room in anchors}
    short = [graph.node_names[r] for r in anchors if len(outside[r]) < cfg.negatives]
    if short:
        raise SamplingError(
            f"cannot draw {cfg.negatives} negatives for room(s) {', '.join(short)}: too few images elsewhere")
    if weights is None:
        weights = positive_weights(graph, cfg.edge_weights)

    batches = []
    for _ in range(cfg.samples):
        anchor = anchors[int(rng.integers(len(anchors)))]
        members = groups[anchor]
        positive = members[int(rng.integers(len(members)))]
        negatives = rng.choice(outside[anchor], size=cfg.negatives, replace=False)
        batches.append(SampleBatch(anchor, positive, tuple(int(n) for n in negatives), float(weights[positive])))
    return batches


def loss_from_similarities(sim_pos: float, sim_negs: Sequence[float], temperature: float,
                           weight_pos: float = 0.0, include_positive: bool = False
                           ) -> Tuple[float, float, np.ndarray]:
    """Loss and its partial derivatives with respect to sim_pos and each sim_neg."""
    sim_negs = np.asarray(sim_negs, dtype=np.float64)
    scale = np.exp(-weight_pos)
    logits = sim_negs / temperature
    if include_positive:
        logits = np.concatenate([[sim_pos / temperature], logits])
    # scipy's logsumexp subtracts the max before exponentiating
    lse = logsumexp(logits)
    loss = -scale * (sim_pos / temperature - lse)
    soft = np.exp(logits - lse)
    d_pos = -scale / temperature
    if include_positive:
        d_pos += scale / temperature * soft[0]
        soft = soft[1:]
    d_negs = scale / temperature * soft
    return float(loss), float(d_pos), d_negs


def contrastive_loss(embeddings: DenseMatrix, batch: SampleBatch, temperature: float,
                     include_positive: bool = False) -> Tuple[float, RowGradients]:
    """Loss of one sample and its gradient on the anchor, positive and negative rows."""
    rows = [batch.anchor, batch.positive, *batch.negatives]
    vecs = embeddings[rows]
    norms = np.sqrt(np.einsum("ij,ij->i", vecs, vecs))
    zero = [rows[i] for i in np.flatnonzero(norms == 0.0)]
    if zero:
        raise ZeroNormError(f"embedding row {zero[0]} has zero norm")
    units = vecs / norms[:, None]
    a_hat, others = units[0], units[1:]
    sims = others @ a_hat

    loss, d_pos, d_negs = loss_from_similarities(sims[0], sims[1:], temperature, batch.weight_pos,
                                                 include_positive)
    coeff = np.concatenate([[d_pos], d_negs])
    # d cos(a, u) / d a = (û - cos â) / |a|,  d cos(a, u) / d u = (â - cos û) / |u|
    grad_anchor = (coeff[:, None] * (others - sims[:, None] * a_hat)).sum(axis=0) / norms[0]
    grad_others = coeff[:, None] * (a_hat[None, :] - sims[:, None] * others) / norms[1:, None]

    grads: RowGradients = {batch.anchor: grad_anchor}
    for row, g in zip(rows[1:], grad_others):
        if row in grads:
            grads[row] = grads[row] + g
        else:
            grads[row] = g
    return loss, grads


def mean_batch_loss(embeddings: DenseMatrix, batches: Sequence[SampleBatch], temperature: float,
                    include_positive: bool = False) -> Tuple[float, RowGradients]:
    """Mean loss over the samples; gradients scaled by 1/M and summed per row in sample order."""
    if not batches:
        raise SamplingError("mean_batch_loss needs at least one sample")
    m = len(batches)
    losses = []
    total: RowGradients = {}
    for batch in batches:
        loss, grads = contrastive_loss(embeddings, batch, temperature, include_positive)
        losses.append(loss)
        for row, g in grads.items():
            if row in total:
                total[row] = total[row] + g / m
            else:
                total[row] = g / m
    return float(np.mean(losses)), total


def scatter_rows(grads: RowGradients, shape: Tuple[int, int]) -> DenseMatrix:
    """Dense gradient with the given rows filled in and zeros elsewhere."""
    out = np.zeros(shape)
    for row in sorted(grads):
        out[row] = grads[row]
    return out
