"""
Room-ranking metrics: average precision, mAP and Top-k hit ratio.

Rooms are ranked per category by descending affinity; equal affinities keep
the column (canonical room) order.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Collection, Dict, List, Mapping, Optional, Sequence

import numpy as np

from annotations import GroundTruthMap

if TYPE_CHECKING:
    from infer import AffinityMatrix

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 3, 5)


class MetricError(ValueError):
    """Metric inputs are inconsistent (missing ground truth, bad k, empty relevant set)."""


@dataclass(frozen=True)
class EvalReport:
    map: float
    hit_ratio: Dict[int, float]
    per_category: List[Dict] = field(default_factory=list)

    def to_json(self) -> Dict:
        return {
            "map": self.map,
            "hit_ratio": {str(k): v for k, v in sorted(self.hit_ratio.items())},
            "per_category": self.per_category,
        }


def rank_rooms(scores: np.ndarray, rooms: Sequence[str]) -> List[str]:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return [rooms[i] for i in order]


def average_precision(ranking: Sequence[str], relevant: Collection[str]) -> float:
    """Mean over the relevant rooms of precision at their rank."""
    relevant = set(relevant)
    if not relevant:
        raise MetricError("average precision needs at least one relevant room")
    outside = relevant - set(ranking)
    if outside:
        raise MetricError(f"relevant rooms not in ranking: {sorted(outside)}")
    hits = 0
    precisions = []
    for rank, room in enumerate(ranking, 1):
        if room in relevant:
            hits += 1
            precisions.append(hits / rank)
    return math.fsum(precisions) / len(relevant)


def _relevant_for(category: str, gt: GroundTruthMap, relevant: Optional[Mapping[str, Collection[str]]],
                  rooms: Sequence[str]) -> Collection[str]:
    if relevant is not None and category in relevant:
        return relevant[category]
    if category not in gt.gt_room:
        raise MetricError(f"no ground truth room for category {category!r}")
    room = gt.gt_room[category]
    if room not in rooms:
        raise MetricError(f"ground truth room {room!r} of {category!r} is not an affinity column")
    return {room}


def per_category_ap(affinity: "AffinityMatrix", gt: GroundTruthMap,
                    relevant: Optional[Mapping[str, Collection[str]]] = None) -> Dict[str, float]:
    rooms = list(affinity.col_names)
    out = {}
    for i, cat in enumerate(affinity.row_names):
        rel = _relevant_for(cat, gt, relevant, rooms)
        out[cat] = average_precision(rank_rooms(affinity.values[i], rooms), rel)
    return out


def mean_ap(affinity: "AffinityMatrix", gt: GroundTruthMap,
            relevant: Optional[Mapping[str, Collection[str]]] = None) -> float:
    """Unweighted mean of per-category AP.

    ``relevant`` maps a category to several correct rooms (see
    ``annotations.top_rooms``); otherwise the single ground-truth room is used.
    """
    aps = per_category_ap(affinity, gt, relevant)
    if not aps:
        raise MetricError("affinity matrix has no rows")
    return math.fsum(aps.values()) / len(aps)


def topk_hit_ratio(affinity: "AffinityMatrix", gt: GroundTruthMap, k: int) -> float:
    rooms = list(affinity.col_names)
    if not 1 <= k <= len(rooms):
        raise MetricError(f"k must be in [1, {len(rooms)}], got {k}")
    if not affinity.row_names:
        raise MetricError("affinity matrix has no rows")
    hits = 0
    for i, cat in enumerate(affinity.row_names):
        (room,) = _relevant_for(cat, gt, None, rooms)
        if room in rank_rooms(affinity.values[i], rooms)[:k]:
            hits += 1
    return hits / len(affinity.row_names)


def evaluate_affinity(affinity: "AffinityMatrix", gt: GroundTruthMap, ks: Sequence[int] = DEFAULT_KS,
                      relevant: Optional[Mapping[str, Collection[str]]] = None) -> EvalReport:
    """mAP, hit ratios and a per-category table.

    A ``k`` above the room count is reported under its own key with the
    value for ``k = n_rooms``.
    """
    rooms = list(affinity.col_names)
    aps = per_category_ap(affinity, gt, relevant)
    if not aps:
        raise MetricError("affinity matrix has no rows")
    table = []
    for i, cat in enumerate(affinity.row_names):
        ranking = rank_rooms(affinity.values[i], rooms)
        gt_room = gt.gt_room.get(cat)
        table.append({
            "category": cat,
            "gt_room": gt_room,
            "rank": ranking.index(gt_room) + 1 if gt_room in ranking else None,
            "ap": aps[cat],
        })
    hit_ratio = {int(k): topk_hit_ratio(affinity, gt, min(int(k), len(rooms))) for k in ks}
    report = EvalReport(math.fsum(aps.values()) / len(aps), hit_ratio, table)
    logger.info("evaluation: mAP %.4f, %s", report.map,
                ", ".join(f"top-{k} {v:.3f}" for k, v in sorted(hit_ratio.items())))
    return report
