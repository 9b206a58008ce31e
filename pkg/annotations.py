"""
Human annotation ranks -> soft scores -> ground-truth object-room mapping.

Annotators rank every receptacle of a room for an object, either under
"correct" (positive rank), "misplaced" (negative rank) or not at all (0).
Ranks become reciprocal-rank soft scores per receptacle, then per
object-room pair, and the room holding the best receptacle becomes the
object's ground-truth room.
"""

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

Pair = Tuple[str, str]


class AnnotationError(ValueError):
    """Malformed or inconsistent annotation data."""


class NoGroundTruthError(AnnotationError):
    """One or more objects have no positively ranked receptacle anywhere."""

    def __init__(self, objects: Sequence[str]):
        self.objects = list(objects)
        super().__init__(f"no ground truth room for: {', '.join(self.objects)}")


@dataclass(frozen=True)
class AnnotationRecord:
    object_id: str
    room_id: str
    receptacle_id: str
    ranks: Tuple[int, ...]

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.object_id, self.room_id, self.receptacle_id)

    def to_json(self) -> Dict:
        return {"object": self.object_id, "room": self.room_id,
                "receptacle": self.receptacle_id, "ranks": list(self.ranks)}

    @classmethod
    def from_json(cls, data: Mapping) -> "AnnotationRecord":
        try:
            return cls(str(data["object"]), str(data["room"]), str(data["receptacle"]),
                       tuple(int(r) for r in data["ranks"]))
        except (KeyError, TypeError, ValueError) as e:
            raise AnnotationError(f"bad annotation record {data!r}: {e}") from e


@dataclass(frozen=True)
class ReceptacleScore:
    object_id: str
    room_id: str
    receptacle_id: str
    pos: float
    neg: float


@dataclass(frozen=True)
class PairScore:
    pos_score: float
    neg_score: float
    max_receptacle_pos: float


@dataclass(frozen=True)
class SoftScoreTable:
    pairs: Dict[Pair, PairScore]
    receptacles: Tuple[ReceptacleScore, ...] = ()

    @property
    def objects(self) -> List[str]:
        return sorted({o for o, _ in self.pairs})

    @property
    def rooms(self) -> List[str]:
        return sorted({r for _, r in self.pairs})

    def get(self, object_id: str, room_id: str) -> PairScore:
        return self.pairs.get((object_id, room_id), PairScore(0.0, 0.0, 0.0))

    def to_json(self) -> Dict:
        return {
            "pairs": [
                {"object": o, "room": r, "pos_score": s.pos_score,
                 "neg_score": s.neg_score, "max_receptacle_pos": s.max_receptacle_pos}
                for (o, r), s in sorted(self.pairs.items())
            ],
            "receptacles": [
                {"object": s.object_id, "room": s.room_id, "receptacle": s.receptacle_id,
                 "pos": s.pos, "neg": s.neg}
                for s in self.receptacles
            ],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "SoftScoreTable":
        pairs = {
            (p["object"], p["room"]): PairScore(float(p["pos_score"]), float(p["neg_score"]),
                                                float(p["max_receptacle_pos"]))
            for p in data["pairs"]
        }
        recs = tuple(
            ReceptacleScore(r["object"], r["room"], r["receptacle"], float(r["pos"]), float(r["neg"]))
            for r in data.get("receptacles", [])
        )
        return cls(pairs, recs)


@dataclass(frozen=True)
class GroundTruthMap:
    gt_room: Dict[str, str]
    negative_weight: Dict[Pair, float] = field(default_factory=dict)

    @property
    def objects(self) -> List[str]:
        return sorted(self.gt_room)

    @property
    def rooms(self) -> List[str]:
        rooms = set(self.gt_room.values()) | {r for _, r in self.negative_weight}
        return sorted(rooms)

    def to_json(self) -> Dict:
        return {
            "gt_room": dict(sorted(self.gt_room.items())),
            "negative_weight": [
                {"object": o, "room": r, "weight": w}
                for (o, r), w in sorted(self.negative_weight.items())
            ],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "GroundTruthMap":
        neg = {(n["object"], n["room"]): float(n["weight"]) for n in data.get("negative_weight", [])}
        return cls(dict(data["gt_room"]), neg)


def receptacle_reciprocal(ranks: Sequence[int]) -> Tuple[float, float]:
    """Mean reciprocal rank over the annotators that gave each polarity."""
    if len(ranks) == 0:
        raise AnnotationError("ranks must be non-empty")
    pos = [1.0 / r for r in ranks if r > 0]
    neg = [1.0 / -r for r in ranks if r < 0]
    # fsum: exact regardless of annotator order
    pos_mean = math.fsum(pos) / len(pos) if pos else 0.0
    neg_mean = math.fsum(neg) / len(neg) if neg else 0.0
    return pos_mean, neg_mean


def validate_records(records: Iterable[AnnotationRecord],
                     receptacles_per_room: Optional[Mapping[str, int]] = None) -> List[AnnotationRecord]:
    """Check uniqueness of (object, room, receptacle) and rank bounds."""
    records = list(records)
    seen = set()
    if receptacles_per_room is None:
        counts: Dict[str, set] = defaultdict(set)
        for rec in records:
            counts[rec.room_id].add(rec.receptacle_id)
        receptacles_per_room = {room: len(recs) for room, recs in counts.items()}
    for rec in records:
        if rec.key in seen:
            raise AnnotationError(f"duplicate annotation for {rec.key}")
        seen.add(rec.key)
        if not rec.ranks:
            raise AnnotationError(f"empty ranks for {rec.key}")
        limit = receptacles_per_room.get(rec.room_id, 0)
        bad = [r for r in rec.ranks if abs(r) > limit]
        if bad:
            raise AnnotationError(
                f"rank {bad[0]} out of range for {rec.key}: room has {limit} receptacles")
    return records


def compute_soft_scores(records: Iterable[AnnotationRecord], min_opinions: int = 1) -> SoftScoreTable:
    """Receptacle scores, then unweighted means per object-room pair.

    Receptacles with fewer than ``min_opinions`` non-zero ranks score (0, 0)
    but still count in the room-level means.
    """
    records = validate_records(records)
    by_pair: Dict[Pair, List[ReceptacleScore]] = defaultdict(list)
    for rec in sorted(records, key=lambda r: r.key):
        opinions = sum(1 for r in rec.ranks if r != 0)
        pos, neg = receptacle_reciprocal(rec.ranks) if opinions >= min_opinions else (0.0, 0.0)
        by_pair[(rec.object_id, rec.room_id)].append(
            ReceptacleScore(rec.object_id, rec.room_id, rec.receptacle_id, pos, neg))

    pairs = {}
    all_scores: List[ReceptacleScore] = []
    for pair in sorted(by_pair):
        scores = by_pair[pair]
        all_scores.extend(scores)
        pairs[pair] = PairScore(
            pos_score=math.fsum(s.pos for s in scores) / len(scores),
            neg_score=math.fsum(s.neg for s in scores) / len(scores),
            max_receptacle_pos=max(s.pos for s in scores),
        )
    logger.info("soft scores: %d object-room pairs from %d receptacle records",
                len(pairs), len(all_scores))
    return SoftScoreTable(pairs, tuple(all_scores))


def ground_truth_map(table: SoftScoreTable, rooms: Optional[Sequence[str]] = None) -> GroundTruthMap:
    """Pick the room with the best receptacle; ties go to the earliest sorted room."""
    rooms = sorted(rooms if rooms is not None else table.rooms)
    gt_room: Dict[str, str] = {}
    missing = []
    for obj in table.objects:
        best_room, best = None, 0.0
        for room in rooms:
            score = table.get(obj, room).max_receptacle_pos
            if score > best:
                best_room, best = room, score
        if best_room is None:
            missing.append(obj)
        else:
            gt_room[obj] = best_room
    if missing:
        raise NoGroundTruthError(missing)

    negative_weight = {
        (obj, room): table.get(obj, room).neg_score
        for obj in sorted(gt_room) for room in rooms if room != gt_room[obj]
    }
    return GroundTruthMap(gt_room, negative_weight)


def top_rooms(table: SoftScoreTable, k: int, rooms: Optional[Sequence[str]] = None) -> Dict[str, List[str]]:
    """The ``k`` rooms with the highest positively scored receptacle, per object.

    Rooms with no positive receptacle are never included, so an object may get
    fewer than ``k`` rooms.
    """
    if k < 1:
        raise AnnotationError("k must be >= 1")
    rooms = sorted(rooms if rooms is not None else table.rooms)
    result = {}
    for obj in table.objects:
        scored = [(-table.get(obj, r).max_receptacle_pos, i, r) for i, r in enumerate(rooms)
                  if table.get(obj, r).max_receptacle_pos > 0.0]
        result[obj] = [r for _, _, r in sorted(scored)[:k]]
    return result


def load_annotations(path) -> List[AnnotationRecord]:
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise AnnotationError(f"{path}:{lineno}: {e}") from e
            records.append(AnnotationRecord.from_json(data))
    logger.info("loaded %d annotation records from %s", len(records), path)
    return records


def save_annotations(records: Iterable[AnnotationRecord], path) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        for rec in records:
            f.write(json.dumps(rec.to_json(), ensure_ascii=False) + '\n')


def save_json(obj, path) -> None:
    """Write a ``SoftScoreTable`` or ``GroundTruthMap`` as JSON."""
    Path(path).write_text(json.dumps(obj.to_json(), indent=2, sort_keys=True, ensure_ascii=False) + '\n',
                          encoding='utf-8')


def load_soft_scores(path) -> SoftScoreTable:
    return SoftScoreTable.from_json(json.loads(Path(path).read_text(encoding='utf-8')))


def load_ground_truth(path) -> GroundTruthMap:
    return GroundTruthMap.from_json(json.loads(Path(path).read_text(encoding='utf-8')))
