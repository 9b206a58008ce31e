"""
Weighted undirected knowledge graph over object-image nodes and room nodes.

Node order: training images grouped by category (sorted), image indices
ascending within a category, then rooms in sorted order.

Edge types:
    1  image self loop                      weight 1
    2  images of the same category          weight 1
    3  images of different categories
       sharing a ground-truth room          uniform [0.5, 0.7], seeded
    4  image -> its ground-truth room       room-level pos_score
    5  image -> every other room            -neg_score
"""

import json
import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from annotations import GroundTruthMap, SoftScoreTable
from features import DatasetSplit, image_node_name
from linalg import SparseMatrix, canonical

logger = logging.getLogger(__name__)

EDGE_MAGIC = b"KGE1"
EDGE_RECORD = np.dtype([("u", "<u4"), ("v", "<u4"), ("weight", "<f4"), ("etype", "u1")])
NODES_FILE = "graph_nodes.json"
EDGES_FILE = "graph_edges.kge1"


class GraphError(ValueError):
    """The graph cannot be built or read."""


class EdgeType(IntEnum):
    SELF = 1
    SAME_OBJECT = 2
    SAME_ROOM_OBJECTS = 3
    CORRECT_ROOM = 4
    INCORRECT_ROOM = 5


class Edge(NamedTuple):
    u: int
    v: int
    weight: float
    etype: EdgeType


@dataclass(frozen=True)
class KnowledgeGraph:
    node_names: Tuple[str, ...]
    n_obj_nodes: int
    n_room_nodes: int
    # per image node: its category and the node index of its ground-truth room
    node_category: Tuple[str, ...]
    node_gt_room: Tuple[int, ...]
    u: np.ndarray
    v: np.ndarray
    weight: np.ndarray
    etype: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.n_obj_nodes + self.n_room_nodes

    @property
    def n_edges(self) -> int:
        return int(self.u.shape[0])

    @property
    def room_nodes(self) -> range:
        return range(self.n_obj_nodes, self.n_nodes)

    @property
    def rooms(self) -> List[str]:
        return list(self.node_names[self.n_obj_nodes:])

    def edges(self) -> Iterator[Edge]:
        for u, v, w, t in zip(self.u, self.v, self.weight, self.etype):
            yield Edge(int(u), int(v), float(w), EdgeType(int(t)))

    def images_by_room(self) -> Dict[int, List[int]]:
        """Room node -> image nodes whose ground truth is that room."""
        groups: Dict[int, List[int]] = {r: [] for r in self.room_nodes}
        for node, room in enumerate(self.node_gt_room):
            groups[room].append(node)
        return groups

    def correct_room_weights(self) -> np.ndarray:
        """Type-4 edge weight for every image node."""
        out = np.zeros(self.n_obj_nodes)
        mask = self.etype == EdgeType.CORRECT_ROOM
        out[self.u[mask]] = self.weight[mask]
        return out


def _pairs(nodes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.triu_indices(len(nodes), k=1)
    return nodes[a], nodes[b]


def _sorted(u, v, w, t):
    order = np.lexsort((v, u))
    return u[order], v[order], w[order], t[order]


def build_graph(split: DatasetSplit, gt: GroundTruthMap, scores: SoftScoreTable, seed: int = 0,
                rooms: Optional[Sequence[str]] = None) -> KnowledgeGraph:
    """Knowledge graph over the training images of ``split`` and all rooms."""
    categories = split.categories
    missing = [c for c in categories if c not in gt.gt_room]
    if missing:
        raise GraphError(f"no ground truth room for categories: {', '.join(missing)}")
    rooms = sorted(set(rooms) if rooms is not None else set(gt.rooms) | set(scores.rooms))
    unknown = sorted({gt.gt_room[c] for c in categories} - set(rooms))
    if unknown:
        raise GraphError(f"ground truth rooms not in room list: {', '.join(unknown)}")

    names: List[str] = []
    node_category: List[str] = []
    for cat in categories:
        for idx in split.train(cat):
            names.append(image_node_name(cat, idx))
            node_category.append(cat)
    n_obj = len(names)
    room_index = {room: n_obj + j for j, room in enumerate(rooms)}
    names.extend(rooms)
    node_gt_room = np.array([room_index[gt.gt_room[c]] for c in node_category], dtype=np.int64)
    cat_codes = np.array([categories.index(c) for c in node_category], dtype=np.int64)
    obj = np.arange(n_obj, dtype=np.int64)

    blocks = []

    # 1: image self loops
    blocks.append((obj, obj, np.ones(n_obj), np.full(n_obj, int(EdgeType.SELF), dtype=np.uint8)))

    # 2: same category
    us, vs = [], []
    for code in range(len(categories)):
        a, b = _pairs(obj[cat_codes == code])
        us.append(a)
        vs.append(b)
    u2 = np.concatenate(us) if us else np.zeros(0, dtype=np.int64)
    v2 = np.concatenate(vs) if vs else np.zeros(0, dtype=np.int64)
    blocks.append(_sorted(u2, v2, np.ones(len(u2)), np.full(len(u2), int(EdgeType.SAME_OBJECT), dtype=np.uint8)))

    # 3: different categories, same ground-truth room; weights drawn in (u, v) order
    us, vs = [], []
    for room in sorted(set(node_gt_room.tolist())):
        a, b = _pairs(obj[node_gt_room == room])
        keep = cat_codes[a] != cat_codes[b]
        us.append(a[keep])
        vs.append(b[keep])
    u3 = np.concatenate(us) if us else np.zeros(0, dtype=np.int64)
    v3 = np.concatenate(vs) if vs else np.zeros(0, dtype=np.int64)
    order = np.lexsort((v3, u3))
    u3, v3 = u3[order], v3[order]
    rng = np.random.default_rng(seed)
    w3 = rng.uniform(0.5, 0.7, size=len(u3))
    blocks.append((u3, v3, w3, np.full(len(u3), int(EdgeType.SAME_ROOM_OBJECTS), dtype=np.uint8)))

    # 4: correct room
    w4 = np.array([scores.get(c, gt.gt_room[c]).pos_score for c in node_category])
    blocks.append((obj, node_gt_room, w4, np.full(n_obj, int(EdgeType.CORRECT_ROOM), dtype=np.uint8)))

    # 5: every other room, negative weight
    u5, v5, w5 = [], [], []
    for node, cat in enumerate(node_category):
        for room in rooms:
            if room == gt.gt_room[cat]:
                continue
            neg = gt.negative_weight.get((cat, room), scores.get(cat, room).neg_score)
            u5.append(node)
            v5.append(room_index[room])
            w5.append(0.0 - neg)
    blocks.append((np.array(u5, dtype=np.int64), np.array(v5, dtype=np.int64), np.array(w5, dtype=np.float64),
                   np.full(len(u5), int(EdgeType.INCORRECT_ROOM), dtype=np.uint8)))

    u = np.concatenate([b[0] for b in blocks]).astype(np.int64)
    v = np.concatenate([b[1] for b in blocks]).astype(np.int64)
    w = np.concatenate([b[2] for b in blocks]).astype(np.float64)
    t = np.concatenate([b[3] for b in blocks]).astype(np.uint8)

    g = KnowledgeGraph(tuple(names), n_obj, len(rooms), tuple(node_category), tuple(node_gt_room.tolist()),
                       u, v, w, t)
    logger.info("knowledge graph: %d image nodes, %d room nodes, %d edges", n_obj, len(rooms), g.n_edges)
    return g


@dataclass(frozen=True)
class GraphStats:
    n_obj_nodes: int
    n_room_nodes: int
    n_nodes: int
    n_edges: int
    edges_per_type: Dict[int, int]
    weight_range: Dict[int, Tuple[float, float]]

    def to_json(self) -> Dict:
        return {
            "n_obj_nodes": self.n_obj_nodes,
            "n_room_nodes": self.n_room_nodes,
            "n_nodes": self.n_nodes,
            "n_edges": self.n_edges,
            "edges_per_type": {str(k): v for k, v in sorted(self.edges_per_type.items())},
            "weight_range": {str(k): list(v) for k, v in sorted(self.weight_range.items())},
        }


def graph_stats(g: KnowledgeGraph) -> GraphStats:
    per_type = {int(t): int(np.count_nonzero(g.etype == t)) for t in EdgeType}
    ranges = {}
    for t in EdgeType:
        w = g.weight[g.etype == t]
        if w.size:
            ranges[int(t)] = (float(w.min()), float(w.max()))
    return GraphStats(g.n_obj_nodes, g.n_room_nodes, g.n_nodes, g.n_edges, per_type, ranges)


def propagation_matrix(g: KnowledgeGraph) -> SparseMatrix:
    """D^-1/2 (A+ + I) D^-1/2 with negative weights clamped to zero.

    Every node gets the unit self loop, so each degree is at least 1.
    """
    n = g.n_nodes
    w = np.clip(g.weight, 0.0, None)
    off = g.u != g.v
    rows = np.concatenate([g.u, g.v[off], np.arange(n)])
    cols = np.concatenate([g.v, g.u[off], np.arange(n)])
    vals = np.concatenate([w, w[off], np.ones(n)])
    a = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    a.sum_duplicates()
    a.eliminate_zeros()
    a.sort_indices()

    deg = np.asarray(a.sum(axis=1)).ravel()
    coo = a.tocoo()
    # a_ij / sqrt(d_i d_j) is exactly symmetric
    scaled = coo.data / np.sqrt(deg[coo.row] * deg[coo.col])
    return canonical(sp.csr_matrix((scaled, (coo.row, coo.col)), shape=(n, n)))


def save_graph(g: KnowledgeGraph, out_dir) -> Tuple[Path, Path]:
    """JSON node manifest plus the KGE1 binary edge list."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    nodes = []
    for i, name in enumerate(g.node_names):
        if i < g.n_obj_nodes:
            nodes.append({"index": i, "name": name, "kind": "image", "category": g.node_category[i],
                          "gt_room": g.node_names[g.node_gt_room[i]]})
        else:
            nodes.append({"index": i, "name": name, "kind": "room"})
    manifest = {"n_obj_nodes": g.n_obj_nodes, "n_room_nodes": g.n_room_nodes, "nodes": nodes}
    nodes_path = out_dir / NODES_FILE
    nodes_path.write_text(json.dumps(manifest, indent=1, ensure_ascii=False) + '\n', encoding='utf-8')

    records = np.empty(g.n_edges, dtype=EDGE_RECORD)
    records["u"] = g.u
    records["v"] = g.v
    records["weight"] = g.weight
    records["etype"] = g.etype
    edges_path = out_dir / EDGES_FILE
    with open(edges_path, 'wb') as f:
        f.write(EDGE_MAGIC)
        f.write(np.array([g.n_edges], dtype="<u8").tobytes())
        f.write(records.tobytes())
    logger.info("graph exported to %s", out_dir)
    return nodes_path, edges_path


def load_graph(graph_dir) -> KnowledgeGraph:
    graph_dir = Path(graph_dir)
    manifest = json.loads((graph_dir / NODES_FILE).read_text(encoding='utf-8'))
    raw = (graph_dir / EDGES_FILE).read_bytes()
    if len(raw) < 12:
        raise GraphError(f"{graph_dir / EDGES_FILE}: {len(raw)} bytes, too short for the KGE1 header")
    if raw[:4] != EDGE_MAGIC:
        raise GraphError(f"{graph_dir / EDGES_FILE}: bad magic {raw[:4]!r}")
    count = int(np.frombuffer(raw[4:12], dtype="<u8")[0])
    body = raw[12:]
    if len(body) != count * EDGE_RECORD.itemsize:
        raise GraphError(f"edge list declares {count} records but holds {len(body)} bytes")
    records = np.frombuffer(body, dtype=EDGE_RECORD)

    nodes = manifest["nodes"]
    n_obj = manifest["n_obj_nodes"]
    index = {n["name"]: n["index"] for n in nodes}
    return KnowledgeGraph(
        node_names=tuple(n["name"] for n in nodes),
        n_obj_nodes=n_obj,
        n_room_nodes=manifest["n_room_nodes"],
        node_category=tuple(n["category"] for n in nodes[:n_obj]),
        node_gt_room=tuple(index[n["gt_room"]] for n in nodes[:n_obj]),
        u=records["u"].astype(np.int64),
        v=records["v"].astype(np.int64),
        weight=records["weight"].astype(np.float64),
        etype=records["etype"].astype(np.uint8),
    )


def expected_edge_counts(images_per_category: Dict[str, int], gt_room: Dict[str, str], n_rooms: int) -> Dict[int, int]:
    """Closed-form edge counts per type for a split with the given train sizes."""
    n_obj = sum(images_per_category.values())
    same_cat = sum(math.comb(n, 2) for n in images_per_category.values())
    per_room: Dict[str, List[int]] = {}
    for cat, n in images_per_category.items():
        per_room.setdefault(gt_room[cat], []).append(n)
    same_room = sum(math.comb(sum(ns), 2) - sum(math.comb(n, 2) for n in ns) for ns in per_room.values())
    return {1: n_obj, 2: same_cat, 3: same_room, 4: n_obj, 5: n_obj * (n_rooms - 1)}
