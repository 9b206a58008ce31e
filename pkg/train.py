"""
Full-graph GCN training with the sampled contrastive loss and Adam.

One step: forward over the knowledge graph, draw M room-anchored samples,
average their losses, scatter the embedding gradients into a full grad_H,
backpropagate through the GCN and apply an Adam update.

Room anchors are embedded from their own features with identity
propagation by default, the same path inference uses for rooms. With
``anchor_embedding="graph"`` they take their full-graph rows instead.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from annotations import GroundTruthMap
from features import FeatureMatrix
from gcn import GcnConfig, GcnGradients, GcnModel, backward, forward, init_weights, save_checkpoint
from infer import EvaluationSet, evaluate
from kgraph import KnowledgeGraph, propagation_matrix
from linalg import ShapeMismatchError, SparseMatrix, identity
from loss import LossConfig, SampleBatch, mean_batch_loss, positive_weights, sample_batch, scatter_rows
from training_monitor import TrainingMonitor

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SCHEDULES = ("constant", "step")
ANCHOR_EMBEDDINGS = ("selfedges", "graph")
LOG_FILE = "train_log.jsonl"


class TrainingDivergedError(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    learning_rate: float = 1e-3
    schedule: str = "constant"
    decay_every: int = 500
    decay_gamma: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    eval_every: int = 100
    checkpoint_every: int = 0
    anchor_embedding: str = "selfedges"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        # 0 is accepted: it freezes the model
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; use one of {SCHEDULES}")
        if self.decay_every < 1 or not 0 < self.decay_gamma <= 1:
            raise ValueError("decay_every must be >= 1 and decay_gamma in (0, 1]")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("eval_every and checkpoint_every must be >= 0")
        if self.anchor_embedding not in ANCHOR_EMBEDDINGS:
            raise ValueError(f"unknown anchor embedding {self.anchor_embedding!r}; use one of {ANCHOR_EMBEDDINGS}")

    def lr_at(self, step: int) -> float:
        """Learning rate for the 1-based ``step``."""
        if self.schedule == "step":
            return self.learning_rate * self.decay_gamma ** ((step - 1) // self.decay_every)
        return self.learning_rate


@dataclass(frozen=True)
class AdamState:
    m: Tuple[np.ndarray, ...]
    v: Tuple[np.ndarray, ...]
    t: int = 0

    @classmethod
    def zeros(cls, model: GcnModel) -> "AdamState":
        params = model.parameters()
        return cls(tuple(np.zeros_like(p) for p in params), tuple(np.zeros_like(p) for p in params), 0)


def adam_step(model: GcnModel, grads: GcnGradients, state: Optional[AdamState], lr: float
              ) -> Tuple[GcnModel, AdamState]:
    """One bias-corrected Adam update; returns new model and state."""
    params = model.parameters()
    g_all = grads.parameters()
    if state is None:
        state = AdamState.zeros(model)
    if len(g_all) != len(params) or len(state.m) != len(params):
        raise ShapeMismatchError(f"{len(g_all)} gradients for {len(params)} parameters")
    for i, (p, g) in enumerate(zip(params, g_all)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ShapeMismatchError(f"parameter {i}: shape {p.shape}, gradient {g.shape}")

    t = state.t + 1
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, g_all, state.m, state.v):
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_params.append(p - lr * step)
        new_m.append(m)
        new_v.append(v)
    return model.with_parameters(new_params), AdamState(tuple(new_m), tuple(new_v), t)


def loss_and_gradients(model: GcnModel, a_hat: SparseMatrix, x: np.ndarray, batches: Sequence[SampleBatch],
                       loss_config: LossConfig, self_rows: Sequence[int] = ()) -> Tuple[float, GcnGradients]:
    """Mean sampled loss and its gradient on every parameter.

    Rows listed in ``self_rows`` are embedded with identity propagation from
    their own features; every other row comes from the full-graph forward.
    """
    h, cache = forward(model, a_hat, x)
    self_rows = list(self_rows)
    if self_rows:
        h_self, self_cache = forward(model, identity(len(self_rows)), x[self_rows])
        h = h.copy()
        h[self_rows] = h_self
    loss, row_grads = mean_batch_loss(h, batches, loss_config.temperature, loss_config.include_positive)
    grad_h = scatter_rows(row_grads, h.shape)
    if not self_rows:
        return loss, backward(model, cache, grad_h)
    grad_self = grad_h[self_rows]
    grad_h[self_rows] = 0.0
    return loss, backward(model, cache, grad_h) + backward(model, self_cache, grad_self)


@dataclass
class TrainLogEntry:
    step: int
    loss: float
    val_map: Optional[float] = None
    hit_ratio: Dict[int, float] = field(default_factory=dict)

    def to_json(self) -> Dict:
        return {"step": self.step, "loss": self.loss, "val_map": self.val_map,
                "hit_ratio": {str(k): v for k, v in sorted(self.hit_ratio.items())}}


@dataclass
class TrainLog:
    losses: List[float] = field(default_factory=list)
    entries: List[TrainLogEntry] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in self.entries)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path


def graph_ground_truth(graph: KnowledgeGraph) -> GroundTruthMap:
    """Category -> room mapping carried by the image nodes of ``graph``."""
    pairs = zip(graph.node_category, graph.node_gt_room)
    return GroundTruthMap({cat: graph.node_names[room] for cat, room in pairs})


def _is_eval_step(step: int, cfg: TrainConfig) -> bool:
    return step == cfg.steps or (cfg.eval_every > 0 and step % cfg.eval_every == 0)


def train(graph: KnowledgeGraph, features: FeatureMatrix, gcn_config: GcnConfig, train_config: TrainConfig,
          validation: Optional[EvaluationSet] = None, out_dir=None, monitor: Optional[TrainingMonitor] = None,
          gt: Optional[GroundTruthMap] = None) -> Tuple[GcnModel, TrainLog]:
    """Train a GCN from ``init_weights(gcn_config)``; deterministic for fixed seeds.

    ``features`` rows must follow the graph node order. Checkpoints and the
    JSON-lines log go to ``out_dir`` when given. Without ``gt`` the ground
    truth is read off the graph.
    """
    if tuple(features.names) != tuple(graph.node_names):
        raise ShapeMismatchError("feature rows are not aligned with the graph node order")
    if features.dim != gcn_config.in_dim:
        raise ShapeMismatchError(f"features have dim {features.dim}, GCN expects {gcn_config.in_dim}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    cfg = train_config
    if gt is None:
        gt = graph_ground_truth(graph)
    a_hat = propagation_matrix(graph)
    x = features.data
    self_rows = list(graph.room_nodes) if cfg.anchor_embedding == "selfedges" else []
    weights = positive_weights(graph, cfg.loss.edge_weights)
    rng = np.random.default_rng(cfg.seed)
    model = init_weights(gcn_config)
    state = AdamState.zeros(model)
    log = TrainLog()
    if monitor is not None:
        monitor.start_training_session(cfg.steps, graph.n_nodes, cfg.loss.samples, cfg.loss.temperature)

    logger.info("training %d steps, lr %g (%s), T=%g, K=%d, M=%d, anchors %s, edge weights %s", cfg.steps,
                cfg.learning_rate, cfg.schedule, cfg.loss.temperature, cfg.loss.negatives, cfg.loss.samples,
                cfg.anchor_embedding, cfg.loss.edge_weights)
    for step in range(1, cfg.steps + 1):
        batches = sample_batch(graph, gt, cfg.loss, rng, weights)
        loss, grads = loss_and_gradients(model, a_hat, x, batches, cfg.loss, self_rows)
        if not np.isfinite(loss):
            last = log.losses[-1] if log.losses else None
            if monitor is not None:
                monitor.fail_training_session(f"non-finite loss at step {step}")
            raise TrainingDivergedError(
                f"loss is {loss} at step {step} (previous loss {last}, lr {cfg.lr_at(step)}, "
                f"T {cfg.loss.temperature})")
        lr = cfg.lr_at(step)
        model, state = adam_step(model, grads, state, lr)
        log.losses.append(loss)
        logger.debug("step %d: loss %.6f lr %g", step, loss, lr)
        if monitor is not None:
            monitor.update_training_status('training', current_step=step, loss=loss, learning_rate=lr)

        if _is_eval_step(step, cfg):
            entry = TrainLogEntry(step, loss)
            if validation is not None:
                report = evaluate(model, validation)
                entry.val_map, entry.hit_ratio = report.map, dict(report.hit_ratio)
                if monitor is not None:
                    monitor.update_training_status('training', val_map=report.map)
            log.entries.append(entry)
            logger.info("step %d/%d: loss %.6f%s", step, cfg.steps, loss,
                        f", val mAP {entry.val_map:.4f}" if entry.val_map is not None else "")

        if out_dir is not None and (step == cfg.steps or
                                    (cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0)):
            save_checkpoint(model, out_dir / f"step_{step}.gck1")

    if out_dir is not None:
        log.write(out_dir / LOG_FILE)
    if monitor is not None:
        monitor.finish_training_session()
    return model, log


@dataclass(frozen=True)
class TemperatureSearch:
    best: float
    val_map: Dict[float, float]

    def to_json(self) -> Dict:
        return {"best": self.best,
                "candidates": [{"temperature": t, "val_map": m} for t, m in sorted(self.val_map.items())]}


def tune_temperature(candidates: Sequence[float], graph: KnowledgeGraph, features: FeatureMatrix,
                     gcn_config: GcnConfig, train_config: TrainConfig, validation: EvaluationSet) -> TemperatureSearch:
    """Train once per temperature with the same seeds; highest validation mAP wins, ties to the smaller T."""
    temps = sorted(set(float(t) for t in candidates))
    if not temps:
        raise ValueError("tune_temperature needs at least one candidate")
    if validation is None:
        raise ValueError("tune_temperature needs a validation set")
    scores: Dict[float, float] = {}
    best = None
    for temp in temps:
        cfg = replace(train_config, loss=replace(train_config.loss, temperature=temp))
        model, _ = train(graph, features, gcn_config, cfg)
        scores[temp] = evaluate(model, validation).map
        logger.info("temperature %g: val mAP %.4f", temp, scores[temp])
        if best is None or scores[temp] > scores[best]:
            best = temp
    return TemperatureSearch(best, scores)
