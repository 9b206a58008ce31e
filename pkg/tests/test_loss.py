import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare

from annotations import GroundTruthMap, PairScore, SoftScoreTable
from features import DatasetSplit
from kgraph import build_graph, propagation_matrix
from linalg import ZeroNormError, densify
from loss import (LossConfig, SampleBatch, SamplingError, contrastive_loss, loss_from_similarities, mean_batch_loss,
                  positive_weights, sample_batch, scatter_rows)


def _graph(categories, rooms=None):
    """One training image per category; ``categories`` maps category -> room."""
    split = DatasetSplit({c: ((0,), (), ()) for c in categories})
    gt = GroundTruthMap(dict(categories))
    scores = SoftScoreTable({(c, r): PairScore(0.8, 0.0, 1.0) for c, r in categories.items()})
    return build_graph(split, gt, scores, rooms=rooms), gt


def _numeric_row_grads(embeddings, batch, temperature, include_positive=False, h=1e-6):
    rows = sorted({batch.anchor, batch.positive, *batch.negatives})
    out = {}
    for row in rows:
        grad = np.zeros(embeddings.shape[1])
        for j in range(embeddings.shape[1]):
            plus, minus = embeddings.copy(), embeddings.copy()
            plus[row, j] += h
            minus[row, j] -= h
            grad[j] = (contrastive_loss(plus, batch, temperature, include_positive)[0]
                       - contrastive_loss(minus, batch, temperature, include_positive)[0]) / (2 * h)
        out[row] = grad
    return out


class TestLossConfig:

    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.temperature, cfg.include_positive) == (0.01, False)

    @pytest.mark.parametrize("kwargs", [{"temperature": 0.0}, {"temperature": -1.0}, {"negatives": 0},
                                        {"samples": 0}, {"edge_weights": "squared"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            LossConfig(**kwargs)


class TestLossFromSimilarities:

    def test_single_negative_equal_to_positive(self):
        loss, _, _ = loss_from_similarities(0.3, [0.3], 1.0)
        assert loss == 0.0

    def test_hand_evaluated_example(self):
        expected = -(0.9 - math.log(math.exp(0.1) + math.exp(0.2)))
        loss, _, _ = loss_from_similarities(0.9, [0.1, 0.2], 1.0)
        assert loss == pytest.approx(expected, abs=1e-15)
        assert loss == pytest.approx(-0.0556033, abs=1e-7)

    def test_edge_weight_scales_loss(self, rng):
        for _ in range(20):
            sim_pos, *sims = rng.uniform(-1, 1, size=4)
            w = float(rng.uniform(-1, 1))
            base, _, _ = loss_from_similarities(sim_pos, sims, 0.1)
            scaled, _, _ = loss_from_similarities(sim_pos, sims, 0.1, weight_pos=w)
            assert scaled == pytest.approx(math.exp(-w) * base, rel=1e-15)

    @pytest.mark.parametrize("temperature", [0.01, 0.1, 1.0])
    @pytest.mark.parametrize("c", [-5.0, 1.0, 10.0])
    def test_shift_invariance(self, rng, temperature, c):
        for _ in range(20):
            sim_pos, *sims = rng.uniform(-1, 1, size=6)
            a, _, _ = loss_from_similarities(sim_pos, sims, temperature, 0.4)
            b, _, _ = loss_from_similarities(sim_pos + c, np.asarray(sims) + c, temperature, 0.4)
            assert abs(a - b) < 1e-9

    def test_small_temperature_is_finite(self):
        loss, d_pos, d_negs = loss_from_similarities(-1.0, [1.0, 0.99], 0.01)
        assert np.isfinite(loss) and np.isfinite(d_pos) and np.all(np.isfinite(d_negs))
        assert loss > 150.0

    def test_monotone(self, rng):
        sims = list(rng.uniform(-1, 1, size=3))
        low, _, _ = loss_from_similarities(0.2, sims, 0.5)
        high, _, _ = loss_from_similarities(0.3, sims, 0.5)
        assert high < low
        raised = list(sims)
        raised[1] += 0.1
        assert loss_from_similarities(0.2, raised, 0.5)[0] > low

    def test_can_be_negative(self):
        assert loss_from_similarities(1.0, [-1.0], 1.0)[0] < 0

    def test_include_positive_is_infonce(self):
        loss, _, _ = loss_from_similarities(0.5, [0.1], 1.0, include_positive=True)
        expected = -(0.5 - math.log(math.exp(0.5) + math.exp(0.1)))
        assert loss == pytest.approx(expected, abs=1e-15)
        assert loss > 0


class TestContrastiveLoss:

    def test_matches_cosine_formula(self, rng):
        emb = rng.standard_normal((5, 3))
        batch = SampleBatch(4, 0, (1, 2), 0.25)

        def cos(a, b):
            return float(emb[a] @ emb[b] / (np.linalg.norm(emb[a]) * np.linalg.norm(emb[b])))

        expected, _, _ = loss_from_similarities(cos(4, 0), [cos(4, 1), cos(4, 2)], 0.2, 0.25)
        loss, _ = contrastive_loss(emb, batch, 0.2)
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_touches_only_sampled_rows(self, rng):
        emb = rng.standard_normal((6, 3))
        _, grads = contrastive_loss(emb, SampleBatch(5, 0, (2, 3), 0.0), 0.5)
        assert sorted(grads) == [0, 2, 3, 5]
        dense = scatter_rows(grads, emb.shape)
        assert not dense[[1, 4]].any()

    @pytest.mark.parametrize("include_positive", [False, True])
    def test_finite_differences(self, rng, include_positive):
        for _ in range(10):
            emb = rng.standard_normal((7, 4))
            negs = tuple(int(n) for n in rng.choice(np.arange(1, 6), size=3, replace=False))
            batch = SampleBatch(6, 0, negs, float(rng.uniform(0, 1)))
            _, analytic = contrastive_loss(emb, batch, 0.5, include_positive)
            numeric = _numeric_row_grads(emb, batch, 0.5, include_positive)
            assert sorted(analytic) == sorted(numeric)
            for row in numeric:
                np.testing.assert_allclose(analytic[row], numeric[row], rtol=1e-4, atol=1e-7)

    def test_scale_invariant_in_each_row(self, rng):
        emb = rng.standard_normal((4, 3))
        batch = SampleBatch(3, 0, (1, 2), 0.1)
        scaled = emb * np.array([[2.0], [0.5], [7.0], [3.0]])
        assert contrastive_loss(scaled, batch, 0.1)[0] == pytest.approx(contrastive_loss(emb, batch, 0.1)[0],
                                                                         rel=1e-12)

    def test_zero_norm_row(self):
        emb = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ZeroNormError, match="row 1"):
            contrastive_loss(emb, SampleBatch(2, 0, (1,), 0.0), 1.0)


class TestMeanBatchLoss:

    def test_single_sample(self, rng):
        emb = rng.standard_normal((5, 3))
        batch = SampleBatch(4, 0, (1, 2), 0.3)
        loss, grads = contrastive_loss(emb, batch, 0.1)
        mean, mean_grads = mean_batch_loss(emb, [batch], 0.1)
        assert mean == loss
        for row in grads:
            np.testing.assert_array_equal(mean_grads[row], grads[row])

    def test_duplicated_sample(self, rng):
        emb = rng.standard_normal((5, 3))
        batch = SampleBatch(4, 0, (1, 2), 0.3)
        single, single_grads = mean_batch_loss(emb, [batch], 0.1)
        double, double_grads = mean_batch_loss(emb, [batch, batch], 0.1)
        assert double == pytest.approx(single, rel=1e-15)
        for row in single_grads:
            np.testing.assert_allclose(double_grads[row], single_grads[row], rtol=1e-15)

    def test_mean_of_four(self, rng):
        emb = rng.standard_normal((8, 3))
        batches = [SampleBatch(7, int(p), (int(p) + 1, int(p) + 2), float(w))
                   for p, w in zip(rng.integers(0, 5, size=4), rng.uniform(0, 1, size=4))]
        losses = [contrastive_loss(emb, b, 0.2)[0] for b in batches]
        mean, grads = mean_batch_loss(emb, batches, 0.2)
        assert mean == pytest.approx(sum(losses) / 4, rel=1e-15, abs=1e-15)
        expected = sum(scatter_rows(contrastive_loss(emb, b, 0.2)[1], emb.shape) for b in batches) / 4
        np.testing.assert_allclose(scatter_rows(grads, emb.shape), expected, rtol=1e-12, atol=1e-15)

    def test_empty(self, rng):
        with pytest.raises(SamplingError):
            mean_batch_loss(rng.standard_normal((2, 2)), [], 0.1)


class TestSampleBatch:

    def test_forced_choice(self, rng):
        graph, gt = _graph({"a": "kitchen", "b": "bedroom"})
        index = {name: i for i, name in enumerate(graph.node_names)}
        for batch in sample_batch(graph, gt, LossConfig(negatives=1, samples=50), rng):
            if batch.anchor == index["kitchen"]:
                assert (batch.positive, batch.negatives) == (index["a/0"], (index["b/0"],))
            else:
                assert (batch.positive, batch.negatives) == (index["b/0"], (index["a/0"],))

    def test_empty_room_never_anchor(self, rng):
        graph, gt = _graph({"a": "kitchen", "b": "bedroom"}, rooms=["attic", "bedroom", "kitchen"])
        attic = graph.node_names.index("attic")
        anchors = {b.anchor for b in sample_batch(graph, gt, LossConfig(negatives=1, samples=200), rng)}
        assert attic not in anchors and len(anchors) == 2

    def test_sample_invariants(self, small_graph, rng):
        gt_room = small_graph.node_gt_room
        weights = small_graph.correct_room_weights()
        for batch in sample_batch(small_graph, _gt_of(small_graph), LossConfig(negatives=10, samples=64), rng):
            assert batch.anchor in small_graph.room_nodes
            assert gt_room[batch.positive] == batch.anchor
            assert len(set(batch.negatives)) == 10
            assert batch.positive not in batch.negatives
            assert all(gt_room[n] != batch.anchor for n in batch.negatives)
            assert batch.weight_pos == weights[batch.positive]

    def test_anchor_frequency_uniform(self, small_graph, rng):
        batches = sample_batch(small_graph, _gt_of(small_graph), LossConfig(negatives=1, samples=20000), rng)
        counts = Counter(b.anchor for b in batches)
        observed = [counts[r] for r in small_graph.room_nodes]
        assert chisquare(observed).pvalue > 1e-3

    def test_too_few_negatives(self, small_graph, rng):
        # 24 training images, 6 per room
        with pytest.raises(SamplingError, match="cannot draw 19 negatives"):
            sample_batch(small_graph, _gt_of(small_graph), LossConfig(negatives=19), rng)

    def test_missing_ground_truth(self, small_graph, rng):
        with pytest.raises(SamplingError, match="no ground truth"):
            sample_batch(small_graph, GroundTruthMap({}), LossConfig(negatives=1), rng)

    def test_seeded(self, small_graph):
        cfg = LossConfig(negatives=5, samples=16)
        a = sample_batch(small_graph, _gt_of(small_graph), cfg, np.random.default_rng(9))
        b = sample_batch(small_graph, _gt_of(small_graph), cfg, np.random.default_rng(9))
        assert a == b


def _gt_of(graph):
    return GroundTruthMap({cat: graph.node_names[room] for cat, room in zip(graph.node_category, graph.node_gt_room)})


class TestEdgeWeightModes:

    def test_raw_is_correct_room_edge(self, small_graph):
        np.testing.assert_array_equal(positive_weights(small_graph, "raw"), small_graph.correct_room_weights())

    def test_normalized_is_propagation_entry(self, small_graph):
        dense = densify(propagation_matrix(small_graph))
        weights = positive_weights(small_graph, "normalized")
        for node, room in enumerate(small_graph.node_gt_room):
            assert weights[node] == dense[node, room]
        assert np.all((weights > 0) & (weights < small_graph.correct_room_weights()))

    def test_off_is_zero(self, small_graph):
        assert not positive_weights(small_graph, "off").any()

    def test_unknown_mode(self, small_graph):
        with pytest.raises(ValueError, match="edge weight mode"):
            positive_weights(small_graph, "squared")

    @pytest.mark.parametrize("mode", ["normalized", "off"])
    def test_mode_changes_only_the_weight(self, small_graph, mode):
        gt = _gt_of(small_graph)
        raw = sample_batch(small_graph, gt, LossConfig(negatives=5, samples=16), np.random.default_rng(4))
        other = sample_batch(small_graph, gt, LossConfig(negatives=5, samples=16, edge_weights=mode),
                             np.random.default_rng(4))
        expected = positive_weights(small_graph, mode)
        for a, b in zip(raw, other):
            assert (a.anchor, a.positive, a.negatives) == (b.anchor, b.positive, b.negatives)
            assert b.weight_pos == expected[b.positive]

    def test_off_equals_zero_weight_loss(self, small_graph, rng):
        gt = _gt_of(small_graph)
        emb = rng.standard_normal((small_graph.n_nodes, 4))
        cfg = LossConfig(negatives=5, samples=16, edge_weights="off")
        batches = sample_batch(small_graph, gt, cfg, np.random.default_rng(2))
        raw = sample_batch(small_graph, gt, replace(cfg, edge_weights="raw"), np.random.default_rng(2))
        zeroed = [replace(b, weight_pos=0.0) for b in raw]
        assert mean_batch_loss(emb, batches, 0.1)[0] == mean_batch_loss(emb, zeroed, 0.1)[0]
        assert mean_batch_loss(emb, raw, 0.1)[0] != mean_batch_loss(emb, batches, 0.1)[0]

    def test_explicit_weights_win(self, small_graph, rng):
        weights = np.full(small_graph.n_obj_nodes, 0.25)
        batches = sample_batch(small_graph, _gt_of(small_graph), LossConfig(negatives=2, samples=8), rng, weights)
        assert {b.weight_pos for b in batches} == {0.25}
