import struct

import numpy as np
import pytest
import scipy.sparse as sp

from gcn import (CHECKPOINT_MAGIC, CheckpointError, GcnConfig, GcnGradients, GcnModel, backward, forward, init_weights,
                 load_checkpoint, save_checkpoint)
from linalg import ShapeMismatchError, canonical, csr_from_coo, identity


def _random_propagation(rng, n, density=0.3):
    """Symmetric non-negative sparse matrix with a positive diagonal."""
    a = sp.random(n, n, density=density, random_state=np.random.RandomState(int(rng.integers(1 << 30))))
    a = a + a.T + sp.identity(n)
    return canonical(a / np.max(np.asarray(a.sum(axis=1))))


def _random_model(rng, in_dim, n_layers, bias=False):
    hidden = tuple(int(d) for d in rng.integers(2, 6, size=n_layers - 1))
    model = init_weights(GcnConfig(in_dim=in_dim, hidden_dims=hidden, out_dim=3,
                                   seed=int(rng.integers(1000)), bias=bias))
    if bias:
        model = model.with_parameters(model.weights + tuple(rng.standard_normal(b.shape) for b in model.biases))
    return model


def _dense_forward(model, a_dense, x):
    h = x
    for i, w in enumerate(model.weights):
        z = np.zeros((h.shape[0], w.shape[1]))
        for r in range(h.shape[0]):
            for c in range(w.shape[1]):
                z[r, c] = sum(a_dense[r, k] * h[k, j] * w[j, c] for k in range(h.shape[0]) for j in range(h.shape[1]))
        if model.biases:
            z = z + model.biases[i]
        h = z if i == len(model.weights) - 1 else np.maximum(z, 0.0)
    return h


def _objective(model, a_hat, x, g):
    return float(np.sum(forward(model, a_hat, x)[0] * g))


def _numeric_gradients(model, a_hat, x, g, h=1e-5):
    params = model.parameters()
    grads = []
    for p_idx, p in enumerate(params):
        grad = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[p_idx][idx] += h
            minus[p_idx][idx] -= h
            grad[idx] = (_objective(model.with_parameters(plus), a_hat, x, g)
                         - _objective(model.with_parameters(minus), a_hat, x, g)) / (2 * h)
        grads.append(grad)
    return grads


class TestInitWeights:

    def test_seeded(self):
        a = init_weights(GcnConfig(in_dim=6, hidden_dims=(4,), out_dim=3, seed=1))
        b = init_weights(GcnConfig(in_dim=6, hidden_dims=(4,), out_dim=3, seed=1))
        c = init_weights(GcnConfig(in_dim=6, hidden_dims=(4,), out_dim=3, seed=2))
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
        assert not np.array_equal(a.weights[0], c.weights[0])

    def test_glorot_bound(self):
        model = init_weights(GcnConfig())
        for w in model.weights:
            limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            assert np.abs(w).max() <= limit

    def test_default_shapes(self):
        model = init_weights(GcnConfig())
        assert [w.shape for w in model.weights] == [(512, 256), (256, 128)]

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            GcnConfig(in_dim=0)


class TestForward:

    def test_identity_network(self, rng):
        x = rng.standard_normal((4, 3))
        model = GcnModel(GcnConfig(in_dim=3, hidden_dims=(), out_dim=3), (np.eye(3),))
        h, _ = forward(model, identity(4), x)
        np.testing.assert_array_equal(h, x)

    def test_two_node_hand_case(self):
        a_hat = csr_from_coo([0, 0, 1, 1], [0, 1, 0, 1], [0.5] * 4, (2, 2))
        model = GcnModel(GcnConfig(in_dim=1, hidden_dims=(), out_dim=1), (np.array([[1.0]]),))
        h, _ = forward(model, a_hat, np.array([[1.0], [3.0]]))
        np.testing.assert_array_equal(h, [[2.0], [2.0]])

    def test_identity_propagation_is_xw(self, rng):
        w = rng.standard_normal((5, 2))
        x = rng.standard_normal((7, 5))
        model = GcnModel(GcnConfig(in_dim=5, hidden_dims=(), out_dim=2), (w,))
        np.testing.assert_array_equal(forward(model, identity(7), x)[0], x @ w)

    def test_matches_dense_oracle(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 12))
            model = _random_model(rng, 4, int(rng.integers(1, 4)), bias=bool(rng.integers(2)))
            a_hat = _random_propagation(rng, n)
            x = rng.standard_normal((n, 4))
            expected = _dense_forward(model, a_hat.toarray(), x)
            np.testing.assert_allclose(forward(model, a_hat, x)[0], expected, rtol=1e-12, atol=1e-12)

    def test_last_layer_is_linear(self, rng):
        model = _random_model(rng, 4, 2)
        h, cache = forward(model, identity(6), rng.standard_normal((6, 4)))
        np.testing.assert_array_equal(h, cache.pre_activations[-1])

    def test_shape_mismatch(self, rng):
        model = _random_model(rng, 4, 2)
        with pytest.raises(ShapeMismatchError):
            forward(model, identity(3), rng.standard_normal((3, 5)))
        with pytest.raises(ShapeMismatchError):
            forward(model, identity(3), rng.standard_normal((4, 4)))


class TestBackward:

    def test_zero_upstream(self, rng):
        model = _random_model(rng, 4, 3)
        _, cache = forward(model, identity(5), rng.standard_normal((5, 4)))
        grads = backward(model, cache, np.zeros((5, 3)))
        assert all(not g.any() for g in grads.weights)

    def test_linear_hand_case(self):
        a_hat = csr_from_coo([0, 0, 1, 1], [0, 1, 0, 1], [0.5] * 4, (2, 2))
        x = np.array([[1.0], [3.0]])
        model = GcnModel(GcnConfig(in_dim=1, hidden_dims=(), out_dim=1), (np.array([[2.0]]),))
        _, cache = forward(model, a_hat, x)
        grads = backward(model, cache, np.array([[1.0], [-0.5]]))
        # (A x)^T g = [2, 2] . [1, -0.5]
        np.testing.assert_array_equal(grads.weights[0], [[1.0]])

    def test_finite_differences(self, rng):
        for _ in range(10):
            n = int(rng.integers(3, 21))
            model = _random_model(rng, 3, int(rng.integers(1, 4)), bias=bool(rng.integers(2)))
            a_hat = _random_propagation(rng, n)
            x = rng.standard_normal((n, 3))
            g = rng.standard_normal((n, 3))
            _, cache = forward(model, a_hat, x)
            analytic = backward(model, cache, g).parameters()
            numeric = _numeric_gradients(model, a_hat, x, g)
            for a, n in zip(analytic, numeric):
                np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-6)

    def test_matches_torch_autograd(self, rng):
        torch = pytest.importorskip("torch")
        n = 9
        model = _random_model(rng, 4, 3, bias=True)
        a_hat = _random_propagation(rng, n)
        x = rng.standard_normal((n, 4))
        g = rng.standard_normal((n, 3))
        _, cache = forward(model, a_hat, x)
        analytic = backward(model, cache, g)

        a_t = torch.tensor(a_hat.toarray(), dtype=torch.float64)
        ws = [torch.tensor(w, dtype=torch.float64, requires_grad=True) for w in model.weights]
        bs = [torch.tensor(b, dtype=torch.float64, requires_grad=True) for b in model.biases]
        h = torch.tensor(x, dtype=torch.float64)
        for i, (w, b) in enumerate(zip(ws, bs)):
            h = a_t @ h @ w + b
            if i < len(ws) - 1:
                h = torch.relu(h)
        (h * torch.tensor(g, dtype=torch.float64)).sum().backward()
        for ours, theirs in zip(analytic.weights, ws):
            np.testing.assert_allclose(ours, theirs.grad.numpy(), rtol=1e-10, atol=1e-12)
        for ours, theirs in zip(analytic.biases, bs):
            np.testing.assert_allclose(ours, theirs.grad.numpy(), rtol=1e-10, atol=1e-12)

    def test_shape_mismatch(self, rng):
        model = _random_model(rng, 4, 2)
        _, cache = forward(model, identity(5), rng.standard_normal((5, 4)))
        with pytest.raises(ShapeMismatchError):
            backward(model, cache, np.zeros((5, 2)))

    def test_gradients_add_elementwise(self):
        a = GcnGradients((np.ones((2, 2)),), (np.ones(2),))
        b = GcnGradients((np.full((2, 2), 2.0),), (np.zeros(2),))
        total = a + b
        np.testing.assert_array_equal(total.weights[0], np.full((2, 2), 3.0))
        np.testing.assert_array_equal(total.biases[0], np.ones(2))
        with pytest.raises(ShapeMismatchError):
            a + GcnGradients((np.ones((2, 2)),))


class TestCheckpoint:

    def test_round_trip_bit_exact(self, tmp_path, rng):
        model = _random_model(rng, 5, 3)
        path = save_checkpoint(model, tmp_path / "m.gck1")
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        assert all(a.tobytes() == b.tobytes() for a, b in zip(loaded.weights, model.weights))
        x = rng.standard_normal((4, 5))
        np.testing.assert_array_equal(forward(loaded, identity(4), x)[0], forward(model, identity(4), x)[0])

    def test_round_trip_with_bias(self, tmp_path, rng):
        model = _random_model(rng, 3, 2, bias=True)
        loaded = load_checkpoint(save_checkpoint(model, tmp_path / "b.gck1"))
        assert all(np.array_equal(a, b) for a, b in zip(loaded.biases, model.biases))

    def test_without_sidecar_config_is_inferred(self, tmp_path, rng):
        model = _random_model(rng, 5, 2)
        path = save_checkpoint(model, tmp_path / "m.gck1")
        (tmp_path / "m.gck1.json").unlink()
        loaded = load_checkpoint(path)
        assert loaded.config.layer_dims == model.config.layer_dims

    @pytest.mark.parametrize("bias", [False, True])
    def test_header_counts_layers(self, tmp_path, rng, bias):
        model = _random_model(rng, 4, 3, bias=bias)
        raw = save_checkpoint(model, tmp_path / "m.gck1").read_bytes()
        assert struct.unpack("<I", raw[4:8]) == (3,)

    def test_bias_inferred_without_sidecar(self, tmp_path, rng):
        model = _random_model(rng, 4, 2, bias=True)
        path = save_checkpoint(model, tmp_path / "b.gck1")
        (tmp_path / "b.gck1.json").unlink()
        loaded = load_checkpoint(path)
        assert loaded.config.bias and loaded.config.layer_dims == model.config.layer_dims
        assert all(np.array_equal(a, b) for a, b in zip(loaded.biases, model.biases))

    def test_bias_disagrees_with_config(self, tmp_path, rng):
        model = _random_model(rng, 4, 2, bias=True)
        path = save_checkpoint(model, tmp_path / "b.gck1")
        plain = GcnConfig(in_dim=4, hidden_dims=model.config.hidden_dims, out_dim=3)
        with pytest.raises(CheckpointError, match="bias"):
            load_checkpoint(path, plain)

    def test_same_model_same_bytes(self, tmp_path):
        model = init_weights(GcnConfig(in_dim=4, hidden_dims=(3,), out_dim=2, seed=5))
        a = save_checkpoint(model, tmp_path / "a.gck1").read_bytes()
        b = save_checkpoint(model, tmp_path / "b.gck1").read_bytes()
        assert a == b and a[:4] == CHECKPOINT_MAGIC

    def test_corrupt_magic(self, tmp_path, rng):
        path = save_checkpoint(_random_model(rng, 3, 2), tmp_path / "m.gck1")
        raw = path.read_bytes()
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_flipped_byte_fails_checksum(self, tmp_path, rng):
        path = save_checkpoint(_random_model(rng, 3, 2), tmp_path / "m.gck1")
        raw = bytearray(path.read_bytes())
        raw[20] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_dims_disagree_with_header(self, tmp_path, rng):
        from gcn import _checksum
        path = tmp_path / "m.gck1"
        # header says 2x3 but only 4 values follow
        payload = struct.pack("<I", 1) + struct.pack("<II", 2, 3) + np.zeros(4).astype("<f8").tobytes()
        path.write_bytes(CHECKPOINT_MAGIC + payload + struct.pack("<Q", _checksum(payload)))
        with pytest.raises(CheckpointError, match="2x3"):
            load_checkpoint(path)

    def test_config_mismatch(self, tmp_path, rng):
        path = save_checkpoint(_random_model(rng, 3, 2), tmp_path / "m.gck1")
        with pytest.raises(CheckpointError):
            load_checkpoint(path, GcnConfig(in_dim=7, hidden_dims=(2,), out_dim=3))
