import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffcard.mlp import AdamState, Mlp, adam_step


def fd_gradients(net64, x, gout, h=1e-6):
    """Central differences of sum(forward(x) * gout) for every parameter of a float64 net."""
    out = []
    for p in net64.params():
        g = np.zeros(p.shape)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = np.sum(net64.forward(x) * gout)
            flat[i] = old - h
            dn = np.sum(net64.forward(x) * gout)
            flat[i] = old
            gflat[i] = (up - dn) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    a = np.concatenate([np.ravel(v) for v in a]).astype(np.float64)
    b = np.concatenate([np.ravel(v) for v in b]).astype(np.float64)
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestForward:
    def test_zero_net(self):
        net = Mlp.zeros([3, 5, 2])
        np.testing.assert_array_equal(net.forward(np.ones(3)), np.zeros(2))

    def test_linear_unit(self):
        net = Mlp.zeros([1, 1])
        net.weights[0][...] = 2
        net.biases[0][...] = 1
        assert net.forward(np.array([3.0]))[0] == 7.0

    def test_deterministic(self, rng):
        net = Mlp([4, 16, 16, 3], "tanh", rng)
        x = rng.standard_normal((10, 4))
        np.testing.assert_array_equal(net.forward(x), net.forward(x))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Mlp.zeros([3, 2]).forward(np.ones(4))

    def test_param_count_and_blob_size(self):
        net = Mlp([7, 96, 96, 96, 15], "tanh", 0)
        assert net.n_params == 7 * 96 + 96 + 2 * (96 * 96 + 96) + 96 * 15 + 15
        assert len(net.to_blob()) == 4 * net.n_params

    def test_dtype_is_float32(self):
        net = Mlp([2, 3, 1], "relu", 0)
        assert all(p.dtype == np.float32 for p in net.params())


class TestBackward:
    def test_linear_gradient_is_input(self):
        net = Mlp.zeros([1, 1])
        net.weights[0][...] = 0.7
        grads = net.backward(np.array([[2.5]]), np.array([[1.0]]))
        assert grads[0][0, 0] == pytest.approx(2.5)
        assert grads[1][0] == pytest.approx(1.0)

    def test_zero_output_grad(self, rng):
        net = Mlp([3, 8, 3], "tanh", rng)
        x = rng.standard_normal((5, 3))
        for g in net.backward(x, np.zeros((5, 3))):
            assert not g.any()

    def test_shape_mismatch(self, rng):
        net = Mlp([3, 8, 3], "tanh", rng)
        with pytest.raises(ValueError):
            net.backward(np.ones((2, 3)), np.ones((2, 4)))

    def test_small_tanh_net(self, rng):
        net = Mlp([3, 8, 3], "tanh", rng)
        x = rng.standard_normal((6, 3))
        gout = rng.standard_normal((6, 3))
        assert rel_err(net.backward(x, gout), fd_gradients(net.astype(np.float64), x, gout)) < 1e-4

    @settings(max_examples=15, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.sampled_from(["tanh", "relu"]),
           st.integers(0, 1000))
    def test_random_shapes(self, widths, act, seed):
        r = np.random.default_rng(seed)
        net = Mlp(widths, act, r)
        for b in net.biases:
            b[...] = r.standard_normal(b.shape) * 0.1
        x = r.standard_normal((4, widths[0]))
        gout = r.standard_normal((4, widths[-1]))
        fd = fd_gradients(net.astype(np.float64), x, gout)
        if np.linalg.norm(np.concatenate([g.ravel() for g in fd])) < 1e-8:
            return
        assert rel_err(net.backward(x, gout), fd) < 1e-4


class TestAdam:
    def test_zero_grads(self, rng):
        net = Mlp([2, 4, 1], "tanh", rng)
        before = [p.copy() for p in net.params()]
        adam_step(net, [np.zeros_like(p) for p in net.params()], AdamState.for_net(net))
        for a, b in zip(before, net.params()):
            np.testing.assert_array_equal(a, b)

    def test_step_counter(self, rng):
        net = Mlp([2, 1], "tanh", rng)
        st_ = AdamState.for_net(net)
        for i in range(3):
            adam_step(net, [np.ones_like(p) for p in net.params()], st_)
            assert st_.step == i + 1

    def test_scalar_quadratic(self):
        net = Mlp.zeros([1, 1])
        st_ = AdamState.for_net(net, lr=0.05)
        for _ in range(500):
            w = float(net.weights[0][0, 0])
            adam_step(net, [np.array([[2 * (w - 3)]], dtype=np.float32), np.zeros(1, np.float32)], st_)
        assert abs(float(net.weights[0][0, 0]) - 3) < 0.05

    def test_monotone_on_fixed_quadratic(self, rng):
        net = Mlp([3, 5, 2], "tanh", rng)
        x = rng.standard_normal((32, 3))
        y = rng.standard_normal((32, 2))
        st_ = AdamState.for_net(net, lr=1e-3)
        losses = []
        for _ in range(100):
            out, acts = net.forward_cached(x)
            r = out - y
            losses.append(float(np.mean(np.sum(r.astype(np.float64) ** 2, axis=1))))
            adam_step(net, net.backward(x, 2 * r / len(x), acts), st_)
        assert np.all(np.diff(losses) < 0)


class TestSerialization:
    def test_round_trip_bit_exact(self, rng):
        net = Mlp([5, 12, 12, 4], ["tanh", "relu"], rng)
        back = Mlp.from_blob(net.to_blob(), net.widths, net.activations)
        x = rng.standard_normal((20, 5))
        np.testing.assert_array_equal(net.forward(x), back.forward(x))

    def test_wrong_blob_size(self):
        with pytest.raises(ValueError):
            Mlp.from_blob(b"\0" * 8, [2, 3], [])
