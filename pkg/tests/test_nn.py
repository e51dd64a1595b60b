import math

import numpy as np
import pytest

from sfb.errors import BadSplit, ShapeMismatch, StaleTape
from sfb.nn import (
    AdamState,
    DenseNet,
    Layer,
    adam_step,
    backward,
    cosine_lr,
    forward,
    split,
)


def naive_forward(layers, x):
    """Row-by-row recomputation without the tape machinery."""
    out = []
    for row in x:
        h = list(row)
        for layer in layers:
            w, b = layer.weight, layer.bias
            z = [sum(h[i] * w[i, j] for i in range(len(h))) + b[j] for j in range(len(b))]
            h = [max(v, 0.0) for v in z] if layer.activation == "relu" else z
        out.append(h)
    return np.array(out)


def finite_difference_grads(net, x, weights, h=1e-5):
    """Central differences of sum(weights * net(x)) w.r.t. every parameter."""
    grads = []
    for p in net.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = np.sum(weights * forward(net, x)[0])
            p[idx] = old - h
            down = np.sum(weights * forward(net, x)[0])
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))


class TestForward:
    def test_identity_layer(self):
        net = DenseNet([Layer(np.eye(3), np.zeros(3), "identity")])
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(net(x), x)

    def test_zero_weights_give_bias(self):
        b = np.array([1.5, -2.0])
        net = DenseNet([Layer(np.zeros((4, 2)), b, "identity")])
        np.testing.assert_array_equal(net(np.ones((5, 4))), np.tile(b, (5, 1)))

    def test_matches_naive_recomputation(self):
        net = DenseNet.create([3, 5, 2], seed=4)
        x = np.random.default_rng(0).normal(size=(7, 3))
        np.testing.assert_allclose(net(x), naive_forward(net.layers, x), atol=1e-12)

    def test_shape_mismatch(self):
        net = DenseNet.create([3, 2])
        with pytest.raises(ShapeMismatch):
            net(np.ones((2, 4)))

    def test_layers_must_chain(self):
        with pytest.raises(ShapeMismatch):
            DenseNet([Layer(np.ones((2, 3)), np.zeros(3)), Layer(np.ones((4, 1)), np.zeros(1))])


class TestBackward:
    def test_zero_output_grads(self):
        net = DenseNet.create([3, 4, 2], seed=1)
        out, tape = forward(net, np.ones((2, 3)))
        for g in backward(tape, np.zeros_like(out)):
            assert not g.any()

    def test_scalar_linear(self):
        net = DenseNet([Layer(np.array([[2.0]]), np.array([0.0]), "identity")])
        x = np.array([[3.0]])
        _, tape = forward(net, x)
        dw, db = backward(tape, np.ones((1, 1)))
        assert dw[0, 0] == 3.0
        assert db[0] == 1.0

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        depth = rng.integers(1, 4)
        sizes = [int(rng.integers(1, 17)) for _ in range(depth + 1)]
        net = DenseNet.create(sizes, seed=seed)
        x = rng.normal(size=(int(rng.integers(1, 6)), sizes[0]))
        w = rng.normal(size=(len(x), sizes[-1]))
        _, tape = forward(net, x)
        analytic = backward(tape, w)
        numeric = finite_difference_grads(net, x, w)
        for a, n in zip(analytic, numeric):
            assert relative_error(a, n) <= 1e-4

    def test_stale_tape(self):
        net = DenseNet.create([2, 2])
        out, tape = forward(net, np.ones((1, 2)))
        net.mark_updated()
        with pytest.raises(StaleTape):
            backward(tape, out)

    def test_input_gradient(self):
        net = DenseNet.create([3, 4, 1], seed=2)
        x = np.random.default_rng(3).normal(size=(1, 3))
        _, tape = forward(net, x)
        _, gx = backward(tape, np.ones((1, 1)), return_input_grad=True)
        h = 1e-6
        for i in range(3):
            e = np.zeros_like(x)
            e[0, i] = h
            fd = (net(x + e) - net(x - e))[0, 0] / (2 * h)
            assert gx[0, i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestDeterminismAndDropout:
    def test_bit_identical_for_same_seed(self):
        x = np.random.default_rng(0).normal(size=(8, 4))
        runs = []
        for _ in range(2):
            net = DenseNet.create([4, 6, 3], dropout_p=0.3, seed=11)
            out, tape = forward(net, x, train_mode=True)
            runs.append((out, backward(tape, np.ones_like(out))))
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        for a, b in zip(runs[0][1], runs[1][1]):
            np.testing.assert_array_equal(a, b)

    def test_eval_mode_ignores_dropout(self):
        net = DenseNet.create([4, 6, 3], dropout_p=0.5, seed=1)
        x = np.ones((2, 4))
        np.testing.assert_array_equal(net(x), net(x))

    def test_inverted_dropout_expectation(self):
        net = DenseNet.create([5, 6, 3], dropout_p=0.2, seed=3)
        x = np.random.default_rng(2).normal(size=(1, 5))
        reference = net(x)
        draws = np.repeat(x, 10_000, axis=0)
        mean = net(draws, train_mode=True).mean(axis=0)
        rel = np.abs(mean - reference[0]) / np.maximum(np.abs(reference[0]), 1e-3)
        assert (rel <= 0.02).all()


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [np.array([1.0, 2.0])]
        state = AdamState.zeros_like(p)
        adam_step(p, [np.zeros(2)], state, lr=0.1)
        np.testing.assert_array_equal(p[0], [1.0, 2.0])
        assert state.step == 1

    def test_first_step_magnitude(self):
        p = [np.array([0.0, 0.0])]
        state = AdamState.zeros_like(p)
        adam_step(p, [np.array([3.0, -0.5])], state, lr=0.01)
        np.testing.assert_allclose(p[0], [-0.01, 0.01], rtol=1e-6)

    def test_quadratic_convergence(self):
        # scalar oracle: the same recursion written out by hand
        w_ref, m, v = 0.0, 0.0, 0.0
        for t in range(1, 201):
            g = 2 * (w_ref - 3)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w_ref -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        w = [np.array([0.0])]
        state = AdamState.zeros_like(w)
        for _ in range(200):
            adam_step(w, [2 * (w[0] - 3)], state, lr=0.1)
        assert w[0][0] == pytest.approx(w_ref, abs=1e-12)
        assert abs(w[0][0] - 3) < 0.05

    def test_shape_mismatch(self):
        p = [np.zeros(2)]
        with pytest.raises(ShapeMismatch):
            adam_step(p, [np.zeros(3)], AdamState.zeros_like(p), lr=0.1)


def test_cosine_schedule_endpoints():
    assert cosine_lr(1e-4, 0, 600) == 1e-4
    assert cosine_lr(1e-4, 300, 600) == pytest.approx(5e-5)
    assert cosine_lr(1e-4, 600, 600) == pytest.approx(0.0, abs=1e-20)


class TestSplit:
    def test_halves(self):
        s = split(np.arange(8.0), 4)
        assert s.phi_s.shape == (4,) and s.phi_u.shape == (4,)

    def test_bad_split(self):
        with pytest.raises(BadSplit):
            split(np.arange(8.0), 8)
        with pytest.raises(BadSplit):
            split(np.arange(8.0), 0)

    def test_roundtrip(self):
        h = np.random.default_rng(0).normal(size=(3, 8))
        np.testing.assert_array_equal(split(h, 3).concat(), h)


def test_checkpoint_roundtrip(tmp_path):
    net = DenseNet.create([3, 4, 2], dropout_p=0.2, seed=5)
    opt = AdamState.zeros_like(net.params())
    g = [np.ones_like(p) for p in net.params()]
    adam_step(net.params(), g, opt, lr=0.1)
    net.save(tmp_path / "net.json", opt)
    loaded = DenseNet.load(tmp_path / "net.json")
    x = np.ones((2, 3))
    np.testing.assert_array_equal(loaded(x), net(x))
    import json
    restored = loaded.optimizer_from_dict(json.loads((tmp_path / "net.json").read_text()))
    assert restored.step == 1
    for a, b in zip(restored.m, opt.m):
        np.testing.assert_array_equal(a, b)
