"""Network forward/backward correctness and optimizer behaviour."""

import numpy as np
import pytest

from bridgeforge.scorenet import AdamState, ScoreNetwork


def _loss_and_upstream(net, inputs, target):
    out = net.apply(inputs)
    return 0.5 * float(((out - target) ** 2).sum()), out - target


class TestForward:
    def test_zero_output_layer_gives_zero_score(self):
        net = ScoreNetwork(dim=3, seed=4)
        gen = np.random.default_rng(0)
        for _ in range(5):
            t = gen.uniform(0, 1)
            x = gen.normal(size=3)
            np.testing.assert_array_equal(net.forward(t, x), np.zeros(3))

    def test_batch_rows_equal_single_evaluations(self):
        net = ScoreNetwork(dim=2, hidden=(16, 16), seed=1)
        # give the zero output layer some weight so outputs are nontrivial
        net.weights[-1][:] = np.random.default_rng(2).normal(size=net.weights[-1].shape)
        gen = np.random.default_rng(3)
        t = gen.uniform(0, 1, 9)
        X = gen.normal(size=(9, 2))
        batch_out = net.forward(t, X)
        for i in range(9):
            np.testing.assert_allclose(batch_out[i], net.forward(t[i], X[i]),
                                       rtol=0, atol=1e-13)

    def test_single_input_returns_vector(self):
        net = ScoreNetwork(dim=2, seed=0)
        out = net.forward(0.5, np.array([0.1, 0.2]))
        assert out.shape == (2,)

    def test_conditioned_network_requires_y(self):
        net = ScoreNetwork(dim=2, conditioned=True, seed=0)
        with pytest.raises(ValueError):
            net.forward(0.5, np.zeros(2))
        out = net.forward(0.5, np.zeros(2), np.ones(2))
        assert out.shape == (2,)

    def test_unconditioned_network_rejects_y(self):
        net = ScoreNetwork(dim=2, seed=0)
        with pytest.raises(ValueError):
            net.forward(0.5, np.zeros(2), np.ones(2))

    def test_dimension_mismatch_rejected(self):
        net = ScoreNetwork(dim=2, seed=0)
        with pytest.raises(ValueError):
            net.forward(0.5, np.zeros(3))

    def test_finite_output_for_finite_input(self):
        net = ScoreNetwork(dim=1, seed=9)
        net.weights[-1][:] = 3.0
        X = np.array([[1e6], [-1e6], [0.0]])
        assert np.isfinite(net.forward(0.3, X)).all()

    def test_parameter_count_matches_declared_sizes(self):
        net = ScoreNetwork(dim=2, hidden=(8, 4), time_features=3, seed=0)
        sizes = net.sizes
        expected = sum(sizes[k] * sizes[k + 1] + sizes[k + 1]
                       for k in range(len(sizes) - 1))
        assert net.n_params == expected


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        net = ScoreNetwork(dim=2, hidden=(8,), seed=5)
        inputs = np.random.default_rng(6).normal(size=(10, net.input_dim))
        grads = net.backward(inputs, np.zeros((10, 2)))
        for g in grads.values():
            assert np.all(g == 0.0)

    def test_linear_network_matches_least_squares_gradient(self):
        net = ScoreNetwork(dim=2, hidden=(), time_features=1, seed=7)
        gen = np.random.default_rng(8)
        net.weights[0][:] = gen.normal(size=net.weights[0].shape)
        net.biases[0][:] = gen.normal(size=2)
        X = gen.normal(size=(20, net.input_dim))
        Y = gen.normal(size=(20, 2))
        _, upstream = _loss_and_upstream(net, X, Y)
        grads = net.backward(X, upstream)
        resid = X @ net.weights[0] + net.biases[0] - Y
        np.testing.assert_allclose(grads["W0"], X.T @ resid, rtol=1e-12, atol=0)
        np.testing.assert_allclose(grads["b0"], resid.sum(axis=0), rtol=1e-12,
                                   atol=0)

    @pytest.mark.parametrize("conditioned", [False, True])
    def test_gradients_match_finite_differences(self, conditioned):
        net = ScoreNetwork(dim=1, hidden=(8, 8), time_features=2,
                           conditioned=conditioned, seed=11)
        gen = np.random.default_rng(12)
        for W in net.weights:
            W[:] = gen.normal(size=W.shape) / np.sqrt(W.shape[0])
        for b in net.biases:
            b[:] = 0.1 * gen.normal(size=b.shape)
        inputs = gen.normal(size=(16, net.input_dim))
        target = gen.normal(size=(16, 1))
        _, upstream = _loss_and_upstream(net, inputs, target)
        grads = net.backward(inputs, upstream)

        h = 1e-4
        params = net.parameters()
        for name, arr in params.items():
            flat = arr.reshape(-1)
            coords = gen.choice(flat.size, size=min(10, flat.size),
                                replace=False)
            for idx in coords:
                old = flat[idx]
                flat[idx] = old + h
                lp, _ = _loss_and_upstream(net, inputs, target)
                flat[idx] = old - h
                lm, _ = _loss_and_upstream(net, inputs, target)
                flat[idx] = old
                fd = (lp - lm) / (2 * h)
                an = grads[name].reshape(-1)[idx]
                denom = max(abs(fd), abs(an), 1e-8)
                assert abs(fd - an) / denom <= 1e-3, (name, idx, fd, an)

    def test_upstream_shape_checked(self):
        net = ScoreNetwork(dim=2, seed=0)
        inputs = np.zeros((4, net.input_dim))
        with pytest.raises(ValueError):
            net.backward(inputs, np.zeros((4, 3)))

    def test_workspace_reuse_is_bitwise_equivalent(self):
        net = ScoreNetwork(dim=2, seed=13)
        gen = np.random.default_rng(14)
        for W in net.weights:
            W[:] = gen.normal(size=W.shape) / np.sqrt(W.shape[0])
        inputs = gen.normal(size=(32, net.input_dim))
        upstream = gen.normal(size=(32, 2))
        out_a, acts_a = net.apply_cached(inputs)
        grads_a = net.backward(inputs, upstream, acts=acts_a)
        work = net.make_workspace(32)
        out_b, acts_b = net.apply_cached(inputs, work=work)
        grads_b = net.backward(inputs, upstream, acts=acts_b, work=work)
        np.testing.assert_array_equal(out_a, out_b)
        for name in grads_a:
            np.testing.assert_array_equal(grads_a[name], grads_b[name])


class _OneParam:
    """Minimal parameter holder for driving the optimizer directly."""

    def __init__(self, w0):
        self._params = {"w": np.array([float(w0)])}

    def parameters(self):
        return self._params

    @property
    def w(self):
        return self._params["w"][0]


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        net = ScoreNetwork(dim=1, seed=15)
        before = net.flat_params()
        opt = AdamState(net)
        opt.step(net, {k: np.zeros_like(v) for k, v in net.parameters().items()})
        np.testing.assert_array_equal(net.flat_params(), before)

    def test_constant_gradient_moves_against_it(self):
        stub = _OneParam(0.0)
        opt = AdamState(stub, lr=1e-2)
        values = []
        for _ in range(50):
            opt.step(stub, {"w": np.array([2.5])})
            values.append(stub.w)
        diffs = np.diff([0.0] + values)
        assert np.all(diffs < 0.0)

    def test_quadratic_loss_converges(self):
        # f(w) = 0.5 (w - 1)^2 from w = 0: within 1e-3 of the minimum
        stub = _OneParam(0.0)
        opt = AdamState(stub, lr=1e-2)
        for _ in range(500):
            opt.step(stub, {"w": stub._params["w"] - 1.0})
        assert abs(stub.w - 1.0) <= 1e-3

    def test_step_counter_increments(self):
        stub = _OneParam(0.0)
        opt = AdamState(stub, lr=1e-2)
        for expected in (1, 2, 3):
            opt.step(stub, {"w": np.array([1.0])})
            assert opt.t == expected

    def test_nonfinite_gradient_names_parameter(self):
        net = ScoreNetwork(dim=1, seed=16)
        opt = AdamState(net)
        grads = {k: np.zeros_like(v) for k, v in net.parameters().items()}
        grads["W2"][0, 0] = np.nan
        with pytest.raises(FloatingPointError, match="W2"):
            opt.step(net, grads)


class TestSerialization:
    def test_checkpoint_round_trip_is_bitwise(self, tmp_path):
        net = ScoreNetwork(dim=3, hidden=(16, 8), time_features=4,
                           horizon=2.0, conditioned=True, seed=17)
        gen = np.random.default_rng(18)
        net.set_flat_params(gen.normal(size=net.n_params))
        path = tmp_path / "ckpt.npz"
        net.save(path)
        back = ScoreNetwork.load(path)
        np.testing.assert_array_equal(back.flat_params(), net.flat_params())
        assert back.arch() == net.arch()
        x = gen.normal(size=(5, 3))
        y = gen.normal(size=(5, 3))
        np.testing.assert_array_equal(back.forward(0.7, x, y),
                                      net.forward(0.7, x, y))

    def test_same_seed_same_initialization(self):
        a = ScoreNetwork(dim=2, seed=19)
        b = ScoreNetwork(dim=2, seed=19)
        np.testing.assert_array_equal(a.flat_params(), b.flat_params())

    def test_flat_params_round_trip(self):
        net = ScoreNetwork(dim=2, seed=20)
        flat = np.arange(net.n_params, dtype=np.float64)
        net.set_flat_params(flat)
        np.testing.assert_array_equal(net.flat_params(), flat)

    def test_set_flat_params_checks_size(self):
        net = ScoreNetwork(dim=2, seed=21)
        with pytest.raises(ValueError):
            net.set_flat_params(np.zeros(3))
