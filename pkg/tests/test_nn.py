import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genbayes import nn
from genbayes.nn import DenseLayer, DimensionError, Mlp, NonFiniteError, TrainConfig


def random_net(seed, sizes=(3, 5, 4, 2), act="tanh"):
    return Mlp.init(list(sizes), act, nn.make_rng(seed))


class TestForward:
    def test_identity_layer(self):
        net = Mlp([DenseLayer(np.eye(2), np.zeros(2), "identity")])
        np.testing.assert_array_equal(nn.predict(net, [3.0, -1.0]), [3.0, -1.0])

    def test_sigmoid_of_zero(self):
        net = Mlp([DenseLayer([[0.0]], [0.0], "sigmoid")])
        for v in (-7.0, 0.0, 123.0):
            assert nn.predict(net, [v])[0] == 0.5

    def test_two_layer_relu_matches_hand_composition(self):
        w1 = np.array([[1.0, -2.0], [0.5, 0.25], [-1.0, 1.0]])
        b1 = np.array([0.1, -0.2, 0.0])
        w2 = np.array([[2.0, -1.0, 0.5]])
        b2 = np.array([0.3])
        net = Mlp([DenseLayer(w1, b1, "relu"), DenseLayer(w2, b2, "relu")])
        x = np.array([0.7, -0.4])
        # hidden: relu(0.7+0.8+0.1, 0.35-0.1-0.2, -0.7-0.4) = (1.6, 0.05, 0)
        # out: relu(3.2 - 0.05 + 0 + 0.3) = 3.45
        assert nn.predict(net, x)[0] == pytest.approx(3.45, abs=1e-14)

    def test_batch_matches_rows(self):
        net = random_net(0)
        X = nn.make_rng(1).standard_normal((6, 3))
        batch = nn.predict(net, X)
        for i in range(6):
            np.testing.assert_allclose(nn.predict(net, X[i]), batch[i], rtol=0, atol=1e-15)

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            nn.forward(random_net(0), np.zeros(4))

    def test_incompatible_layers(self):
        with pytest.raises(DimensionError):
            Mlp([DenseLayer(np.zeros((2, 3)), np.zeros(2)), DenseLayer(np.zeros((1, 3)), np.zeros(1))])

    def test_bias_length_invariant(self):
        with pytest.raises(DimensionError):
            DenseLayer(np.zeros((2, 3)), np.zeros(3))

    def test_forward_does_not_mutate(self):
        net = random_net(3)
        before = {k: v.copy() for k, v in net.parameters().items()}
        nn.forward(net, np.ones(3))
        for k, v in net.parameters().items():
            np.testing.assert_array_equal(v, before[k])


class TestBackward:
    def test_stationary_point(self):
        # y = 2x fitted exactly by w = 2
        net = Mlp([DenseLayer([[2.0]], [0.0], "identity")])
        x = np.array([[1.0], [-3.0], [0.5]])
        trace = nn.forward(net, x)
        _, g = nn.mse_loss(trace.output, 2.0 * x)
        grads = nn.backward(net, trace, g)
        assert np.all(grads.weights[0] == 0) and np.all(grads.bias[0] == 0)
        assert np.all(grads.input == 0)

    def test_bce_logit_gradient(self):
        net = Mlp([DenseLayer([[0.0]], [0.0], "sigmoid")])
        trace = nn.forward(net, [1.0])
        _, g = nn.bce_loss(trace.output, np.array([1.0]))
        grads = nn.backward(net, trace, g)
        # dL/dlogit = sigmoid(0) - 1, and the bias sees exactly that
        assert grads.bias[0][0] == pytest.approx(-0.5, abs=1e-12)

    def test_shapes_match_parameters(self):
        net = random_net(1, (4, 7, 3))
        trace = nn.forward(net, np.ones((5, 4)))
        grads = nn.backward(net, trace, np.ones((5, 3)))
        for layer, gw, gb in zip(net.layers, grads.weights, grads.bias):
            assert gw.shape == layer.weights.shape and gb.shape == layer.bias.shape
        assert grads.input.shape == (5, 4)

    def test_mismatched_trace(self):
        trace = nn.forward(random_net(0), np.ones(3))
        with pytest.raises(DimensionError):
            nn.backward(random_net(0, (3, 6, 2)), trace, np.ones(2))

    def test_random_three_layer_against_finite_differences(self):
        net = random_net(11, (3, 6, 5, 2), "tanh")
        x = nn.make_rng(12).standard_normal((4, 3))
        target = nn.make_rng(13).standard_normal((4, 2))
        assert nn.grad_check(net, lambda out: nn.mse_loss(out, target), x, 1e-5) < 1e-4


def away_from_relu_kinks(net, x, margin=1e-6):
    trace = nn.forward(net, x)
    return all(np.min(np.abs(p)) > margin for p, l in zip(trace.pre, net.layers) if l.activation == "relu")


class TestGradCheck:
    def test_zero_loss(self):
        assert nn.grad_check(random_net(0), lambda out: (0.0, np.zeros_like(out)), np.ones(3)) == 0.0

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            nn.grad_check(random_net(0), lambda out: (0.0, np.zeros_like(out)), np.ones(3), step=0)

    def test_nan_gradient_raises(self):
        with pytest.raises(NonFiniteError):
            nn.grad_check(random_net(0), lambda out: (0.0, np.full_like(out, np.nan)), np.ones(3))

    @pytest.mark.parametrize("q", [0.1, 0.5, 0.9])
    def test_pinball(self, q):
        net = random_net(5, (3, 8, 6, 1), "tanh")
        x = nn.make_rng(6).standard_normal((10, 3))
        y = nn.make_rng(7).standard_normal((10, 1))
        assert np.min(np.abs(nn.predict(net, x) - y)) > 1e-3
        assert nn.grad_check(net, lambda out: nn.pinball_loss(out, y, q), x) < 1e-4

    def test_bce(self):
        net = random_net(8, (3, 6, 5, 1), "tanh")
        net.layers[-1].activation = "sigmoid"
        x = nn.make_rng(9).standard_normal((10, 3))
        z = (nn.make_rng(10).random((10, 1)) < 0.5).astype(float)
        assert nn.grad_check(net, lambda out: nn.bce_loss(out, z), x) < 1e-6


class TestLosses:
    def test_pinball_symmetric_at_median(self):
        assert nn.pinball_loss(np.array([0.0]), np.array([2.0]), 0.5)[0] == 1.0
        assert nn.pinball_loss(np.array([0.0]), np.array([-2.0]), 0.5)[0] == 1.0

    def test_pinball_kink_subgradient(self):
        _, g = nn.pinball_loss(np.array([1.0]), np.array([1.0]), 0.3)
        assert g[0] == -0.3

    def test_crossing_examples(self):
        assert nn.crossing_penalty(np.array([1.0]), np.array([0.5]), 0.3)[0] == 0.0
        assert nn.crossing_penalty(np.array([1.0]), np.array([0.0]), 0.7)[0] == 1.0
        for yq in (-5.0, 1.0, 5.0):
            assert nn.crossing_penalty(np.array([1.0]), np.array([yq]), 0.5)[0] == 0.0

    def test_bce_clamps(self):
        value, grad = nn.bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        assert np.isfinite(value) and np.all(np.isfinite(grad))


class TestOptimizer:
    def test_sgd_step(self):
        params = {"p": np.array([1.0])}
        nn.optimizer_step(params, {"p": np.array([1.0])}, TrainConfig(learning_rate=0.1, optimizer="sgd"))
        assert params["p"][0] == pytest.approx(0.9, abs=1e-15)

    def test_zero_gradient_adam(self):
        params = {"p": np.array([1.0, -2.0])}
        config = TrainConfig(learning_rate=0.1)
        _, state = nn.optimizer_step(params, {"p": np.array([0.5, 0.5])}, config)
        m0, v0 = state.m["p"].copy(), state.v["p"].copy()
        before = params["p"].copy()
        state.m["p"][:] = 0.0
        state.v["p"][:] = v0
        nn.optimizer_step(params, {"p": np.zeros(2)}, config, state)
        np.testing.assert_array_equal(params["p"], before)
        assert np.all(np.abs(state.v["p"]) < np.abs(v0))
        assert np.all(np.abs(m0) > 0)

    def test_adam_on_square(self):
        # f(p) = p^2, gradient 2p; Adam's first steps have size ~lr
        params = {"p": np.array([1.0])}
        config = TrainConfig(learning_rate=0.05)
        state = None
        path = [1.0]
        for _ in range(10):
            _, state = nn.optimizer_step(params, {"p": 2 * params["p"]}, config, state)
            path.append(abs(params["p"][0]))
        assert all(b < a for a, b in zip(path, path[1:]))

    def test_non_finite_gradient_names_layer(self):
        with pytest.raises(NonFiniteError, match="layer1.bias"):
            nn.optimizer_step({"layer1.bias": np.zeros(2)}, {"layer1.bias": np.array([np.inf, 0.0])},
                              TrainConfig())

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nn.optimizer_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, TrainConfig())

    def test_clip(self):
        params = {"p": np.array([0.0, 0.0])}
        nn.optimizer_step(params, {"p": np.array([3.0, 4.0])},
                          TrainConfig(learning_rate=1.0, optimizer="sgd", grad_clip=1.0))
        np.testing.assert_allclose(params["p"], [-0.6, -0.8])

    @pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(batch_size=0), dict(epochs=0),
                                    dict(optimizer="rmsprop"), dict(lr_final_frac=0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_cosine_schedule_endpoints(self):
        c = TrainConfig(learning_rate=0.1, epochs=11, lr_final_frac=0.1)
        assert c.lr_at(1) == pytest.approx(0.1)
        assert c.lr_at(11) == pytest.approx(0.01)
        assert c.lr_at(6) == pytest.approx(0.055)


def _fit_square(seed):
    net = random_net(seed, (2, 6, 1), "tanh")
    params = net.parameters()
    rng = nn.make_rng(seed + 1)
    x = rng.standard_normal((32, 2))
    y = (x[:, :1] ** 2)
    config = TrainConfig(learning_rate=1e-2, seed=seed)
    state = None
    for idx in nn.minibatches(32, 8, rng):
        trace = nn.forward(net, x[idx])
        _, g = nn.mse_loss(trace.output, y[idx])
        _, state = nn.optimizer_step(params, nn.backward(net, trace, g).as_dict(), config, state)
    return net


def test_training_is_bit_reproducible():
    a, b = _fit_square(4), _fit_square(4)
    for k, v in a.parameters().items():
        assert v.tobytes() == b.parameters()[k].tobytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(nn.ACTIVATIONS))
def test_grad_check_random_nets(seed, act):
    net = random_net(seed, (3, 4, 4, 2), act)
    x = nn.make_rng(seed ^ 0x5EED).standard_normal((3, 3))
    if act == "relu" and not away_from_relu_kinks(net, x):
        return
    target = nn.make_rng(seed + 7).standard_normal((3, 2))
    assert nn.grad_check(net, lambda out: nn.mse_loss(out, target), x) < 1e-4


class TestRngAndCheckpoint:
    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(nn.make_rng(9).random(5), nn.make_rng(9).random(5))

    def test_uniform_range(self):
        u = nn.make_rng(0).random(10000)
        assert u.min() >= 0.0 and u.max() < 1.0

    def test_derive_seed_distinct(self):
        assert len({nn.derive_seed(1, i) for i in range(50)}) == 50
        assert nn.derive_seed(1, 2) == nn.derive_seed(1, 2)

    def test_rng_state_roundtrip(self):
        rng = nn.make_rng(3)
        rng.random(7)
        clone = nn.rng_from_state_array(nn.rng_state_array(rng))
        np.testing.assert_array_equal(rng.random(4), clone.random(4))

    def test_checkpoint_roundtrip_bit_exact(self, tmp_path):
        net = random_net(2)
        arrays, acts = nn.mlp_to_arrays(net, "net")
        state = nn.OptState()
        nn.optimizer_step(net.parameters("net."), {k: np.ones_like(v) for k, v in arrays.items()},
                          TrainConfig(), state)
        arrays.update(state.to_arrays())
        arrays["rng"] = nn.rng_state_array(nn.make_rng(5))
        nn.save_checkpoint(tmp_path / "a.bin", arrays, {"acts": acts})
        loaded, meta = nn.load_checkpoint(tmp_path / "a.bin")
        back = nn.mlp_from_arrays(loaded, "net", meta["acts"])
        for k, v in net.parameters().items():
            assert v.tobytes() == back.parameters()[k].tobytes()
        restored = nn.OptState.from_arrays(loaded)
        assert restored.step == 1 and set(restored.m) == set(state.m)
        nn.save_checkpoint(tmp_path / "b.bin", loaded, meta)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"nope")
        with pytest.raises(ValueError):
            nn.load_checkpoint(tmp_path / "x.bin")
