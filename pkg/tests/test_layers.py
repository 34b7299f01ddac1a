import numpy as np
import pytest

from rdlt import engine, linalg
from rdlt.layers import (
    Batch,
    FactorizedLinear,
    LowRankConv2D,
    Network,
    cross_entropy,
    dense_conv2d,
    softmax,
)
from rdlt.regularizer import DivergenceError


def rng_for(tag):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([0x1A7E, tag])))


def fd_loss_gradient(fn, param, step=1e-6):
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        h = step * max(1.0, abs(param[idx]))
        up = param.copy()
        up[idx] += h
        down = param.copy()
        down[idx] -= h
        grad[idx] = (fn(up) - fn(down)) / (2 * h)
        it.iternext()
    return grad


def assert_grad_close(analytic, numeric, rel=1e-5):
    denom = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-10)
    assert float(np.abs(analytic - numeric).max()) <= rel * denom


class TestFactorizedLinearForward:
    def test_rank_one_example(self):
        layer = FactorizedLinear(
            u=np.array([[1.0], [0.0]]),
            s=np.array([[3.0]]),
            v=np.array([[0.0], [1.0]]),
            bias=np.zeros(2),
            activation="identity",
        )
        out, _ = layer.forward(np.array([[5.0], [7.0]]))
        assert np.allclose(out, [[21.0], [0.0]])

    def test_zero_coefficients_give_bias(self):
        rng = rng_for(1)
        layer = engine.init_factorized_linear(6, 4, 2, "tanh", rng)
        layer.s = np.zeros_like(layer.s)
        layer.bias = rng.standard_normal(6)
        out, _ = layer.forward(rng.standard_normal((4, 3)))
        assert np.allclose(out, np.tanh(layer.bias)[:, None] * np.ones((1, 3)))

    def test_matches_dense_oracle(self):
        rng = rng_for(2)
        for k in range(100):
            n_out = int(rng.integers(1, 12))
            n_in = int(rng.integers(1, 12))
            r = int(rng.integers(1, min(n_out, n_in) + 1))
            act = ("relu", "tanh", "identity")[k % 3]
            layer = engine.init_factorized_linear(n_out, n_in, r, act, rng)
            layer.bias = rng.standard_normal(n_out)
            z = rng.standard_normal((n_in, 4))
            factored, _ = layer.forward(z)
            pre = layer.reconstruct() @ z + layer.bias[:, None]
            dense = {"relu": np.maximum(pre, 0), "tanh": np.tanh(pre), "identity": pre}[act]
            assert np.abs(factored - dense).max() <= 1e-8

    def test_shape_mismatch_rejected(self):
        layer = engine.init_factorized_linear(4, 3, 2, "identity", rng_for(3))
        with pytest.raises(ValueError, match="shape"):
            layer.forward(np.zeros((5, 2)))

    def test_rank_cap_enforced(self):
        with pytest.raises(ValueError, match="rank"):
            FactorizedLinear(
                u=np.zeros((2, 3)), s=np.zeros((3, 3)), v=np.zeros((5, 3)), bias=np.zeros(2)
            )


class TestLowRankConv2DForward:
    def test_one_by_one_window_is_channel_mixing(self):
        core = rng_for(4).standard_normal((3, 3, 1, 1))
        layer = LowRankConv2D(
            u_o=np.eye(3), u_i=np.eye(3), core=core, bias=np.zeros(3), activation="identity"
        )
        x = rng_for(5).standard_normal((3, 4, 4, 2))
        out, _ = layer.forward(x)
        expected = np.einsum("oi,iwhb->owhb", core[:, :, 0, 0], x)
        assert np.abs(out - expected).max() <= 1e-12

    def test_zero_core_gives_bias(self):
        rng = rng_for(6)
        layer = engine.init_lowrank_conv(4, 3, (3, 3), 2, 2, "identity", rng)
        layer.core = np.zeros_like(layer.core)
        layer.bias = rng.standard_normal(4)
        out, _ = layer.forward(rng.standard_normal((3, 5, 5, 2)))
        assert np.allclose(out, layer.bias[:, None, None, None] * np.ones((1, 5, 5, 2)))

    def test_matches_dense_reconstruction_oracle(self):
        rng = rng_for(7)
        layer = engine.init_lowrank_conv(4, 3, (3, 3), 2, 2, "identity", rng)
        x = rng.standard_normal((3, 8, 8, 2))
        factored, _ = layer.forward(x)
        dense = dense_conv2d(layer.reconstruct_kernel(), x) + layer.bias[:, None, None, None]
        assert np.abs(factored - dense).max() <= 1e-8

    def test_equivalence_sweep(self):
        rng = rng_for(8)
        for k in range(100):
            n_o = int(rng.integers(1, 6))
            n_i = int(rng.integers(1, 6))
            s_w = int(rng.integers(1, 4))
            s_h = int(rng.integers(1, 4))
            r_o = int(rng.integers(1, n_o + 1))
            r_i = int(rng.integers(1, n_i + 1))
            layer = engine.init_lowrank_conv(n_o, n_i, (s_w, s_h), r_o, r_i, "identity", rng)
            layer.bias = rng.standard_normal(n_o)
            w = int(rng.integers(s_w, s_w + 5))
            h = int(rng.integers(s_h, s_h + 5))
            x = rng.standard_normal((n_i, w, h, 2))
            factored, _ = layer.forward(x)
            dense = dense_conv2d(layer.reconstruct_kernel(), x) + layer.bias[:, None, None, None]
            assert np.abs(factored - dense).max() <= 1e-8


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros((2, 1)), np.array([0]))
        assert loss == pytest.approx(np.log(2.0), rel=1e-12)

    def test_extreme_logits_stable(self):
        loss, grad = cross_entropy(np.array([[30.0], [-30.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(grad))

    def test_gradient_matches_finite_differences(self):
        rng = rng_for(9)
        logits = rng.standard_normal((5, 7))
        labels = rng.integers(0, 5, 7)
        _, grad = cross_entropy(logits, labels)
        numeric = fd_loss_gradient(lambda m: cross_entropy(m, labels)[0], logits)
        assert np.abs(grad - numeric).max() <= 1e-7

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="two classes"):
            cross_entropy(np.zeros((1, 3)), np.zeros(3, dtype=int))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="range"):
            cross_entropy(np.zeros((3, 2)), np.array([0, 3]))


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        rng = rng_for(10)
        net = Network([engine.init_factorized_linear(5, 4, 2, "tanh", rng)])
        _, caches = net.forward_with_cache(rng.standard_normal((4, 3)))
        grads, grad_in = net.backward_from(caches, np.zeros((5, 3)))
        assert all(np.all(g == 0.0) for g in grads[0].factors.values())
        assert np.all(grads[0].bias == 0.0)
        assert np.all(grad_in == 0.0)

    def test_squared_error_closed_form_for_single_layer(self):
        # Identity single layer with loss 0.5 ||out - target||^2:
        # the coefficient gradient is U^T (out - target) (V^T z)^T.
        rng = rng_for(11)
        layer = engine.init_factorized_linear(6, 5, 3, "identity", rng)
        net = Network([layer])
        z = rng.standard_normal((5, 4))
        target = rng.standard_normal((6, 4))
        out, caches = net.forward_with_cache(z)
        grads, _ = net.backward_from(caches, out - target)
        expected = layer.u.T @ (out - target) @ (layer.v.T @ z).T
        assert np.abs(grads[0].factors["s"] - expected).max() <= 1e-12

    def test_two_layer_relu_finite_differences(self):
        rng = rng_for(12)
        net = Network(
            [
                engine.init_factorized_linear(8, 5, 3, "relu", rng),
                engine.init_factorized_linear(3, 8, 3, "identity", rng),
            ]
        )
        for layer in net.layers:
            layer.bias = 0.1 * rng.standard_normal(layer.n_out)
        for trial in range(5):
            batch = Batch(rng.standard_normal((5, 6)), rng.integers(0, 3, 6))
            _, layer_grads, grad_input = net.loss_and_grads(batch)

            def loss_with(layer_idx, name, value):
                saved = getattr(net.layers[layer_idx], name)
                setattr(net.layers[layer_idx], name, value)
                try:
                    return cross_entropy(net.forward(batch.inputs), batch.labels)[0]
                finally:
                    setattr(net.layers[layer_idx], name, saved)

            for idx in range(2):
                for name in ("u", "s", "v"):
                    numeric = fd_loss_gradient(
                        lambda m, i=idx, n=name: loss_with(i, n, m), getattr(net.layers[idx], name)
                    )
                    assert_grad_close(layer_grads[idx].factors[name], numeric)
                numeric = fd_loss_gradient(
                    lambda b, i=idx: loss_with(i, "bias", b), net.layers[idx].bias
                )
                assert_grad_close(layer_grads[idx].bias, numeric)
            numeric = fd_loss_gradient(
                lambda m: cross_entropy(net.forward(m), batch.labels)[0], batch.inputs
            )
            assert_grad_close(grad_input, numeric)

    def test_conv_dense_network_finite_differences(self):
        rng = rng_for(13)
        conv = engine.init_lowrank_conv(3, 2, (3, 3), 2, 2, "tanh", rng)
        conv.bias = 0.1 * rng.standard_normal(3)
        dense = engine.init_factorized_linear(3, 3 * 4 * 4, 3, "identity", rng)
        net = Network([conv, dense])
        batch = Batch(rng.standard_normal((2, 4, 4, 3)), rng.integers(0, 3, 3))
        _, layer_grads, grad_input = net.loss_and_grads(batch)

        def loss_with(layer_idx, name, value):
            saved = getattr(net.layers[layer_idx], name)
            setattr(net.layers[layer_idx], name, value)
            try:
                return cross_entropy(net.forward(batch.inputs), batch.labels)[0]
            finally:
                setattr(net.layers[layer_idx], name, saved)

        for name in ("u_o", "u_i", "core"):
            numeric = fd_loss_gradient(lambda m, n=name: loss_with(0, n, m), getattr(conv, name))
            assert_grad_close(layer_grads[0].factors[name], numeric)
        numeric = fd_loss_gradient(lambda b: loss_with(0, "bias", b), conv.bias)
        assert_grad_close(layer_grads[0].bias, numeric)
        for name in ("u", "s", "v"):
            numeric = fd_loss_gradient(lambda m, n=name: loss_with(1, n, m), getattr(dense, name))
            assert_grad_close(layer_grads[1].factors[name], numeric)
        numeric = fd_loss_gradient(
            lambda m: cross_entropy(net.forward(m), batch.labels)[0], batch.inputs
        )
        assert_grad_close(grad_input, numeric)

    def test_forward_backward_read_only_on_bases(self):
        rng = rng_for(14)
        net = Network([engine.init_factorized_linear(6, 4, 2, "relu", rng)])
        u_before = net.layers[0].u.copy()
        v_before = net.layers[0].v.copy()
        batch = Batch(rng.standard_normal((4, 5)), rng.integers(0, 6, 5))
        net.loss_and_grads(batch)
        assert np.array_equal(net.layers[0].u, u_before)
        assert np.array_equal(net.layers[0].v, v_before)

    def test_non_finite_loss_aborts(self):
        rng = rng_for(15)
        net = Network([engine.init_factorized_linear(3, 2, 2, "identity", rng)])
        net.layers[0].bias = np.array([np.nan, 0.0, 0.0])
        with pytest.raises(DivergenceError, match="non-finite"):
            net.loss_and_grads(Batch(np.ones((2, 1)), np.array([0])))


class TestNetworkPlumbing:
    def test_softmax_output_layer_exposes_logits(self):
        rng = rng_for(16)
        net = Network([engine.init_factorized_linear(3, 4, 2, "softmax", rng)])
        x = rng.standard_normal((4, 5))
        logits = net.forward(x)
        probs = net.predict_proba(x)
        assert np.allclose(probs, softmax(logits))
        assert np.allclose(probs.sum(axis=0), 1.0)

    def test_conv_to_dense_flatten_round_trip(self):
        rng = rng_for(17)
        conv = engine.init_lowrank_conv(2, 2, (1, 1), 2, 2, "identity", rng)
        dense = engine.init_factorized_linear(4, 2 * 3 * 3, 4, "identity", rng)
        net = Network([conv, dense])
        x = rng.standard_normal((2, 3, 3, 2))
        conv_out, _ = conv.forward(x)
        manual, _ = dense.forward(conv_out.reshape(-1, 2))
        assert np.allclose(net.forward(x), manual)

    def test_batch_validation(self):
        with pytest.raises(ValueError, match="mismatch"):
            Batch(np.zeros((2, 3)), np.zeros(4, dtype=int))
