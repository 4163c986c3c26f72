"""Network forward/backward/Jacobian against scalar-loop and finite-difference oracles."""

import math

import numpy as np
import pytest

from netslope.nn import (
    Conv2D,
    Dense,
    Network,
    NetworkSpec,
    backward,
    batch_gradients,
    forward,
    forward_many,
    init_network,
    linear_network,
    load_network,
    output_jacobian,
    preactivation_margins,
    save_network,
    scale_at_layer,
    softmax_xent,
    traces_equal,
)


def dense_forward_oracle(net, x):
    """Straightforward scalar-loop re-implementation of the forward pass."""
    cur = [float(v) for v in x]
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        nxt = []
        for row, bias in zip(w, b):
            pre = sum(r * c for r, c in zip(row, cur)) + bias
            nxt.append(pre if pre > 0 else 0.0)
        cur = nxt
    w, b = net.weights[-1], net.biases[-1]
    return np.array([
        sum(r * c for r, c in zip(row, cur)) + bias for row, bias in zip(w, b)
    ])


def conv_forward_oracle(kernel, bias, img):
    """Scalar-loop 3x3 same-padding convolution on one (h, w, c) image."""
    h, w, c = img.shape
    out_c = kernel.shape[0]
    out = np.zeros((h, w, out_c))
    for oc in range(out_c):
        for i in range(h):
            for j in range(w):
                acc = bias[oc]
                for ki in range(3):
                    for kj in range(3):
                        si, sj = i + ki - 1, j + kj - 1
                        if 0 <= si < h and 0 <= sj < w:
                            for ic in range(c):
                                acc += kernel[oc, ki, kj, ic] * img[si, sj, ic]
                out[i, j, oc] = acc
    return out


def rel_err(a, b, floor=1e-10):
    scale = max(abs(a), abs(b))
    return 0.0 if scale < floor else abs(a - b) / scale


def loss_of(net, x, label):
    return softmax_xent(forward(net, x).logits, label)[0]


def central_diff_param_grads(net, x, label, h=1e-5):
    """Central finite differences of the loss wrt every parameter."""
    wgrads, bgrads = [], []
    for li in range(net.n_layers):
        for store, arrays in (("w", net.weights), ("b", net.biases)):
            grad = np.zeros_like(arrays[li])
            flat = grad.reshape(-1)
            base = arrays[li].copy()
            for k in range(base.size):
                for sign in (+1, -1):
                    bumped = base.reshape(-1).copy()
                    bumped[k] += sign * h
                    ws = list(net.weights)
                    bs = list(net.biases)
                    if store == "w":
                        ws[li] = bumped.reshape(base.shape)
                    else:
                        bs[li] = bumped.reshape(base.shape)
                    perturbed = Network(net.spec, tuple(ws), tuple(bs))
                    flat[k] += sign * loss_of(perturbed, x, label)
                flat[k] /= 2 * h
            (wgrads if store == "w" else bgrads).append(grad)
    return wgrads, bgrads


def margin_point(net, rng, margin=1e-3, tries=200):
    """A random input whose pre-activations all clear the region boundary."""
    for _ in range(tries):
        x = rng.standard_normal(net.spec.input_dim)
        if preactivation_margins(net, x)[0] > margin:
            return x
    raise AssertionError("no margin point found")


class TestSpecAndInit:
    def test_spec_validation(self):
        with pytest.raises(ValueError):
            NetworkSpec((4,), (), 3)  # no hidden layer
        with pytest.raises(ValueError):
            NetworkSpec((4,), (Dense(0),), 3)
        with pytest.raises(ValueError):
            NetworkSpec((4,), (Conv2D(3),), 3)  # conv on flat input
        with pytest.raises(ValueError):
            NetworkSpec((4, 4, 1), (Dense(5), Conv2D(3)), 3)  # conv after dense

    def test_init_deterministic(self):
        spec = NetworkSpec((6,), (Dense(5), Dense(4)), 3)
        a = init_network(spec, seed=11)
        b = init_network(spec, seed=11)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)
        c = init_network(spec, seed=12)
        assert not np.array_equal(a.weights[0], c.weights[0])

    def test_parameter_count(self):
        spec = NetworkSpec((784,), (Dense(200), Dense(200), Dense(200)), 10)
        net = init_network(spec, 0)
        expected = (784 * 200 + 200) + 2 * (200 * 200 + 200) + (200 * 10 + 10)
        assert net.n_parameters() == expected

    def test_biases_zero_and_weight_scale(self):
        net = init_network(NetworkSpec((100,), (Dense(50),), 10), 3)
        assert np.all(net.biases[0] == 0) and np.all(net.biases[1] == 0)
        assert np.abs(net.weights[0]).max() <= math.sqrt(1 / 100)
        assert np.abs(net.weights[1]).max() <= math.sqrt(1 / 50)

    def test_parameters_frozen(self):
        net = init_network(NetworkSpec((4,), (Dense(3),), 2), 0)
        with pytest.raises(ValueError):
            net.weights[0][0, 0] = 1.0


class TestForward:
    def test_relu_definition(self):
        spec = NetworkSpec((2,), (Dense(2),), 2)
        net = Network(spec, (np.eye(2), np.eye(2)), (np.zeros(2), np.zeros(2)))
        rec = forward(net, np.array([1.0, -1.0]))
        assert np.array_equal(rec.logits, [1.0, 0.0])
        assert np.array_equal(rec.trace[0], [True, False])

    def test_zero_input_zero_biases(self):
        net = init_network(NetworkSpec((5,), (Dense(4), Dense(3)), 2), 1)
        rec = forward(net, np.zeros(5))
        assert np.array_equal(rec.logits, np.zeros(2))
        assert not any(mask.any() for mask in rec.trace)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(5)
        net = init_network(NetworkSpec((2,), (Dense(16),), 3), 7)
        for _ in range(10):
            x = rng.standard_normal(2)
            np.testing.assert_allclose(
                forward(net, x).logits, dense_forward_oracle(net, x), rtol=1e-12
            )

    def test_trace_deterministic(self):
        net = init_network(NetworkSpec((8,), (Dense(6),), 3), 2)
        x = np.random.default_rng(0).standard_normal(8)
        assert traces_equal(forward(net, x).trace, forward(net, x).trace)

    def test_shape_mismatch(self):
        net = init_network(NetworkSpec((8,), (Dense(6),), 3), 2)
        with pytest.raises(ValueError):
            forward(net, np.zeros(7))

    def test_conv_forward_against_scalar_loop(self):
        rng = np.random.default_rng(9)
        spec = NetworkSpec((5, 4, 2), (Conv2D(3),), 2)
        net = init_network(spec, 21)
        img = rng.standard_normal((5, 4, 2))
        rec = forward(net, img.ravel())
        pre = conv_forward_oracle(net.weights[0], net.biases[0], img)
        hidden = np.maximum(pre, 0.0)
        logits = net.weights[1] @ hidden.ravel() + net.biases[1]
        np.testing.assert_allclose(rec.logits, logits, rtol=1e-12)
        np.testing.assert_allclose(rec.activations[0], hidden, rtol=1e-12)


class TestSoftmaxXent:
    def test_uniform_logits(self):
        loss, grad = softmax_xent(np.zeros(10), 4)
        assert loss == pytest.approx(math.log(10.0))
        np.testing.assert_allclose(grad, np.full(10, 0.1) - np.eye(10)[4], atol=1e-15)

    def test_stabilized(self):
        loss, grad = softmax_xent(np.array([1000.0, 0.0]), 0)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(grad))

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal(6)
        _, grad = softmax_xent(logits, 2)
        h = 1e-6
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            fd = (softmax_xent(logits + e, 2)[0] - softmax_xent(logits - e, 2)[0]) / (2 * h)
            assert rel_err(fd, grad[k]) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_xent(np.zeros(3), 3)


class TestBackward:
    def test_zero_final_layer_blocks_gradients(self):
        spec = NetworkSpec((4,), (Dense(5),), 3)
        base = init_network(spec, 1)
        net = Network(spec, (base.weights[0], np.zeros((3, 5))), base.biases)
        (wg, bg), _, _ = backward(net, np.ones(4), 0)
        assert np.all(wg[0] == 0) and np.all(bg[0] == 0)

    @pytest.mark.parametrize("spec,seed", [
        (NetworkSpec((3,), (Dense(6), Dense(5)), 4), 13),
        (NetworkSpec((4, 3, 1), (Conv2D(2), Dense(5)), 3), 17),
    ])
    def test_param_grads_match_central_differences(self, spec, seed):
        rng = np.random.default_rng(seed)
        net = init_network(spec, seed)
        x = margin_point(net, rng)
        label = 1
        (wg, bg), _, _ = backward(net, x, label)
        fd_w, fd_b = central_diff_param_grads(net, x, label)
        for a, b in zip(wg + bg, fd_w + fd_b):
            worst = max(
                rel_err(float(u), float(v), floor=1e-9)
                for u, v in zip(a.reshape(-1), b.reshape(-1))
            )
            assert worst < 1e-5

    def test_input_grad_matches_central_differences(self):
        rng = np.random.default_rng(23)
        net = init_network(NetworkSpec((5,), (Dense(7), Dense(6)), 3), 2)
        x = margin_point(net, rng)
        _, input_grad, _ = backward(net, x, 2)
        h = 1e-5
        for k in range(5):
            e = np.zeros(5)
            e[k] = h
            fd = (loss_of(net, x + e, 2) - loss_of(net, x - e, 2)) / (2 * h)
            assert rel_err(fd, input_grad[k], floor=1e-9) < 1e-5

    def test_linear_region_input_grad_closed_form(self):
        # all masks active: input grad is (softmax - onehot)^T W_n ... W_1
        rng = np.random.default_rng(4)
        spec = NetworkSpec((4,), (Dense(5), Dense(5)), 3)
        base = init_network(spec, 9)
        biases = (np.full(5, 10.0), np.full(5, 10.0), base.biases[2])
        net = Network(spec, base.weights, biases)
        x = rng.standard_normal(4) * 0.1
        rec = forward(net, x)
        assert all(mask.all() for mask in rec.trace)
        _, input_grad, _ = backward(net, x, 1)
        _, g = softmax_xent(rec.logits, 1)
        closed = g @ net.weights[2] @ net.weights[1] @ net.weights[0]
        np.testing.assert_allclose(input_grad, closed, rtol=1e-10)

    def test_batch_gradients_are_mean_of_per_sample(self):
        rng = np.random.default_rng(8)
        net = init_network(NetworkSpec((6,), (Dense(8),), 4), 5)
        xs = rng.standard_normal((10, 6))
        ys = rng.integers(0, 4, 10)
        wg, bg, loss = batch_gradients(net, xs, ys)
        accum_w = [np.zeros_like(w) for w in net.weights]
        accum_b = [np.zeros_like(b) for b in net.biases]
        losses = []
        for x, y in zip(xs, ys):
            (pw, pb), _, l = backward(net, x, int(y))
            losses.append(l)
            for acc, g in zip(accum_w, pw):
                acc += g
            for acc, g in zip(accum_b, pb):
                acc += g
        assert loss == pytest.approx(np.mean(losses), rel=1e-12)
        for got, want in zip(wg, accum_w):
            np.testing.assert_allclose(got, want / 10, rtol=1e-9, atol=1e-14)
        for got, want in zip(bg, accum_b):
            np.testing.assert_allclose(got, want / 10, rtol=1e-9, atol=1e-14)


class TestJacobian:
    def test_all_active_region_is_weight_product(self):
        spec = NetworkSpec((4,), (Dense(5),), 3)
        base = init_network(spec, 31)
        net = Network(spec, base.weights, (np.full(5, 5.0), base.biases[1]))
        x = np.random.default_rng(0).standard_normal(4) * 0.1
        assert all(m.all() for m in forward(net, x).trace)
        np.testing.assert_allclose(
            output_jacobian(net, x), net.weights[1] @ net.weights[0], rtol=1e-12
        )

    @pytest.mark.parametrize("spec,seed", [
        (NetworkSpec((6,), (Dense(9), Dense(7)), 4), 3),
        (NetworkSpec((4, 4, 1), (Conv2D(3), Conv2D(2)), 3), 6),
    ])
    def test_matches_forward_differences(self, spec, seed):
        rng = np.random.default_rng(seed)
        net = init_network(spec, seed)
        x = margin_point(net, rng)
        jac = output_jacobian(net, x)
        h = 1e-6
        base = forward(net, x).logits
        for k in range(spec.input_dim):
            e = np.zeros(spec.input_dim)
            e[k] = h
            col = (forward(net, x + e).logits - base) / h
            for got, want in zip(jac[:, k], col):
                assert rel_err(float(got), float(want), floor=1e-7) < 1e-4

    def test_product_and_reverse_paths_agree(self):
        rng = np.random.default_rng(12)
        net = init_network(NetworkSpec((8,), (Dense(10), Dense(9), Dense(7)), 5), 44)
        for _ in range(10):
            x = rng.standard_normal(8)
            a = output_jacobian(net, x, method="product")
            b = output_jacobian(net, x, method="reverse")
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_product_path_rejects_conv(self):
        net = init_network(NetworkSpec((4, 4, 1), (Conv2D(2),), 3), 0)
        with pytest.raises(ValueError):
            output_jacobian(net, np.zeros(16), method="product")

    def test_piecewise_linearity_within_region(self):
        rng = np.random.default_rng(19)
        net = init_network(NetworkSpec((6,), (Dense(8), Dense(7)), 4), 2)
        hits = 0
        for _ in range(50):
            x = rng.standard_normal(6)
            y = x + 1e-4 * rng.standard_normal(6)
            rx, ry = forward(net, x), forward(net, y)
            if not traces_equal(rx.trace, ry.trace):
                continue
            hits += 1
            jac = output_jacobian(net, x)
            np.testing.assert_allclose(
                ry.logits - rx.logits, jac @ (y - x), rtol=1e-9, atol=1e-13
            )
        assert hits >= 10

    def test_prop6_scaling_decreases_loss_when_correct(self):
        rng = np.random.default_rng(6)
        checked = 0
        for seed in range(20):
            net = init_network(NetworkSpec((5,), (Dense(8),), 4), seed)
            x = rng.standard_normal(5)
            logits = forward(net, x).logits
            label = int(np.argmax(logits))
            base_loss, _ = softmax_xent(logits, label)
            for c in (1.5, 2.0, 10.0):
                scaled_loss, _ = softmax_xent(c * logits, label)
                assert scaled_loss < base_loss
            checked += 1
        assert checked == 20


class TestScaleAtLayer:
    def test_identity_scale(self):
        net = init_network(NetworkSpec((4,), (Dense(6),), 3), 8)
        same = scale_at_layer(net, 1, 1.0)
        for a, b in zip(net.weights, same.weights):
            np.testing.assert_array_equal(a, b)

    def test_doubles_outputs_everywhere(self):
        rng = np.random.default_rng(14)
        net = init_network(NetworkSpec((6,), (Dense(9), Dense(7)), 4), 3)
        for layer in range(1, net.n_layers + 1):
            scaled = scale_at_layer(net, layer, 2.0)
            xs = rng.standard_normal((100, 6))
            np.testing.assert_allclose(
                forward_many(scaled, xs), 2.0 * forward_many(net, xs), rtol=1e-12
            )

    def test_inverse_scaling_recovers(self):
        net = init_network(NetworkSpec((5,), (Dense(6),), 3), 1)
        # give the biases something to scale
        net = Network(
            net.spec,
            net.weights,
            tuple(b + 0.1 for b in net.biases),
        )
        back = scale_at_layer(scale_at_layer(net, 1, 3.0), 1, 1.0 / 3.0)
        x = np.random.default_rng(2).standard_normal(5)
        np.testing.assert_allclose(
            forward(back, x).logits, forward(net, x).logits, rtol=1e-12
        )

    def test_invalid_arguments(self):
        net = init_network(NetworkSpec((4,), (Dense(3),), 2), 0)
        with pytest.raises(ValueError):
            scale_at_layer(net, 0, 2.0)
        with pytest.raises(ValueError):
            scale_at_layer(net, 3, 2.0)
        with pytest.raises(ValueError):
            scale_at_layer(net, 1, -1.0)


class TestLinearNetwork:
    def test_exact_affine_map(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((3, 5))
        b = rng.standard_normal(3)
        net = linear_network(a, b)
        for _ in range(20):
            x = rng.standard_normal(5)
            np.testing.assert_allclose(forward(net, x).logits, a @ x + b, rtol=1e-12)
            np.testing.assert_allclose(output_jacobian(net, x), a, rtol=1e-12)


class TestCheckpoint:
    @pytest.mark.parametrize("spec,seed", [
        (NetworkSpec((6,), (Dense(5), Dense(4)), 3), 7),
        (NetworkSpec((4, 4, 2), (Conv2D(3), Dense(6)), 2), 9),
    ])
    def test_byte_exact_round_trip(self, tmp_path, spec, seed):
        net = init_network(spec, seed)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_network(net, p1)
        loaded = load_network(p1)
        save_network(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.spec == net.spec
        assert loaded.seed == seed
        for a, b in zip(net.weights, loaded.weights):
            assert np.array_equal(a, b)

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_network(path)

    def test_rejects_truncated(self, tmp_path):
        net = init_network(NetworkSpec((4,), (Dense(3),), 2), 1)
        path = tmp_path / "t.ckpt"
        save_network(net, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_network(path)
