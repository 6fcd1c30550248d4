"""Tensor substrate: forward semantics, gradients vs finite differences, Adam."""

import numpy as np
import pytest

from borelog_refine import substrate as sb


def finite_diff(loss_fn, arr, step=1e-6):
    """Independent central-difference gradient of loss_fn w.r.t. arr entries."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp = loss_fn()
        flat[i] = orig - step
        lm = loss_fn()
        flat[i] = orig
        gf[i] = (lp - lm) / (2 * step)
    return g


def max_rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


class TestForwardSemantics:
    def test_softmax_uniform_logits(self):
        y = sb.softmax(sb.Tensor(np.zeros(4)), axis=-1)
        np.testing.assert_allclose(y.data, [0.25, 0.25, 0.25, 0.25], rtol=0, atol=0)

    def test_relu_definition(self):
        y = sb.relu(sb.Tensor(np.array([-1.0, 2.0])))
        np.testing.assert_array_equal(y.data, [0.0, 2.0])

    def test_sigmoid_midpoint(self):
        y = sb.sigmoid(sb.Tensor(np.array([0.0])))
        assert y.data[0] == 0.5

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        x = sb.Tensor(rng.normal(size=(50, 5)) * 10)
        y = sb.softmax(x, axis=-1)
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_masked_softmax_zeros_and_renormalizes(self):
        x = sb.Tensor(np.array([[1.0, 2.0, 3.0]]))
        mask = np.array([[True, True, False]])
        y = sb.softmax(x, axis=-1, mask=mask)
        assert y.data[0, 2] == 0.0
        assert abs(y.data[0, :2].sum() - 1.0) < 1e-12

    def test_layer_norm_moments_before_affine(self):
        rng = np.random.default_rng(3)
        x = sb.Tensor(rng.normal(size=(40, 64)))
        y = sb.layer_norm(x, sb.Tensor(np.ones(64)), sb.Tensor(np.zeros(64)))
        mu = y.data.mean(axis=-1)
        var = y.data.var(axis=-1)
        assert np.max(np.abs(mu)) < 1e-6
        assert np.max(np.abs(var - 1.0)) < 1e-4

    def test_group_norm_moments_before_affine(self):
        rng = np.random.default_rng(4)
        x = sb.Tensor(rng.normal(size=(1, 16, 10, 6)))
        y = sb.group_norm(x, sb.Tensor(np.ones(16)), sb.Tensor(np.zeros(16)), groups=8)
        grouped = y.data.reshape(1, 8, -1)
        assert np.max(np.abs(grouped.mean(axis=2))) < 1e-6
        assert np.max(np.abs(grouped.var(axis=2) - 1.0)) < 1e-4

    def test_nonfinite_output_raises(self):
        x = sb.Tensor(np.array([[[np.inf]]]))
        w = sb.Tensor(np.ones((1, 1, 1)))
        with pytest.raises(sb.SubstrateError):
            sb.conv1d(x, w)

    def test_conv2d_channel_mismatch_names_layer(self):
        x = sb.Tensor(np.zeros((1, 3, 8, 8)))
        w = sb.Tensor(np.zeros((4, 2, 3, 3)))
        with pytest.raises(sb.SubstrateError, match="enc1"):
            sb.conv2d(x, w, name="enc1")

    def test_conv2d_same_padding_shapes(self):
        x = sb.Tensor(np.zeros((2, 3, 32, 20)))
        w = sb.Tensor(np.zeros((5, 3, 3, 3)))
        assert sb.conv2d(x, w, stride=1).shape == (2, 5, 32, 20)
        assert sb.conv2d(x, w, stride=2).shape == (2, 5, 16, 10)

    def test_conv_transpose_doubles_extents(self):
        x = sb.Tensor(np.zeros((1, 4, 8, 5)))
        w = sb.Tensor(np.zeros((4, 2, 3, 3)))
        assert sb.conv_transpose2d(x, w, stride=2).shape == (1, 2, 16, 10)

    def test_conv_transpose_is_adjoint_of_conv(self):
        # <conv(x), y> == <x, convT(y)> for shared weights
        rng = np.random.default_rng(11)
        x = sb.Tensor(rng.normal(size=(1, 2, 8, 6)))
        y = rng.normal(size=(1, 3, 4, 3))
        w = rng.normal(size=(3, 2, 3, 3))
        cx = sb.conv2d(x, sb.Tensor(w), stride=2).data
        cty = sb.conv_transpose2d(sb.Tensor(y), sb.Tensor(w.transpose(0, 1, 2, 3)),
                                  stride=2, name="adj").data
        # conv weight (O,C,kh,kw) acts as convT weight (Ci=O, Co=C)
        assert abs(np.sum(cx * y) - np.sum(x.data * cty)) < 1e-9


class TestBackpropBasics:
    def test_sum_of_squares_gradient(self):
        x = sb.Tensor(np.array([3.0]), requires_grad=True)
        loss = sb.tsum(sb.square(x))
        loss.backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_unused_parameter_gets_zero_gradient(self):
        store = sb.ParameterStore(seed=1)
        used = store.add("used", (3,), fan_in=3)
        store.add("unused", (4,), fan_in=4)
        loss = sb.tsum(sb.square(used))
        loss.backward()
        grads = store.gradients()
        np.testing.assert_array_equal(grads["unused"], np.zeros(4))

    def test_backward_requires_scalar(self):
        x = sb.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(sb.SubstrateError):
            sb.square(x).backward()

    def test_shared_input_two_paths_accumulates(self):
        x = sb.Tensor(np.array([2.0]), requires_grad=True)
        loss = sb.tsum(sb.add(sb.square(x), sb.mul(x, 3.0)))
        loss.backward()
        np.testing.assert_allclose(x.grad, [2 * 2.0 + 3.0])


def _fd_check(build_loss, tensors, tol=1e-4):
    """Gradient-check every tensor in `tensors` against finite differences."""
    loss = build_loss()
    loss.backward()
    analytic = []
    for t in tensors:
        assert t.grad is not None
        analytic.append(t.grad.copy())
    for t, ga in zip(tensors, analytic):
        fd = finite_diff(lambda: float(build_loss().data), t.data)
        assert max_rel_err(ga, fd) < tol


class TestGradientsVsFiniteDifferences:
    def test_dense_relu_chain(self):
        rng = np.random.default_rng(0)
        x = sb.Tensor(rng.normal(size=(4, 5)))
        w = sb.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        b = sb.Tensor(rng.normal(size=3), requires_grad=True)

        def build():
            w.grad = b.grad = None
            return sb.tsum(sb.square(sb.relu(sb.dense(x, w, b))))

        _fd_check(build, [w, b])

    def test_conv2d_stride1(self):
        rng = np.random.default_rng(1)
        x = sb.Tensor(rng.normal(size=(2, 2, 6, 5)), requires_grad=True)
        w = sb.Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
        b = sb.Tensor(rng.normal(size=3), requires_grad=True)

        def build():
            x.grad = w.grad = b.grad = None
            return sb.tsum(sb.square(sb.conv2d(x, w, b, stride=1)))

        _fd_check(build, [x, w, b])

    def test_conv2d_stride2(self):
        rng = np.random.default_rng(2)
        x = sb.Tensor(rng.normal(size=(1, 2, 8, 6)), requires_grad=True)
        w = sb.Tensor(rng.normal(size=(4, 2, 3, 3)) * 0.5, requires_grad=True)

        def build():
            x.grad = w.grad = None
            return sb.tsum(sb.square(sb.conv2d(x, w, stride=2)))

        _fd_check(build, [x, w])

    def test_conv_transpose2d(self):
        rng = np.random.default_rng(3)
        x = sb.Tensor(rng.normal(size=(1, 3, 4, 3)), requires_grad=True)
        w = sb.Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
        b = sb.Tensor(rng.normal(size=2), requires_grad=True)

        def build():
            x.grad = w.grad = b.grad = None
            return sb.tsum(sb.square(sb.conv_transpose2d(x, w, b, stride=2)))

        _fd_check(build, [x, w, b])

    def test_conv1d(self):
        rng = np.random.default_rng(4)
        x = sb.Tensor(rng.normal(size=(1, 3, 10)), requires_grad=True)
        w = sb.Tensor(rng.normal(size=(4, 3, 3)) * 0.5, requires_grad=True)
        b = sb.Tensor(rng.normal(size=4), requires_grad=True)

        def build():
            x.grad = w.grad = b.grad = None
            return sb.tsum(sb.square(sb.conv1d(x, w, b)))

        _fd_check(build, [x, w, b])

    def test_sigmoid_tanh_exp_log_chain(self):
        rng = np.random.default_rng(5)
        x = sb.Tensor(rng.uniform(0.5, 1.5, size=(6,)), requires_grad=True)

        def build():
            x.grad = None
            y = sb.tanh(sb.sigmoid(x))
            return sb.tsum(sb.log(sb.add(sb.exp(y), 1.0)))

        _fd_check(build, [x])

    def test_arctanh(self):
        rng = np.random.default_rng(6)
        x = sb.Tensor(rng.uniform(-0.8, 0.8, size=(7,)), requires_grad=True)

        def build():
            x.grad = None
            return sb.tsum(sb.square(sb.arctanh(x)))

        _fd_check(build, [x])

    def test_softmax_gradient(self):
        rng = np.random.default_rng(7)
        x = sb.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        coef = rng.normal(size=(3, 5))

        def build():
            x.grad = None
            return sb.tsum(sb.mul(sb.softmax(x, axis=-1), coef))

        _fd_check(build, [x])

    def test_masked_softmax_gradient(self):
        rng = np.random.default_rng(8)
        x = sb.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        mask = np.ones((4, 5), dtype=bool)
        mask[0, 3:] = False
        mask[2, :2] = False
        coef = rng.normal(size=(4, 5))

        def build():
            x.grad = None
            return sb.tsum(sb.mul(sb.softmax(x, axis=-1, mask=mask), coef))

        _fd_check(build, [x])

    def test_layer_norm_gradient(self):
        rng = np.random.default_rng(9)
        x = sb.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        g = sb.Tensor(rng.normal(size=6), requires_grad=True)
        b = sb.Tensor(rng.normal(size=6), requires_grad=True)
        coef = rng.normal(size=(4, 6))

        def build():
            x.grad = g.grad = b.grad = None
            return sb.tsum(sb.mul(sb.layer_norm(x, g, b), coef))

        _fd_check(build, [x, g, b])

    def test_group_norm_gradient(self):
        rng = np.random.default_rng(10)
        x = sb.Tensor(rng.normal(size=(1, 8, 4, 3)), requires_grad=True)
        g = sb.Tensor(rng.normal(size=8), requires_grad=True)
        b = sb.Tensor(rng.normal(size=8), requires_grad=True)
        coef = rng.normal(size=(1, 8, 4, 3))

        def build():
            x.grad = g.grad = b.grad = None
            return sb.tsum(sb.mul(sb.group_norm(x, g, b, groups=4), coef))

        _fd_check(build, [x, g, b])

    def test_take_and_concat_gradient(self):
        rng = np.random.default_rng(11)
        x = sb.Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        idx = np.array([0, 2, 2, 5])
        coef = rng.normal(size=(4, 6))

        def build():
            x.grad = None
            gathered = sb.take(x, idx, axis=0)
            both = sb.concat([gathered, gathered], axis=1)
            return sb.tsum(sb.mul(both, coef))

        _fd_check(build, [x])

    def test_batched_matmul_gradient(self):
        rng = np.random.default_rng(12)
        a = sb.Tensor(rng.normal(size=(3, 2, 4, 5)), requires_grad=True)
        b = sb.Tensor(rng.normal(size=(3, 2, 5, 3)), requires_grad=True)

        def build():
            a.grad = b.grad = None
            return sb.tsum(sb.square(sb.matmul(a, b)))

        _fd_check(build, [a, b])

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(13)
        logits = sb.Tensor(rng.normal(size=(4, 5, 3)), requires_grad=True)
        labels = rng.integers(0, 4, size=(5, 3))
        weights = rng.uniform(0.2, 1.0, size=(5, 3))

        def build():
            logits.grad = None
            return sb.softmax_cross_entropy(logits, labels, weights)

        _fd_check(build, [logits])


class TestGradientCheckOp:
    def test_dense_relu_toy_graph_passes(self):
        store = sb.ParameterStore(seed=5)
        w = store.add("w", (4, 3), fan_in=4)
        b = store.add("b", (3,), init="zeros")
        rng = np.random.default_rng(0)
        x = sb.Tensor(rng.normal(size=(5, 4)))

        def loss_fn():
            return sb.tsum(sb.square(sb.relu(sb.dense(x, w, b))))

        report = sb.gradient_check(loss_fn, store, rel_tol=1e-4)
        assert report["passed"], report

    def test_corrupted_gradient_detected(self):
        from borelog_refine.substrate.tensor import _node

        store = sb.ParameterStore(seed=5)
        w = store.add("w", (3, 2), fan_in=3)
        x = sb.Tensor(np.random.default_rng(1).normal(size=(4, 3)))

        def broken_loss():
            y = x.data @ w.data
            loss_data = np.asarray((y * y).sum())

            def bad_bwd(g):
                w.grad = (x.data.T @ (2.0 * y)) * 0.5 * g  # half the true gradient

            return _node(loss_data, (w,), bad_bwd)

        report = sb.gradient_check(broken_loss, store, rel_tol=1e-4)
        assert not report["passed"]


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        store = sb.ParameterStore(seed=0)
        p = store.add("p", (4,), fan_in=4)
        before = p.data.copy()
        state = sb.OptimizerState(store)
        sb.adam_step(store, {"p": np.zeros(4)}, state)
        np.testing.assert_array_equal(p.data, before)
        assert state.step == 1

    def test_first_step_with_unit_gradient(self):
        # hand evaluation: m_hat=1, v_hat=1 -> delta = -lr/(1+eps) ~ -1e-3
        store = sb.ParameterStore(seed=0)
        p = store.add("p", (1,), init="zeros")
        state = sb.OptimizerState(store, lr=1e-3)
        sb.adam_step(store, {"p": np.ones(1)}, state)
        expected = -1e-3 / (1.0 + 1e-8)
        np.testing.assert_allclose(p.data, [expected], rtol=1e-12)

    def test_determinism_bitwise(self):
        def run():
            store = sb.ParameterStore(seed=9)
            w = store.add("w", (6, 2), fan_in=6)
            state = sb.OptimizerState(store, lr=1e-3)
            rng = np.random.default_rng(3)
            x = sb.Tensor(rng.normal(size=(8, 6)))
            for _ in range(5):
                store.zero_grad()
                loss = sb.tsum(sb.square(sb.dense(x, w)))
                loss.backward()
                sb.adam_step(store, store.gradients(), state)
            return w.data.copy()

        a, b = run(), run()
        np.testing.assert_array_equal(a, b)

    def test_gradient_shape_mismatch(self):
        store = sb.ParameterStore(seed=0)
        store.add("p", (4,), fan_in=4)
        state = sb.OptimizerState(store)
        with pytest.raises(sb.SubstrateError):
            sb.adam_step(store, {"p": np.zeros(5)}, state)


class TestParameterStore:
    def test_duplicate_name_rejected(self):
        store = sb.ParameterStore(seed=0)
        store.add("w", (2,), fan_in=2)
        with pytest.raises(sb.SubstrateError):
            store.add("w", (2,), fan_in=2)

    def test_same_seed_same_init(self):
        a = sb.ParameterStore(seed=42)
        b = sb.ParameterStore(seed=42)
        wa = a.add("layer/w", (5, 5), fan_in=5)
        wb = b.add("layer/w", (5, 5), fan_in=5)
        np.testing.assert_array_equal(wa.data, wb.data)

    def test_init_independent_of_declaration_order(self):
        a = sb.ParameterStore(seed=7)
        a.add("first", (3,), fan_in=3)
        wa = a.add("second", (4,), fan_in=4)
        b = sb.ParameterStore(seed=7)
        wb = b.add("second", (4,), fan_in=4)
        np.testing.assert_array_equal(wa.data, wb.data)

    def test_checkpoint_roundtrip_bit_exact(self, tmp_path):
        store = sb.ParameterStore(seed=3)
        store.add("enc/w", (4, 2, 3, 3), fan_in=18)
        store.add("enc/b", (4,), init="zeros")
        store["enc/w"].data[0, 0, 0, 0] = np.pi  # non-trivial bits
        path = tmp_path / "model.ckpt"
        store.save(path, meta={"arch": "toy", "epochs": 3})

        clone = sb.ParameterStore(seed=3)
        clone.add("enc/w", (4, 2, 3, 3), fan_in=18)
        clone.add("enc/b", (4,), init="zeros")
        meta = clone.load(path)
        assert meta == {"arch": "toy", "epochs": 3}
        for name, t in store.items():
            assert t.data.tobytes() == clone[name].data.tobytes()

    def test_checkpoint_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(sb.SubstrateError):
            sb.ParameterStore.read(path)
