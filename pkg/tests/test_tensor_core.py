"""Autodiff engine, primitives, Adam, gradient checker and NTSR files."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protoalign.errors import (FormatError, GradCheckError, MissingGradError, ShapeError,
                               TrainingDivergenceError)
from protoalign.tensor import (AdamState, ParameterStore, Tensor, adam_step, grad_check, nn, no_grad,
                               ntsr, numeric_grad, ops)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(a):
    return Tensor(a, requires_grad=True)


class TestTensorBasics:
    def test_leaf_has_zero_grad_buffer(self):
        t = leaf([[1.0, 2.0]])
        assert t.grad.shape == t.shape
        assert not t.grad.any()

    def test_plain_tensor_has_no_grad(self):
        assert Tensor([1.0]).grad is None

    def test_data_is_float64(self):
        assert Tensor([1, 2]).data.dtype == np.float64

    def test_sum_of_squares_gradient(self):
        x = leaf([1.0, 2.0])
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_sum_of_squares_matches_finite_differences(self):
        x = leaf([1.0, 2.0])
        num = numeric_grad(lambda: (x * x).sum(), x)
        np.testing.assert_allclose(num, [2.0, 4.0], rtol=1e-9)

    def test_gradients_accumulate_over_shared_paths(self):
        x = leaf([3.0])
        y = x * x + x * 2.0
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_backward_needs_scalar_root(self):
        with pytest.raises(ShapeError):
            leaf([1.0, 2.0]).backward()

    def test_no_grad_disables_tracking(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_non_finite_raises_divergence(self):
        with pytest.raises(TrainingDivergenceError) as info:
            ops.log(Tensor([0.0]))
        assert info.value.primitive == "log"


class TestPrimitiveValues:
    def test_softmax_of_zeros_is_uniform(self):
        np.testing.assert_allclose(ops.softmax(Tensor(np.zeros(4))).data, 0.25)

    def test_leaky_relu_slope(self):
        out = ops.leaky_relu(Tensor([-1.0, 2.0])).data
        np.testing.assert_allclose(out, [-0.2, 2.0])

    def test_relu(self):
        np.testing.assert_allclose(ops.relu(Tensor([-1.0, 0.5])).data, [0.0, 0.5])

    def test_xlogx_zero_convention(self):
        np.testing.assert_allclose(ops.xlogx(Tensor([0.0, 1.0, np.e])).data, [0.0, 0.0, np.e])

    def test_softplus_large_inputs(self):
        out = ops.softplus(Tensor([-800.0, 0.0, 800.0])).data
        np.testing.assert_allclose(out, [0.0, np.log(2.0), 800.0])

    def test_sigmoid_extremes_are_finite(self):
        out = ops.sigmoid(Tensor([-800.0, 800.0])).data
        np.testing.assert_allclose(out, [0.0, 1.0])

    def test_norm_zero_subgradient(self):
        x = leaf(np.zeros((1, 3)))
        ops.norm(x, axis=-1).sum().backward()
        assert not x.grad.any()

    def test_matmul_shape_error_names_primitive(self):
        with pytest.raises(ShapeError) as info:
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        assert info.value.primitive == "matmul"
        assert (2, 3) in info.value.shapes

    def test_add_broadcast_error(self):
        with pytest.raises(ShapeError):
            ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_conv_identity_kernel(self, rng):
        x = rng.normal(size=(2, 5, 5, 3))
        w = np.zeros((3, 3, 3, 3))
        w[1, 1] = np.eye(3)
        np.testing.assert_allclose(nn.conv2d(Tensor(x), Tensor(w)).data, x)

    def test_conv_against_direct_loops(self, rng):
        x = rng.normal(size=(1, 6, 6, 2))
        w = rng.normal(size=(3, 3, 2, 2))
        dil, stride = 2, 2
        out = nn.conv2d(Tensor(x), Tensor(w), stride=stride, dilation=dil).data
        xp = np.pad(x, ((0, 0), (dil, dil), (dil, dil), (0, 0)))
        ref = np.zeros((1, 3, 3, 2))
        for i in range(3):
            for j in range(3):
                for a in range(3):
                    for b in range(3):
                        ref[0, i, j] += xp[0, i * stride + a * dil, j * stride + b * dil] @ w[a, b]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_avg_pool_then_nearest_upsample_preserves_mean(self, rng):
        x = rng.normal(size=(1, 4, 4, 2))
        up = nn.upsample_nearest(nn.avg_pool2d(Tensor(x), 2), 2).data
        np.testing.assert_allclose(up.mean(axis=(1, 2)), x.mean(axis=(1, 2)))

    def test_bilinear_rows_sum_to_one(self):
        np.testing.assert_allclose(nn.bilinear_matrix(5, 2).sum(axis=1), 1.0)

    def test_bilinear_constant_is_preserved(self):
        out = nn.upsample_bilinear(Tensor(np.full((1, 3, 3, 1), 2.5)), 2).data
        np.testing.assert_allclose(out, 2.5)

    def test_batch_norm_train_normalises(self, rng):
        x = rng.normal(3.0, 2.0, size=(4, 5, 5, 3))
        out = nn.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                            np.zeros(3), np.ones(3), training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1.0, rtol=1e-4)

    def test_batch_norm_eval_uses_running_stats(self):
        x = np.full((1, 2, 2, 1), 5.0)
        out = nn.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                            np.array([1.0]), np.array([4.0]), training=False, eps=0.0).data
        np.testing.assert_allclose(out, 2.0)

    def test_dropout_eval_is_identity(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        assert nn.dropout(x, 0.5, None, training=False) is x

    def test_dropout_keeps_expectation(self):
        x = Tensor(np.ones((200, 200)))
        out = nn.dropout(x, 0.1, np.random.default_rng(0), training=True).data
        assert abs(out.mean() - 1.0) < 0.01
        assert set(np.unique(out)) <= {0.0, 1.0 / 0.9}


class TestGradientReversal:
    def test_forward_is_bit_identical(self):
        x = np.array([1.5, -2.0])
        out = ops.gradient_reversal(Tensor(x), 1.0).data
        assert out.tobytes() == x.tobytes()

    def test_unit_scale_negates(self):
        x = leaf([1.5, -2.0, 0.3])
        ops.gradient_reversal(x, 1.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [-1.0, -1.0, -1.0])

    def test_half_scale_against_bypassed_finite_difference(self, rng):
        x = leaf(rng.normal(size=4))
        num = numeric_grad(lambda: ops.exp(x).sum(), x)
        ops.exp(ops.gradient_reversal(x, 0.5)).sum().backward()
        np.testing.assert_allclose(x.grad, -0.5 * num, rtol=1e-8)

    def test_half_scale_on_plain_sum(self):
        x = leaf(np.zeros(3))
        ops.gradient_reversal(x, 0.5).sum().backward()
        np.testing.assert_array_equal(x.grad, [-0.5, -0.5, -0.5])

    def test_negative_scale_rejected(self):
        with pytest.raises(ValueError):
            ops.gradient_reversal(Tensor([1.0]), -1.0)


def _random_check(seed):
    """Random shape and primitive composition for the property test."""
    r = np.random.default_rng(seed)
    n, h, c = int(r.integers(1, 3)), int(r.choice([4, 6])), int(r.integers(1, 3))
    x = leaf(r.normal(size=(n, h, h, c)))
    w = leaf(r.normal(size=(3, 3, c, 2)))
    v = leaf(r.normal(size=(2, 3)))
    dil, stride = int(r.integers(1, 3)), int(r.integers(1, 3))
    gamma, beta = leaf(r.uniform(0.5, 1.5, 2)), leaf(r.normal(size=2))

    def build():
        y = nn.conv2d(x, w, stride=stride, dilation=dil)
        y = nn.batch_norm(y, gamma, beta, np.zeros(2), np.ones(2), training=True)
        y = ops.leaky_relu(y)
        y = nn.upsample_bilinear(y, 2)
        y = nn.avg_pool2d(y, 2)
        z = ops.softmax(y @ v, axis=-1)
        a = ops.sigmoid(ops.abs(y) @ v + 0.1)
        q = ops.concat([z, a], axis=-1)
        return ops.sum(ops.xlogx(q)) + ops.mean(ops.exp(ops.clip(y, -3, 3))) + ops.sum(ops.norm(y, axis=-1))

    return grad_check(build, {"x": x, "w": w, "v": v, "gamma": gamma, "beta": beta}, 1e-4)


class TestGradientProperties:
    @pytest.mark.parametrize("seed", range(20))
    def test_random_compositions(self, seed):
        res = _random_check(seed)
        assert res.passed, (res.max_rel_error, res.worst_leaf, res.worst_index)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=12))
    def test_softmax_rows_on_simplex(self, values):
        out = ops.softmax(Tensor(np.array(values))).data
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) <= 1e-12

    def test_linear_graph_is_exact(self, rng):
        # central differences are exact for a linear map up to rounding of f,
        # which scales like |f| / step; at the origin f(+-h e_i) is tiny
        a = rng.normal(size=(3, 4))
        x = leaf(np.zeros((4, 2)))
        res = grad_check(lambda: ops.sum(Tensor(a) @ x), {"x": x})
        assert res.max_rel_error <= 1e-10

    def test_elementwise_primitives(self, rng):
        x = leaf(rng.uniform(0.5, 2.0, size=(3, 2)))
        y = leaf(rng.uniform(0.5, 2.0, size=(3, 2)))

        def build():
            return ops.sum(ops.log(x) * ops.sqrt(y) / (x + y) - ops.power(x, 3) + ops.maximum(x, y)
                           + ops.relu(x - y) + ops.softplus(x - y))

        res = grad_check(build, {"x": x, "y": y})
        assert res.passed

    def test_shape_primitives(self, rng):
        x = leaf(rng.normal(size=(2, 3, 4)))

        def build():
            t = ops.transpose(x, (2, 0, 1)).reshape(4, 6)
            return ops.sum(ops.getitem(t, (slice(1, 3),)) ** 2) + ops.mean(x, axis=(0, 2)).sum()

        assert grad_check(build, {"x": x}).passed

    def test_nearest_upsample(self, rng):
        x = leaf(rng.normal(size=(1, 2, 2, 1)))
        w = rng.normal(size=(1, 4, 4, 1))
        assert grad_check(lambda: ops.sum(nn.upsample_nearest(x, 2) * w), {"x": x}).passed

    def test_scales_fold_reversal(self, rng):
        x = leaf(rng.normal(size=3))
        res = grad_check(lambda: ops.sum(ops.exp(ops.gradient_reversal(x, 0.3))), {"x": x},
                         scales={"x": -0.3})
        assert res.passed

    def test_unscaled_reversal_fails_check(self, rng):
        x = leaf(rng.normal(size=3))
        res = grad_check(lambda: ops.sum(ops.exp(ops.gradient_reversal(x, 0.3))), {"x": x})
        assert not res.passed

    def test_non_finite_numeric_reports_coordinate(self):
        x = leaf([1.0, 0.0])

        def build():
            return ops.sum(ops.sqrt(x * x + 1.0)) + ops.sum(ops.log(ops.getitem(x, 0) + 1e-300))

        x.data[0] = 0.0
        with pytest.raises((GradCheckError, TrainingDivergenceError)):
            grad_check(build, {"x": x})


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = ParameterStore({"a": np.array([1.0, -2.0])})
        before = p.snapshot()
        adam_step(p, AdamState(lr=0.1))
        np.testing.assert_array_equal(p["a"].data, before["a"])

    def test_first_step_moves_by_lr(self):
        p = ParameterStore({"p": np.array(1.0)})
        p["p"].grad = np.array(1.0)
        adam_step(p, AdamState(lr=0.1))
        # bias-corrected first step: m_hat = 1, v_hat = 1 -> p - 0.1 * 1 / (1 + 1e-8)
        assert p["p"].data == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)

    def test_grads_zeroed_after_step(self):
        p = ParameterStore({"p": np.ones(2)})
        p["p"].grad = np.ones(2)
        adam_step(p, AdamState(lr=0.1))
        assert not p["p"].grad.any()

    def test_identical_params_identical_updates(self, rng):
        g = rng.normal(size=3)
        p = ParameterStore({"a": np.ones(3), "b": np.ones(3)})
        state = AdamState(lr=0.01)
        for _ in range(5):
            p["a"].grad = g.copy()
            p["b"].grad = g.copy()
            adam_step(p, state)
        np.testing.assert_array_equal(p["a"].data, p["b"].data)

    def test_missing_grad_names_parameter(self):
        p = ParameterStore({"layer.w": np.ones(2)})
        p["layer.w"].grad = None
        with pytest.raises(MissingGradError, match="layer.w"):
            adam_step(p, AdamState(lr=0.1))

    def test_step_counter_monotone(self):
        p = ParameterStore({"a": np.ones(1)})
        state = AdamState(lr=0.1)
        steps = []
        for _ in range(3):
            adam_step(p, state)
            steps.append(state.step)
        assert steps == [1, 2, 3]

    def test_seeded_trajectories_bit_identical(self):
        def run():
            r = np.random.default_rng(9)
            p = ParameterStore({"w": r.normal(size=(3, 2))})
            x = r.normal(size=(5, 3))
            state = AdamState(lr=0.05)
            for _ in range(20):
                ops.sum(ops.exp(Tensor(x) @ p["w"] * 0.1)).backward()
                adam_step(p, state)
            return p["w"].data.tobytes()

        assert run() == run()


class TestParameterStore:
    def test_duplicate_names_rejected(self):
        p = ParameterStore({"a": np.ones(1)})
        with pytest.raises(KeyError):
            p.add("a", np.ones(1))

    def test_snapshot_restore_bit_exact(self, rng):
        p = ParameterStore({"a": rng.normal(size=(2, 2)), "b": rng.normal(size=3)})
        snap = p.snapshot()
        p["a"].data = p["a"].data + 1.0
        p.restore(snap)
        for k in snap:
            assert p[k].data.tobytes() == snap[k].tobytes()

    def test_restore_rejects_shape_change(self):
        p = ParameterStore({"a": np.ones(2)})
        with pytest.raises(ValueError):
            p.restore({"a": np.ones(3)})

    def test_merged_shares_tensors(self):
        a = ParameterStore({"a": np.ones(1)})
        b = ParameterStore({"b": np.ones(1)})
        m = a.merged(b)
        assert m["a"] is a["a"] and m["b"] is b["b"]


class TestNtsr:
    def test_header_layout(self):
        buf = ntsr.encode(np.zeros((2, 3)))
        assert buf[:4] == b"NTSR"
        assert buf[4] == 1 and buf[5] == 1
        assert int.from_bytes(buf[6:10], "little") == 2
        assert int.from_bytes(buf[10:14], "little") == 2
        assert int.from_bytes(buf[14:18], "little") == 3
        assert len(buf) == 18 + 6 * 8

    def test_u8_code(self):
        assert ntsr.encode(np.zeros(2, dtype=np.uint8))[5] == 2

    @pytest.mark.parametrize("dtype", [np.float64, np.uint8])
    def test_round_trip(self, tmp_path, rng, dtype):
        arr = (rng.uniform(0, 200, size=(3, 4, 2))).astype(dtype)
        ntsr.save(tmp_path / "a.ntsr", arr)
        back = ntsr.load(tmp_path / "a.ntsr")
        assert back.dtype == dtype and back.tobytes() == arr.tobytes()

    def test_scalar_round_trip(self):
        assert ntsr.decode(ntsr.encode(np.float64(2.5))) == 2.5

    def test_rejects_other_dtypes(self):
        with pytest.raises(FormatError):
            ntsr.encode(np.zeros(2, dtype=np.float32))

    def test_rejects_bad_magic_and_truncation(self):
        buf = ntsr.encode(np.ones(3))
        with pytest.raises(FormatError):
            ntsr.decode(b"XXXX" + buf[4:])
        with pytest.raises(FormatError):
            ntsr.decode(buf[:-1])
