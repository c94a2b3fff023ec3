import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wm_poet import numerics as nm
from wm_poet.errors import ConfigError, ContractError, DimensionError, NumericError


def scalar_gru_reference(x, h, p):
    """Independent scalar-loop GRU oracle (same gate layout as the engine)."""
    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    hidden = p.hidden_size
    out = []
    for j in range(hidden):
        zj = p.b_z.data[j]
        rj = p.b_r.data[j]
        for i in range(p.input_size):
            zj += x[i] * p.w_xz.data[i][j]
            rj += x[i] * p.w_xr.data[i][j]
        for i in range(hidden):
            zj += h[i] * p.w_hz.data[i][j]
            rj += h[i] * p.w_hr.data[i][j]
        z = sig(zj)
        r = sig(rj)
        nj = p.b_n.data[j]
        for i in range(p.input_size):
            nj += x[i] * p.w_xn.data[i][j]
        hn = 0.0
        for i in range(hidden):
            hn += h[i] * p.w_hn.data[i][j]
        n = math.tanh(nj + r * hn)
        out.append(z * h[j] + (1.0 - z) * n)
    return out


class TestLinear:
    def test_identity_weight(self):
        x = nm.constant([[1.0, 2.0]])
        w = nm.constant(np.eye(2))
        y = nm.linear_forward(x, w)
        np.testing.assert_allclose(y.data, [[1.0, 2.0]])

    def test_hand_matmul_with_bias(self):
        x = nm.constant([[1.0, 0.0]])
        w = nm.constant([[2.0, 3.0], [4.0, 5.0]])
        b = nm.constant([1.0, 1.0])
        y = nm.linear_forward(x, w, b)
        np.testing.assert_allclose(y.data, [[3.0, 4.0]])

    def test_zero_input(self):
        x = nm.constant(np.zeros((3, 4)))
        w = nm.constant(np.ones((4, 2)))
        b = nm.constant(np.zeros(2))
        y = nm.linear_forward(x, w, b)
        assert np.all(y.data == 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nm.linear_forward(nm.constant([[1.0, 2.0]]), nm.constant(np.ones((3, 2))))


class TestSoftmax:
    def test_uniform(self):
        y = nm.softmax(nm.constant([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, [1 / 3, 1 / 3, 1 / 3], rtol=1e-6)

    def test_closed_form(self):
        y = nm.softmax(nm.constant([math.log(2.0), 0.0]))
        np.testing.assert_allclose(y.data, [2 / 3, 1 / 3], rtol=1e-5)

    def test_large_logit_stability(self):
        y = nm.softmax(nm.constant([1000.0, 0.0]))
        assert np.isfinite(y.data).all()
        assert y.data[0] > 0.999

    def test_nan_input_rejected(self):
        with pytest.raises(NumericError):
            nm.softmax(nm.constant([float("nan"), 0.0]))

    @settings(max_examples=200)
    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=16))
    def test_distribution_properties(self, values):
        y = nm.softmax(nm.constant(values)).data
        assert abs(float(y.sum()) - 1.0) < 1e-6
        assert (y > 0).all()


class TestGruCell:
    def _cell(self, input_size, hidden_size, rng=None, init=None):
        reg = nm.ParameterRegistry()
        rng = rng or np.random.default_rng(0)
        p = nm.GruCellParams.create("gru", input_size, hidden_size, reg, rng)
        if init == "zero":
            for param in reg:
                param.data[...] = 0.0
        return p

    def test_zero_parameters_fixed_point(self):
        p = self._cell(3, 2, init="zero")
        h = nm.gru_cell_forward(nm.constant([1.0, -1.0, 0.5]), nm.constant([0.0, 0.0]), p)
        np.testing.assert_allclose(h.data, [0.0, 0.0])

    def test_update_gate_saturation(self):
        p = self._cell(3, 2, init="zero")
        p.b_z.data[...] = 1e3
        h_prev = nm.constant([0.3, -0.7])
        h = nm.gru_cell_forward(nm.constant([1.0, 2.0, 3.0]), h_prev, p)
        np.testing.assert_allclose(h.data, h_prev.data, atol=1e-3)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(7)
        p = self._cell(3, 4, rng=rng)
        for param in [p.w_xz, p.w_hz, p.b_z, p.w_xr, p.w_hr, p.b_r, p.w_xn, p.w_hn, p.b_n]:
            param.data[...] = rng.uniform(-1, 1, size=param.data.shape)
        for _ in range(5):
            x = rng.uniform(-1, 1, size=3)
            h = rng.uniform(-1, 1, size=4)
            got = nm.gru_cell_forward(nm.constant(x), nm.constant(h), p)
            want = scalar_gru_reference(list(x), list(h), p)
            np.testing.assert_allclose(got.data, want, atol=1e-5)

    def test_batched_input(self):
        p = self._cell(3, 2)
        h = nm.gru_cell_forward(nm.constant(np.ones((5, 3))), nm.constant(np.zeros((5, 2))), p)
        assert h.data.shape == (5, 2)

    def test_shape_mismatch(self):
        p = self._cell(3, 2)
        with pytest.raises(DimensionError):
            nm.gru_cell_forward(nm.constant([1.0, 2.0]), nm.constant([0.0, 0.0]), p)


class TestBackward:
    def test_linear_gradient(self):
        reg = nm.ParameterRegistry()
        w = reg.add("w", np.array([1.0, 2.0, 3.0], dtype=np.float32))
        x = nm.constant([4.0, 5.0, 6.0])
        loss = nm.ssum(nm.mul(w.tensor, x))
        nm.backward(loss)
        np.testing.assert_allclose(w.grad, x.data)

    def test_cross_entropy_gradient_closed_form(self):
        reg = nm.ParameterRegistry()
        logits = reg.add("z", np.zeros(2, dtype=np.float32))
        loss = nm.cross_entropy_logits(logits.tensor, 0)
        nm.backward(loss)
        np.testing.assert_allclose(logits.grad, [-0.5, 0.5], atol=1e-7)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ContractError):
            nm.backward(nm.constant([1.0, 2.0]))

    def test_grad_accumulates_across_backwards(self):
        reg = nm.ParameterRegistry()
        w = reg.add("w", np.array([2.0], dtype=np.float32))
        for _ in range(3):
            nm.backward(nm.ssum(nm.scale(w.tensor, 1.0)))
        np.testing.assert_allclose(w.grad, [3.0])

    def test_no_grad_builds_no_graph(self):
        reg = nm.ParameterRegistry()
        w = reg.add("w", np.ones(3, dtype=np.float32))
        with nm.no_grad():
            y = nm.ssum(nm.tanh(w.tensor))
        assert y._parents == () and not y.requires_grad


def fd_check(build_loss, param_arrays, eps=1e-6, tol=1e-4):
    """Central-difference oracle for a loss over named float64 arrays."""
    with nm.use_dtype(np.float64):
        reg = nm.ParameterRegistry()
        params = [reg.add(name, arr.astype(np.float64)) for name, arr in param_arrays]
        loss = build_loss(*[p.tensor for p in params])
        nm.backward(loss)
        for p in params:
            flat = p.data.reshape(-1)
            g = p.grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                with nm.no_grad():
                    up = float(build_loss(*[q.tensor for q in params]).data)
                flat[i] = orig - eps
                with nm.no_grad():
                    down = float(build_loss(*[q.tensor for q in params]).data)
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                denom = max(abs(g[i]), abs(fd), 1e-8)
                assert abs(g[i] - fd) / denom < tol, f"{p.name}[{i}]: ad={g[i]} fd={fd}"


class TestOpGradients:
    """Every exported op matches central finite differences in float64."""

    rng = np.random.default_rng(42)

    def test_add_mul_broadcast(self):
        a = self.rng.uniform(-1, 1, (3, 1))
        b = self.rng.uniform(-1, 1, (1, 4))
        fd_check(lambda ta, tb: nm.ssum(nm.mul(nm.add(ta, tb), nm.add(ta, tb))),
                 [("a", a), ("b", b)])

    def test_sub_scale(self):
        a = self.rng.uniform(-1, 1, (4,))
        fd_check(lambda t: nm.ssum(nm.sub(nm.scale(t, 3.0), nm.add_scalar(t, 0.5))), [("a", a)])

    def test_matmul_2d(self):
        a = self.rng.uniform(-1, 1, (2, 3))
        b = self.rng.uniform(-1, 1, (3, 4))
        fd_check(lambda ta, tb: nm.ssum(nm.matmul(ta, tb)), [("a", a), ("b", b)])

    def test_matmul_vec_mat(self):
        a = self.rng.uniform(-1, 1, (3,))
        b = self.rng.uniform(-1, 1, (3, 4))
        fd_check(lambda ta, tb: nm.ssum(nm.matmul(ta, tb)), [("a", a), ("b", b)])

    def test_matmul_mat_vec(self):
        a = self.rng.uniform(-1, 1, (3, 4))
        b = self.rng.uniform(-1, 1, (4,))
        fd_check(lambda ta, tb: nm.ssum(nm.matmul(ta, tb)), [("a", a), ("b", b)])

    def test_tanh_sigmoid(self):
        a = self.rng.uniform(-2, 2, (5,))
        fd_check(lambda t: nm.ssum(nm.mul(nm.tanh(t), nm.sigmoid(t))), [("a", a)])

    def test_softmax(self):
        a = self.rng.uniform(-2, 2, (6,))
        w = self.rng.uniform(-1, 1, (6,))
        fd_check(lambda t: nm.ssum(nm.mul(nm.softmax(t), nm.constant(w))), [("a", a)])

    def test_concat_slice(self):
        a = self.rng.uniform(-1, 1, (2, 3))
        b = self.rng.uniform(-1, 1, (4, 3))
        fd_check(lambda ta, tb: nm.ssum(nm.tanh(nm.slice0(nm.concat([ta, tb], axis=0), 1, 5))),
                 [("a", a), ("b", b)])

    def test_concat_axis1(self):
        a = self.rng.uniform(-1, 1, (2, 3))
        b = self.rng.uniform(-1, 1, (2, 2))
        fd_check(lambda ta, tb: nm.ssum(nm.tanh(nm.concat([ta, tb], axis=1))),
                 [("a", a), ("b", b)])

    def test_gather_rows(self):
        t = self.rng.uniform(-1, 1, (5, 3))
        fd_check(lambda tt: nm.ssum(nm.tanh(nm.gather_rows(tt, [0, 2, 2, 4]))), [("t", t)])

    def test_stack_take_row(self):
        a = self.rng.uniform(-1, 1, (4,))
        b = self.rng.uniform(-1, 1, (4,))
        fd_check(lambda ta, tb: nm.ssum(nm.take_row(nm.stack_rows([ta, tb, ta]), 2)),
                 [("a", a), ("b", b)])

    def test_tile_mean_reshape(self):
        a = self.rng.uniform(-1, 1, (3,))
        fd_check(lambda t: nm.ssum(nm.mean0(nm.tile_row(t, 4))), [("a", a)])
        fd_check(lambda t: nm.ssum(nm.reshape(t, (3, 1))), [("a", a)])

    def test_vmax(self):
        a = np.array([0.3, 1.7, -0.2, 0.9])
        fd_check(lambda t: nm.vmax(nm.mul(t, t)), [("a", a)])

    def test_cross_entropy(self):
        z = self.rng.uniform(-2, 2, (7,))
        fd_check(lambda t: nm.cross_entropy_logits(t, 3), [("z", z)])

    def test_gru_cell_gradients(self):
        with nm.use_dtype(np.float64):
            rng = np.random.default_rng(3)
            reg = nm.ParameterRegistry()
            p = nm.GruCellParams.create("g", 2, 3, reg, rng)
            x = nm.constant(rng.uniform(-1, 1, 2))
            h = nm.constant(rng.uniform(-1, 1, 3))
            report = nm.gradient_check(
                lambda: nm.ssum(nm.gru_cell_forward(x, h, p)), list(reg), tolerance=1e-4)
        assert report.passed, report.per_param


class TestAdam:
    def _single(self, value=1.0):
        reg = nm.ParameterRegistry()
        return reg.add("p", np.array([value], dtype=np.float32))

    def test_zero_grad_fresh_moments_bit_identical(self):
        p = self._single(0.731)
        before = p.data.copy()
        nm.adam_step([p], lr=0.001)
        assert np.array_equal(p.data, before)

    def test_first_step_closed_form(self):
        p = self._single(1.0)
        p.grad[...] = 1.0
        nm.adam_step([p], lr=0.001)
        # bias-corrected m_hat/sqrt(v_hat) = 1 on the first step
        np.testing.assert_allclose(p.data, [1.0 - 0.001], rtol=1e-5)

    def test_l2_pulls_toward_zero(self):
        p = self._single(2.0)
        nm.adam_step([p], lr=0.001, l2=0.1)
        # effective grad = l2 * p > 0, so the parameter must shrink
        assert p.data[0] < 2.0

    def test_grads_zeroed_after_step(self):
        p = self._single()
        p.grad[...] = 3.0
        nm.adam_step([p], lr=0.001)
        assert np.all(p.grad == 0.0)


class TestClip:
    def test_norm_and_clip(self):
        reg = nm.ParameterRegistry()
        a = reg.add("a", np.zeros(3, dtype=np.float32))
        b = reg.add("b", np.zeros(4, dtype=np.float32))
        a.grad[...] = 3.0
        b.grad[...] = 0.0
        norm = nm.clip_grad_norm([a, b], max_norm=1.0)
        assert norm == pytest.approx(math.sqrt(27.0))
        assert nm.global_grad_norm([a, b]) == pytest.approx(1.0, rel=1e-5)


class TestDropout:
    def test_rate_zero_identity(self):
        x = nm.constant([1.0, 2.0])
        assert nm.dropout_apply(x, 0.0, True, np.random.default_rng(0)) is x

    def test_inference_passthrough(self):
        x = nm.constant([1.0, 2.0])
        assert nm.dropout_apply(x, 0.25, False, np.random.default_rng(0)) is x

    def test_invalid_rate(self):
        with pytest.raises(ConfigError):
            nm.dropout_apply(nm.constant([1.0]), 1.0, True, np.random.default_rng(0))

    def test_statistics_at_quarter_rate(self):
        rng = np.random.default_rng(123)
        x = nm.constant(np.ones(100_000))
        y = nm.dropout_apply(x, 0.25, True, rng).data
        assert abs(y.mean() - 1.0) < 0.01
        zero_fraction = float((y == 0.0).mean())
        assert abs(zero_fraction - 0.25) < 0.01


class TestGradientCheck:
    def test_linear_softmax_toy(self):
        with nm.use_dtype(np.float64):
            rng = np.random.default_rng(11)
            reg = nm.ParameterRegistry()
            w = reg.uniform("w", (4, 3), rng)
            b = reg.zeros("b", (3,))
            x = nm.constant(rng.uniform(-1, 1, 4))

            def loss_fn():
                return nm.cross_entropy_logits(nm.linear_forward(x, w, b), 1)

            report = nm.gradient_check(loss_fn, list(reg), tolerance=1e-4)
        assert report.passed, report.per_param

    def test_gru_one_step(self):
        with nm.use_dtype(np.float64):
            rng = np.random.default_rng(12)
            reg = nm.ParameterRegistry()
            p = nm.GruCellParams.create("g", 3, 4, reg, rng)
            out_w = reg.uniform("out", (4, 5), rng)
            x = nm.constant(rng.uniform(-1, 1, 3))
            h0 = nm.constant(np.zeros(4))

            def loss_fn():
                h = nm.gru_cell_forward(x, h0, p)
                return nm.cross_entropy_logits(nm.matmul(h, out_w.tensor), 2)

            report = nm.gradient_check(loss_fn, list(reg), tolerance=1e-4)
        assert report.passed, report.per_param

    def test_nondeterministic_closure_detected(self):
        state = {"n": 0}

        def loss_fn():
            state["n"] += 1
            return nm.constant(float(state["n"]) + 0.0)

        with pytest.raises(ContractError):
            nm.gradient_check(loss_fn, [], tolerance=1e-4)
