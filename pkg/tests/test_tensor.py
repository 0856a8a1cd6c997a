import numpy as np
import pytest
from hypothesis import given, strategies as st

from blocksc import tensor as T


def fd_grad(loss, x, step=1e-6):
    """Central finite differences of a scalar loss w.r.t. array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        g[idx] = (loss(xp) - loss(xm)) / (2 * step)
        it.iternext()
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-30)
    return np.abs(a - b).max() / denom


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(np.eye(2), a), a)

    def test_annihilation(self):
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[0.0], [5.0]])
        assert np.array_equal(T.matmul(a, b), np.zeros((2, 1)))

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_vjp_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        cot = rng.normal(size=(3, 2))
        out = T.matmul(a, b)
        ca, cb = T.matmul_vjp(a, b, out, cot)
        fa = fd_grad(lambda x: float((T.matmul(x, b) * cot).sum()), a)
        fb = fd_grad(lambda x: float((T.matmul(a, x) * cot).sum()), b)
        assert rel_err(ca, fa) < 1e-7
        assert rel_err(cb, fb) < 1e-7


class TestConv2d:
    def test_zero_weight(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 4, 4))
        out = T.conv2d(x, np.zeros((3, 2, 3, 3)), np.zeros(3))
        assert np.array_equal(out, np.zeros((3, 4, 4)))

    def test_delta_kernel_identity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 5, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        assert np.allclose(T.conv2d(x, w, np.zeros(1)), x)

    def test_non_3x3_kernel(self):
        with pytest.raises(T.UnsupportedKernelError):
            T.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 5, 5)), np.zeros(1))

    def test_vjp_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        cot = rng.normal(size=(3, 5, 5))
        out = T.conv2d(x, w, b)
        cx, cw, cb = T.conv2d_vjp(x, w, b, out, cot)
        fx = fd_grad(lambda v: float((T.conv2d(v, w, b) * cot).sum()), x)
        fw = fd_grad(lambda v: float((T.conv2d(x, v, b) * cot).sum()), w)
        fb = fd_grad(lambda v: float((T.conv2d(x, w, v) * cot).sum()), b)
        assert rel_err(cx, fx) < 1e-6
        assert rel_err(cw, fw) < 1e-6
        assert rel_err(cb, fb) < 1e-6


class TestRelu:
    def test_basic(self):
        assert np.array_equal(T.relu(np.array([-1.0, 0.0, 2.0])),
                              np.array([0.0, 0.0, 2.0]))

    def test_all_negative(self):
        x = -np.abs(np.random.default_rng(4).normal(size=7)) - 0.1
        assert np.array_equal(T.relu(x), np.zeros(7))

    def test_vjp_mask(self):
        x = np.array([-1.0, 2.0])
        (cx,) = T.relu_vjp(x, T.relu(x), np.array([1.0, 1.0]))
        assert np.array_equal(cx, np.array([0.0, 1.0]))


class TestSoftThreshold:
    def test_definition(self):
        assert T.soft_threshold(np.array(2.0), 0.5) == pytest.approx(1.5)

    def test_dead_zone(self):
        assert T.soft_threshold(np.array(-0.3), 0.5) == 0.0

    def test_sign_symmetry(self):
        assert T.soft_threshold(np.array(-2.0), 0.5) == pytest.approx(-1.5)

    def test_tau_domain(self):
        with pytest.raises(ValueError):
            T.soft_threshold(np.array(1.0), 0.0)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20),
           st.floats(1e-3, 10.0))
    def test_odd_and_lipschitz(self, vals, tau):
        x = np.array(vals)
        assert np.allclose(T.soft_threshold(-x, tau), -T.soft_threshold(x, tau))
        y = x + 0.25
        lhs = np.abs(T.soft_threshold(x, tau) - T.soft_threshold(y, tau))
        assert np.all(lhs <= np.abs(x - y) + 1e-12)

    def test_vjp_vs_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 3)) * 2.0
        tau = 0.7
        cot = rng.normal(size=(4, 3))
        out = T.soft_threshold(x, tau)
        cx, ctau = T.soft_threshold_vjp(x, tau, out, cot)
        fx = fd_grad(lambda v: float((T.soft_threshold(v, tau) * cot).sum()), x)
        ftau = fd_grad(lambda v: float((T.soft_threshold(x, float(v)) * cot).sum()),
                       np.array(tau))
        assert rel_err(cx, fx) < 1e-7
        assert abs(ctau - float(ftau)) < 1e-6 * max(1.0, abs(ctau))


class TestCholSolve:
    def test_identity(self):
        b = np.random.default_rng(6).normal(size=(3, 2))
        assert np.allclose(T.chol_solve(np.eye(3), b), b)

    def test_diagonal(self):
        a = np.diag([2.0, 4.0])
        b = np.array([[2.0], [8.0]])
        assert np.allclose(T.chol_solve(a, b), np.array([[1.0], [2.0]]))

    def test_residual_oracle(self):
        rng = np.random.default_rng(7)
        m = rng.normal(size=(6, 6))
        a = m @ m.T + 6 * np.eye(6)
        b = rng.normal(size=(6, 4))
        x = T.chol_solve(a, b)
        assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) < 1e-12

    def test_non_spd_reports_pivot(self):
        a = np.diag([1.0, -1.0, 1.0])
        with pytest.raises(T.FactorizationError) as exc:
            T.chol_solve(a, np.ones((3, 1)))
        assert exc.value.pivot == 2

    def test_vjp_vs_finite_differences(self):
        rng = np.random.default_rng(8)
        m = rng.normal(size=(4, 4))
        a = m @ m.T + 4 * np.eye(4)
        b = rng.normal(size=(4, 3))
        cot = rng.normal(size=(4, 3))
        out = T.chol_solve(a, b)
        ca, cb = T.chol_solve_vjp(a, b, out, cot)
        fb = fd_grad(lambda v: float((T.chol_solve(a, v) * cot).sum()), b)
        assert rel_err(cb, fb) < 1e-7
        # A is perturbed symmetrically; the VJP is the symmetrized gradient
        step = 1e-6
        for i in range(4):
            for j in range(i + 1):
                e = np.zeros((4, 4))
                e[i, j] = e[j, i] = 1.0
                lp = float((T.chol_solve(a + step * e, b) * cot).sum())
                lm = float((T.chol_solve(a - step * e, b) * cot).sum())
                fd = (lp - lm) / (2 * step)
                expect = ca[i, j] + ca[j, i] if i != j else ca[i, i]
                assert abs(fd - expect) < 1e-5 * max(1.0, abs(expect))


class TestRegistryInvariants:
    def test_all_ops_registered(self):
        assert set(T.OPS) == {"matmul", "conv2d", "relu", "soft_threshold",
                              "chol_solve"}

    def test_forward_determinism(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=2)
        out1 = T.conv2d(x, w, b)
        out2 = T.conv2d(x, w, b)
        assert np.array_equal(out1, out2)

    def test_vjp_linearity_in_cotangent(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(3, 3))
        b = rng.normal(size=(3, 2))
        cot = rng.normal(size=(3, 2))
        out = T.matmul(a, b)
        ca1, cb1 = T.matmul_vjp(a, b, out, cot)
        ca2, cb2 = T.matmul_vjp(a, b, out, 2.0 * cot)
        assert np.allclose(ca2, 2.0 * ca1, atol=1e-12)
        assert np.allclose(cb2, 2.0 * cb1, atol=1e-12)

    def test_randomized_vjp_fd_agreement(self):
        # module-wide invariant: every DiffOp matches central differences
        rng = np.random.default_rng(11)
        for trial in range(3):
            x = rng.normal(size=(2, 4, 4))
            w = rng.normal(size=(2, 2, 3, 3)) * 0.5
            bias = rng.normal(size=2)
            cot = rng.normal(size=(2, 4, 4))
            cx, cw, cb = T.conv2d_vjp(x, w, bias, T.conv2d(x, w, bias), cot)
            fx = fd_grad(lambda v: float((T.conv2d(v, w, bias) * cot).sum()), x)
            assert rel_err(cx, fx) < 1e-5


class TestTape:
    def test_chain_backward_matches_manual(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        tape = T.Tape()
        h = tape.apply(T.OPS["conv2d"], x, w, b)
        out = tape.apply(T.OPS["relu"], h)
        cot = rng.normal(size=out.shape)
        cot_x, leaves = tape.backward(cot)
        fx = fd_grad(
            lambda v: float((T.relu(T.conv2d(v, w, b)) * cot).sum()), x)
        assert rel_err(cot_x, fx) < 1e-5
        # leaf cotangents: conv's (w, b) then relu's ()
        assert len(leaves) == 2 and len(leaves[0]) == 2 and leaves[1] == ()

    def test_as_tensor_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            T.as_tensor([1.0, np.inf])
