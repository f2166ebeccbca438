import numpy as np
import pytest

from stylediff import autodiff as ad
from stylediff.autodiff import DimensionError, GradTape, Tensor, record
from stylediff.gradcheck import fd_check


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_projector_row_selection(self):
        p = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(ad.matmul(p, b).data, [[5.0, 6.0], [0.0, 0.0]])

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        got = ad.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, naive_matmul(a, b), atol=1e-12)

    def test_associativity_against_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(-10, 10, (4, 5))
        b = rng.uniform(-10, 10, (5, 3))
        c = rng.uniform(-10, 10, (3, 6))
        left = ad.matmul(ad.matmul(Tensor(a), Tensor(b)), Tensor(c)).data
        right = ad.matmul(Tensor(a), ad.matmul(Tensor(b), Tensor(c))).data
        np.testing.assert_allclose(left, right, atol=1e-10)
        np.testing.assert_allclose(left, naive_matmul(naive_matmul(a, b), c), atol=1e-10)

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_matches_per_element(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((3, 4, 5))
        b = rng.standard_normal((3, 5, 2))
        got = ad.matmul(Tensor(a), Tensor(b)).data
        for i in range(3):
            np.testing.assert_allclose(got[i], a[i] @ b[i], atol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0])).data
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)

    def test_two_element_closed_form(self):
        c = 1.0
        out = ad.softmax(Tensor([2.0, 2.0 + c])).data
        np.testing.assert_allclose(out, [1 / (1 + np.e), np.e / (1 + np.e)], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 9)) * 5
        out = ad.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(6), atol=1e-12)
        assert (out > 0).all()

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 7))
        a = ad.softmax(Tensor(x)).data
        b = ad.softmax(Tensor(x + 123.456)).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestChannelStats:
    def test_constant_tensor_hits_floor(self):
        mu, sigma = ad.channel_stats(Tensor(np.full((4, 3), 5.0)))
        np.testing.assert_allclose(mu.data, [5.0] * 3, atol=1e-15)
        np.testing.assert_allclose(sigma.data, [ad.EPS_STD] * 3, atol=1e-18)

    def test_two_point_case(self):
        mu, sigma = ad.channel_stats(Tensor([[1.0], [3.0]]))
        assert mu.data[0] == 2.0
        assert sigma.data[0] == 1.0

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((64, 8))
        mu, sigma = ad.channel_stats(Tensor(x))
        mu_oracle = x.sum(axis=0) / 64
        var_oracle = ((x - mu_oracle) ** 2).sum(axis=0) / 64
        np.testing.assert_allclose(mu.data, mu_oracle, atol=1e-12)
        np.testing.assert_allclose(sigma.data, np.sqrt(var_oracle), atol=1e-12)

    def test_sigma_never_below_floor(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            x = rng.standard_normal((5, 4)) * rng.uniform(0, 1e-6)
            _, sigma = ad.channel_stats(Tensor(x))
            assert (sigma.data >= ad.EPS_STD).all()

    def test_empty_axis_rejected(self):
        with pytest.raises(DimensionError):
            ad.channel_stats(Tensor(np.zeros((0, 3))))


class TestFdCheck:
    def test_square_at_three(self):
        theta = Tensor(np.array([3.0]), requires_grad=True)

        def f():
            return ad.tsum(ad.mul(theta, theta))

        worst, report = fd_check(f, {"theta": theta}, h=1e-4)
        assert worst < 1e-9  # central difference is exact on quadratics up to roundoff
        theta.zero_grad()
        tape = GradTape()
        with record(tape):
            loss = f()
        tape.backward(loss)
        np.testing.assert_allclose(theta.grad, [6.0], atol=1e-12)

    def test_sum_of_softmax_is_constant(self):
        theta = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)

        def f():
            return ad.tsum(ad.softmax(theta))

        tape = GradTape()
        with record(tape):
            loss = f()
        tape.backward(loss)
        assert np.abs(theta.grad).max() < 1e-12
        worst, _ = fd_check(f, {"theta": theta}, h=1e-4)
        assert worst < 1e-4

    def test_composite_expression(self):
        rng = np.random.default_rng(2)
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        x = Tensor(rng.standard_normal((5, 4)))

        def f():
            h = ad.tanh(ad.add(ad.matmul(x, w), b))
            s = ad.softmax(h, axis=-1)
            return ad.tmean(ad.mul(s, s))

        worst, _ = fd_check(f, {"w": w, "b": b}, h=1e-4)
        assert worst < 1e-4


class TestOpsGradients:
    """FD verification of each primitive through a random composite."""

    @pytest.mark.parametrize(
        "name,build",
        [
            ("exp", lambda t: ad.texp(ad.mul(t, 0.3))),
            ("log", lambda t: ad.tlog(ad.add(ad.mul(t, t), 1.0))),
            ("sqrt", lambda t: ad.tsqrt(ad.add(ad.mul(t, t), 0.5))),
            ("tanh", ad.tanh),
            ("silu", ad.silu),
            ("abs_shifted", lambda t: ad.tabs(ad.add(t, 0.37))),
            ("relu_shifted", lambda t: ad.relu(ad.add(t, 0.37))),
            ("clip01", lambda t: ad.clip01(ad.mul(t, 0.3))),
            ("maximum", lambda t: ad.maximum_scalar(t, -0.4)),
            ("softmax", lambda t: ad.softmax(t, axis=-1)),
            ("swap", lambda t: ad.swapaxes(ad.matmul(t, t), 0, 1)),
            ("getitem", lambda t: t[1:3, ::2]),
            ("div", lambda t: ad.div(t, ad.add(ad.mul(t, t), 2.0))),
        ],
    )
    def test_primitive(self, name, build):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        t = Tensor(rng.standard_normal((4, 4)) * 0.7, requires_grad=True)

        def f():
            return ad.tmean(ad.mul(build(t), 3.0))

        worst, _ = fd_check(f, {name: t}, h=1e-4)
        assert worst < 1e-4, f"{name}: {worst}"

    def test_concat_and_sum_axes(self):
        rng = np.random.default_rng(8)
        a = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 2)), requires_grad=True)

        def f():
            cat = ad.concat([a, b], axis=0)
            return ad.tsum(ad.mul(ad.tsum(cat, axis=0, keepdims=True), ad.tmean(cat, axis=1, keepdims=True)))

        worst, _ = fd_check(f, {"a": a, "b": b}, h=1e-4)
        assert worst < 1e-4

    def test_broadcast_gradients(self):
        rng = np.random.default_rng(12)
        row = Tensor(rng.standard_normal((1, 5)), requires_grad=True)
        mat = Tensor(rng.standard_normal((4, 5)), requires_grad=True)

        def f():
            return ad.tmean(ad.mul(ad.add(mat, row), ad.sub(mat, row)))

        worst, _ = fd_check(f, {"row": row, "mat": mat}, h=1e-4)
        assert worst < 1e-4


class TestConvAndResample:
    def test_conv2d_matches_naive_loops(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((5, 3, 3, 3))
        for stride, padding in [(1, 1), (2, 1), (1, 0), (2, 0)]:
            out = ad.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
            xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
            Ho = (xp.shape[2] - 3) // stride + 1
            Wo = (xp.shape[3] - 3) // stride + 1
            ref = np.zeros((2, 5, Ho, Wo))
            for b_ in range(2):
                for co in range(5):
                    for i in range(Ho):
                        for j in range(Wo):
                            patch = xp[b_, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                            ref[b_, co, i, j] = (patch * w[co]).sum()
            np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_conv2d_gradients(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.4, requires_grad=True)
        b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)

        def f():
            y = ad.conv2d(x, w, b, stride=2, padding=1)
            return ad.tmean(ad.mul(y, y))

        worst, _ = fd_check(f, {"x": x, "w": w, "b": b}, h=1e-4)
        assert worst < 1e-4

    def test_upsample_nearest_and_grad(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
        up = ad.upsample2x(x)
        assert up.shape == (1, 1, 4, 4)
        np.testing.assert_array_equal(
            up.data[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]
        )

        def f():
            y = ad.upsample2x(x)
            return ad.tmean(ad.mul(y, y))

        worst, _ = fd_check(f, {"x": x}, h=1e-4)
        assert worst < 1e-4


class TestTapeMechanics:
    def test_no_recording_outside_tape(self):
        a = Tensor(np.ones(3), requires_grad=True)
        out = ad.mul(a, 2.0)
        assert not out.requires_grad  # nothing active, nothing recorded

    def test_tape_topological_and_single_visit(self):
        a = Tensor(np.ones(3), requires_grad=True)
        tape = GradTape()
        with record(tape):
            b = ad.mul(a, 2.0)
            c = ad.add(b, b)  # diamond: b used twice
            loss = ad.tsum(c)
        ids = {id(a): 0}
        for i, (out, inputs, _) in enumerate(tape.nodes, start=1):
            for inp in inputs:
                assert id(inp) in ids or not inp.requires_grad  # inputs precede
            ids[id(out)] = i
        tape.backward(loss)
        np.testing.assert_allclose(a.grad, [4.0, 4.0, 4.0], atol=1e-15)

    def test_frozen_tensors_stay_off_tape(self):
        frozen = Tensor(np.ones((2, 2)))  # requires_grad False
        live = Tensor(np.ones((2, 2)), requires_grad=True)
        tape = GradTape()
        with record(tape):
            out = ad.matmul(frozen, live)
            loss = ad.tsum(out)
        tape.backward(loss)
        assert frozen.grad is None
        assert live.grad is not None

    def test_finite_guard(self):
        t = Tensor(np.array([1.0, np.inf]))
        with pytest.raises(ad.NonFiniteError):
            t.assert_finite("probe")
