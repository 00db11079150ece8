import gc
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docmem import tensor as T
from docmem.tensor import UsageError
from gradcases import CASES, run_case


def _triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        out = T.Tensor([[1, 0], [0, 1]]) @ T.Tensor([[3, 4], [5, 6]])
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_arithmetic(self):
        assert (T.Tensor([[1, 2]]) @ T.Tensor([[3], [4]])).data.tolist() == [[11]]

    def test_triple_loop_oracle(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose((T.Tensor(a) @ T.Tensor(b)).data, _triple_loop(a, b), atol=1e-6)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
            T.Tensor(np.ones((2, 3))) @ T.Tensor(np.ones((4, 5)))


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])

    @pytest.mark.parametrize("c", [-7.0, 0.0, 3.5])
    def test_shift_invariance(self, c):
        np.testing.assert_allclose(T.softmax(T.Tensor([c, c + np.log(3.0)])).data, [0.25, 0.75], atol=1e-6)

    def test_formula_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(T.softmax(T.Tensor(x)).data, np.exp(x) / np.exp(x).sum(), atol=1e-6)

    def test_rows_sum_to_one(self, rng):
        y = T.softmax(T.Tensor(rng.normal(size=(5, 7)) * 10), axis=-1).data
        np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)
        assert (y >= 0).all()

    def test_masked_positions_exactly_zero(self, rng):
        mask = np.array([[True, False, True], [False, False, True]])
        y = T.softmax(T.Tensor(rng.normal(size=(2, 3))), mask=mask).data
        assert (y[~mask] == 0).all()
        np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)

    def test_fully_masked_row_is_zero(self):
        y = T.softmax(T.Tensor(np.ones((1, 3))), mask=np.zeros((1, 3), dtype=bool)).data
        assert (y == 0).all()

    def test_non_finite_input(self):
        with pytest.raises(FloatingPointError):
            T.softmax(T.Tensor([0.0, np.inf]))

    def test_bad_axis(self):
        with pytest.raises(ValueError):
            T.softmax(T.Tensor(np.ones((2, 2))), axis=2)


class TestLayerNorm:
    def _ln(self, x, eps=1e-5):
        d = np.shape(x)[-1]
        return T.layer_norm(T.Tensor(x), T.Tensor(np.ones(d)), T.Tensor(np.zeros(d)), eps).data

    def test_constant_vector(self):
        np.testing.assert_array_equal(self._ln(np.full(4, 2.5)), np.zeros(4))

    def test_two_point(self):
        with T.default_dtype(np.float64):
            np.testing.assert_allclose(self._ln([1.0, 3.0], eps=1e-12), [-1.0, 1.0], atol=1e-9)

    def test_moments(self, rng):
        y = self._ln(rng.normal(3.0, 2.0, size=64)).astype(np.float64)
        assert abs(y.mean()) < 1e-4
        assert abs(y.var() - 1.0) < 1e-4

    @pytest.mark.parametrize("eps", [0.0, -1e-5])
    def test_nonpositive_eps(self, eps):
        with pytest.raises(ValueError, match="eps"):
            self._ln(np.ones(3), eps=eps)

    def test_affine_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.layer_norm(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(2)), T.Tensor(np.zeros(3)))


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.parameter(np.arange(6.0).reshape(2, 3))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_detach_blocks(self):
        x, y = T.parameter(np.ones(3)), T.parameter(np.full(3, 2.0))
        (T.detach(x) * y).sum().backward()
        assert x.grad is None
        np.testing.assert_array_equal(y.grad, np.ones(3))

    def test_two_layer_mlp_finite_differences(self, rng):
        with T.default_dtype(np.float64):
            x = T.Tensor(rng.normal(size=(5, 4)))
            w1, w2 = T.parameter(rng.normal(size=(4, 6))), T.parameter(rng.normal(size=(6, 1)))
            f = lambda: (T.tanh(x @ w1) @ w2).sum()
            assert T.gradcheck(f, [w1, w2], eps=1e-3) < 1e-3

    def test_non_scalar_is_usage_error(self):
        x = T.parameter(np.ones(3))
        with pytest.raises(UsageError, match="scalar"):
            (x * 2).backward()

    def test_detached_is_usage_error(self):
        with pytest.raises(UsageError):
            T.detach(T.parameter(np.ones(1))).sum().backward()

    def test_gradients_accumulate(self):
        x = T.parameter(np.ones(2))
        (x * 3).sum().backward()
        (x * 3).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_grad_leaves_buffers_alone(self):
        x = T.parameter(np.ones(2))
        (g,) = T.grad((x * x).sum(), [x])
        np.testing.assert_array_equal(g, [2.0, 2.0])
        assert x.grad is None

    def test_grad_of_unreachable_is_zero(self):
        x, y = T.parameter(np.ones(2)), T.parameter(np.ones(3))
        gx, gy = T.grad((x * 2).sum(), [x, y])
        assert not gy.any()

    def test_shared_subexpression(self):
        x = T.parameter(np.array([2.0]))
        y = x * x
        (y + y * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2 * 2.0 + 3 * 4.0])


class TestDetach:
    def test_values_bitwise(self, rng):
        x = T.parameter(rng.normal(size=(3, 3)))
        assert T.detach(x).data.tobytes() == x.data.tobytes()

    def test_idempotent(self, rng):
        x = T.parameter(rng.normal(size=4))
        a, b = T.detach(T.detach(x)), T.detach(x)
        assert a.data.tobytes() == b.data.tobytes()
        assert not a.requires_grad and a.is_leaf

    def test_in_place_sever(self):
        x = T.parameter(np.ones(3))
        h = x * 2
        h.detach_()
        loss = (h * T.parameter(np.ones(3))).sum()
        loss.backward()
        assert x.grad is None


class TestGradTracking:
    def test_no_grad_records_nothing(self):
        x = T.parameter(np.ones(2))
        with T.no_grad():
            y = x * 2
        assert not y.requires_grad and y.is_leaf
        assert T.is_grad_enabled()

    def test_no_grad_is_thread_local(self):
        x = T.parameter(np.ones(2))
        seen = {}
        with T.no_grad():
            t = threading.Thread(target=lambda: seen.setdefault("rg", (x * 2).requires_grad))
            t.start()
            t.join()
        assert seen["rg"]

    def test_default_dtype_scope(self):
        with T.default_dtype(np.float64):
            assert T.Tensor([1.0]).dtype == np.float64
        assert T.Tensor([1.0]).dtype == np.float32

    def test_deterministic(self, rng):
        a, b = rng.normal(size=(4, 8)), rng.normal(size=(8, 3))
        outs = [T.softmax(T.Tensor(a) @ T.Tensor(b)).data.tobytes() for _ in range(3)]
        assert len(set(outs)) == 1


class TestAllocationCounter:
    def test_live_and_peak(self):
        gc.collect()
        base = T.reset_peak_values()
        x = T.Tensor(np.zeros(1000))
        assert T.live_values() == base + 1000
        del x
        gc.collect()
        assert T.live_values() == base
        assert T.peak_values() >= base + 1000


class TestCrossEntropy:
    def test_perfect_prediction_is_zero(self):
        z = np.full((1, 3, 5), -1e4)
        t = np.array([[1, 2, 4]])
        z[0, np.arange(3), t[0]] = 0.0
        with T.default_dtype(np.float64):
            assert T.cross_entropy(T.Tensor(z), t, ignore_index=None).item() == pytest.approx(0.0, abs=1e-12)

    def test_formula_oracle(self, rng):
        z = rng.normal(size=(4, 6))
        t = np.array([1, 0, 5, 2])
        eps = 0.1
        logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        per = -(1 - eps) * logp[np.arange(4), t] - eps * logp.mean(-1)
        expect = per[t != 0].mean()
        with T.default_dtype(np.float64):
            got = T.cross_entropy(T.Tensor(z), t, ignore_index=0, label_smoothing=eps).item()
        assert got == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradcheck_case(name):
    assert max(run_case(name, seed) for seed in (0, 1)) < 1e-3


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.integers(1, 3), min_size=1, max_size=3),
    st.lists(st.booleans(), min_size=3, max_size=3),
    st.sampled_from(["add", "mul", "sub", "div"]),
)
def test_broadcast_gradients(shape, ones, op):
    """Gradient of a broadcast operand is the output gradient summed over broadcast axes."""
    small = [1 if o else n for n, o in zip(shape, ones)]
    rng = np.random.default_rng(len(shape))
    with T.default_dtype(np.float64):
        a = T.parameter(rng.normal(size=shape))
        b = T.parameter(rng.uniform(0.5, 2.0, size=small))
        R = rng.normal(size=shape)
        fn = {"add": lambda: a + b, "mul": lambda: a * b, "sub": lambda: a - b, "div": lambda: a / b}[op]
        ga, gb = T.grad((fn() * T.Tensor(R)).sum(), [a, b])
        assert ga.shape == a.shape and gb.shape == b.shape
        local = {"add": np.ones(shape), "mul": np.broadcast_to(a.data, shape), "sub": -np.ones(shape),
                 "div": -a.data / b.data ** 2}[op]
        axes = tuple(i for i, o in enumerate(ones[: len(shape)]) if o)
        np.testing.assert_allclose(gb, (R * local).sum(axis=axes, keepdims=True).reshape(small), rtol=1e-10)


class TestTorchOracle:
    """Gradients of composite ops against an independent autodiff engine."""

    def test_attention_block(self, rng):
        torch = pytest.importorskip("torch")
        x0, w0 = rng.normal(size=(2, 5, 8)), rng.normal(size=(8, 8)) * 0.3
        g0, b0 = rng.normal(size=8), rng.normal(size=8)
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
        R = rng.normal(size=(2, 5, 8))

        with T.default_dtype(np.float64):
            x, w, g, b = (T.parameter(v) for v in (x0, w0, g0, b0))
            q = x @ w
            att = T.softmax(q @ x.swapaxes(-1, -2) * (1 / np.sqrt(8)), mask=mask[:, None, :])
            y = T.layer_norm(T.gelu(att @ x) + x, g, b)
            ours = T.grad((y * T.Tensor(R)).sum(), [x, w, g, b])

        tx, tw, tg, tb = (torch.tensor(v, requires_grad=True) for v in (x0, w0, g0, b0))
        s = (tx @ tw) @ tx.transpose(-1, -2) / np.sqrt(8)
        s = s.masked_fill(~torch.tensor(mask)[:, None, :], float("-inf"))
        ty = torch.nn.functional.layer_norm(
            torch.nn.functional.gelu(torch.softmax(s, -1) @ tx, approximate="tanh") + tx, (8,), tg, tb, 1e-5)
        theirs = torch.autograd.grad((ty * torch.tensor(R)).sum(), [tx, tw, tg, tb])
        for a, t in zip(ours, theirs):
            np.testing.assert_allclose(a, t.numpy(), rtol=1e-9, atol=1e-11)

    def test_cross_entropy(self, rng):
        torch = pytest.importorskip("torch")
        z0 = rng.normal(size=(3, 4, 9))
        t = rng.integers(0, 9, size=(3, 4))
        with T.default_dtype(np.float64):
            z = T.parameter(z0)
            loss = T.cross_entropy(z, t, ignore_index=0, label_smoothing=0.1)
            (g,) = T.grad(loss, [z])
        tz = torch.tensor(z0, requires_grad=True)
        tl = torch.nn.functional.cross_entropy(tz.reshape(-1, 9), torch.tensor(t).reshape(-1),
                                               ignore_index=0, label_smoothing=0.1)
        (tg,) = torch.autograd.grad(tl, [tz])
        assert loss.item() == pytest.approx(tl.item(), rel=1e-12)
        np.testing.assert_allclose(g, tg.numpy(), rtol=1e-9, atol=1e-12)
