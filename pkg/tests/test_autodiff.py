import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairnewsrec import autodiff as ad
from fairnewsrec.autodiff import Tensor
from fairnewsrec.optim import AdamState, adam_apply, clip_by_global_norm


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def weighted_sum(t: Tensor, rng_seed: int = 99) -> Tensor:
    """Scalar probe with O(1) gradients everywhere."""
    w = np.random.default_rng(rng_seed).normal(size=t.shape)
    return (t * ad.constant(w)).sum()


class TestForwardValues:
    def test_softmax_uniform(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_array_equal(out.data, np.full(3, 1 / 3))

    def test_sigmoid_zero(self):
        assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        s = ad.sigmoid(Tensor([-800.0, 800.0])).data
        assert np.all(np.isfinite(s))
        assert s[0] == 0.0 and s[1] == 1.0

    def test_cosine_orthogonal(self):
        assert ad.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).data == 0.0

    def test_cosine_degenerate_is_zero(self):
        out = ad.cosine_similarity(Tensor([[0.0, 0.0], [1.0, 1.0]]), Tensor([[1.0, 2.0], [1.0, 1.0]]))
        assert out.data[0] == 0.0
        assert out.data[1] == pytest.approx(1.0, abs=1e-15)

    def test_cross_entropy_matches_definition(self):
        logits = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]])
        y = np.array([2, 0])
        p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        expected = -np.log(p[[0, 1], y]).mean()
        assert ad.cross_entropy(Tensor(logits), y).item() == pytest.approx(expected, abs=1e-14)

    def test_cross_entropy_large_logits_stable(self):
        v = ad.cross_entropy(Tensor([[1000.0, 0.0]]), [1]).item()
        assert v == pytest.approx(1000.0)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
    def test_softmax_sums_to_one(self, xs):
        s = ad.softmax(Tensor(xs)).data
        assert abs(s.sum() - 1.0) < 1e-12
        assert np.all(s >= 0) and np.all(s <= 1)

    def test_softmax_entries_strictly_inside(self):
        s = ad.softmax(Tensor(np.random.default_rng(0).normal(size=(5, 7)))).data
        assert np.all((s > 0) & (s < 1))
        np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)

    def test_embedding_padding_row_is_zero(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        out = ad.embedding_lookup(table, np.array([[0, 2], [2, 0]]), padding_idx=0)
        np.testing.assert_array_equal(out.data[0, 0], 0.0)
        np.testing.assert_array_equal(out.data[0, 1], [6.0, 7.0, 8.0])
        ad.backward(out.sum(), [table])
        np.testing.assert_array_equal(table.grad[0], 0.0)
        np.testing.assert_array_equal(table.grad[2], 2.0)


class TestErrors:
    def test_matmul_shape_error_names_operator(self):
        with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_add_shape_error(self):
        with pytest.raises(ad.ShapeError, match="add"):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_cosine_shape_error(self):
        with pytest.raises(ad.ShapeError, match="cosine_similarity"):
            ad.cosine_similarity(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            ad.embedding_lookup(Tensor(np.ones((3, 2))), np.array([0, 3]))

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ad.GraphError):
            ad.backward(x * 2.0)

    def test_finite_difference_rejects_nonfinite(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ad.NumericError):
            ad.finite_difference_check(lambda: (x * ad.constant(np.array([np.inf]))).sum(), x)


class TestBackward:
    def test_quadratic(self):
        x = Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
        g = ad.backward((x * x).sum(), [x])[x]
        np.testing.assert_array_equal(g, 2 * x.data)

    def test_constant_cosine_has_zero_gradient(self):
        a = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
        g = ad.backward(ad.cosine_similarity(a, a), [a])[a]
        np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_unused_leaf_gets_zeros(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = Tensor(np.ones((3, 3)), requires_grad=True)
        grads = ad.backward((x * 3.0).sum(), [x, y])
        np.testing.assert_array_equal(grads[y], np.zeros((3, 3)))

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        g = ad.backward((y + y * 3.0).sum(), [x])[x]
        np.testing.assert_allclose(g, [16.0])

    def test_linearity_over_independent_subgraphs(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        f = lambda: ad.tanh(a @ ad.constant(np.ones((4, 2)))).sum()
        g = lambda: ad.sigmoid(b).mean()
        ga = ad.backward(f(), [a])[a].copy()
        gb = ad.backward(g(), [b])[b].copy()
        both = ad.backward(f() + g(), [a, b])
        np.testing.assert_allclose(both[a], ga, atol=1e-15)
        np.testing.assert_allclose(both[b], gb, atol=1e-15)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with ad.no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad and y.is_leaf

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            a, b = leaf(rng, 4, 6), leaf(rng, 6, 3)
            out = ad.softmax(ad.relu(a @ b)).sum(axis=0)
            root = weighted_sum(out)
            grads = ad.backward(root, [a, b])
            return root.data.tobytes(), grads[a].tobytes(), grads[b].tobytes()

        assert run() == run()


def _random_op_case(rng: np.random.Generator, kind: str):
    """A (fn, leaves) pair exercising operator ``kind`` on random small shapes."""
    n, m, k = (int(x) for x in rng.integers(1, 5, size=3))
    if kind == "matmul":
        bdim = int(rng.integers(1, 3))
        a, b = leaf(rng, bdim, n, k), leaf(rng, k, m)
        c = leaf(rng, bdim, k, m)  # batched right operand
        return lambda: weighted_sum(ad.matmul(a, b)) + weighted_sum(ad.matmul(a, c), 98), [a, b, c]
    if kind == "add":
        a, b = leaf(rng, n, m), leaf(rng, m)
        return lambda: weighted_sum(ad.add(a, b)), [a, b]
    if kind == "scale":
        a = leaf(rng, n, m)
        c = float(rng.normal())
        return lambda: weighted_sum(ad.scale(a, c)), [a]
    if kind == "embedding_lookup":
        table = leaf(rng, 5, m)
        idx = rng.integers(0, 5, size=(n, k))
        return lambda: weighted_sum(ad.embedding_lookup(table, idx, padding_idx=0)), [table]
    if kind == "softmax":
        a = leaf(rng, n, m + 1)
        return lambda: weighted_sum(ad.softmax(a, axis=-1)), [a]
    if kind == "sigmoid":
        a = leaf(rng, n, m, scale=2.0)
        return lambda: weighted_sum(ad.sigmoid(a)), [a]
    if kind == "relu":
        a = leaf(rng, n, m)
        a.data[np.abs(a.data) < 1e-3] = 0.5  # keep clear of the kink
        return lambda: weighted_sum(ad.relu(a)), [a]
    if kind == "concat":
        a, b = leaf(rng, n, m), leaf(rng, k, m)
        return lambda: weighted_sum(ad.concat([a, b], axis=0)), [a, b]
    if kind == "transpose":
        a = leaf(rng, n, m, k)
        return lambda: weighted_sum(ad.transpose(a, (2, 0, 1))), [a]
    if kind == "reduce_mean":
        a = leaf(rng, n, m, k)
        return lambda: weighted_sum(ad.reduce_mean(a, axis=1)), [a]
    if kind == "cosine_similarity":
        a, b = leaf(rng, n, m + 1), leaf(rng, n, m + 1)
        return lambda: weighted_sum(ad.cosine_similarity(a, b)), [a, b]
    if kind == "cross_entropy":
        a = leaf(rng, n, m + 1)
        y = rng.integers(0, m + 1, size=n)
        return lambda: ad.cross_entropy(a, y), [a]
    raise KeyError(kind)


@pytest.mark.parametrize("kind", ad.OPERATORS)
def test_operator_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    worst = 0.0
    for _ in range(100):
        fn, leaves = _random_op_case(rng, kind)
        for x in leaves:
            worst = max(worst, ad.finite_difference_check(fn, x, 1e-5))
    assert worst < 1e-4


@pytest.mark.parametrize("op", ["tanh", "abs", "mul", "reshape", "reduce_sum"])
def test_auxiliary_operator_gradients(op):
    rng = np.random.default_rng(7)
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    fns = {
        "tanh": lambda: weighted_sum(ad.tanh(a)),
        "abs": lambda: weighted_sum(ad.absolute(a)),
        "mul": lambda: weighted_sum(ad.mul(a, b)),
        "reshape": lambda: weighted_sum(ad.reshape(a, (2, 6))),
        "reduce_sum": lambda: weighted_sum(ad.reduce_sum(a, axis=0)),
    }
    assert ad.finite_difference_check(fns[op], a, 1e-5) < 1e-4


def test_three_layer_composition():
    rng = np.random.default_rng(11)
    x = ad.constant(rng.normal(size=(5, 4)))
    w1, w2, w3 = leaf(rng, 4, 6), leaf(rng, 6, 6), leaf(rng, 6, 3)
    fn = lambda: ad.cross_entropy(ad.tanh(ad.sigmoid(x @ w1) @ w2) @ w3, [0, 1, 2, 0, 1])
    for w in (w1, w2, w3):
        assert ad.finite_difference_check(fn, w, 1e-5) < 1e-4


class TestFiniteDifferenceCheck:
    def test_linear_is_exact(self):
        x = Tensor(np.array([0.3, -0.7, 1.1]), requires_grad=True)
        w = ad.constant(np.array([2.0, -1.0, 0.5]))
        assert ad.finite_difference_check(lambda: (x * w).sum(), x, 1e-3) < 1e-10

    def test_sigmoid_composition(self):
        x = Tensor(np.array([0.2, -1.5, 0.9]), requires_grad=True)
        err = ad.finite_difference_check(lambda: weighted_sum(ad.sigmoid(ad.sigmoid(x) * 3.0)), x, 1e-5)
        assert err < 1e-4

    def test_detects_corrupted_backward_rule(self, monkeypatch):
        def bad_sigmoid(a):
            s = 1.0 / (1.0 + np.exp(-a.data))
            return ad._make(s, (a,), lambda g: (g * s,), "sigmoid")  # missing (1 - s)

        x = Tensor(np.array([0.2, -1.5, 0.9]), requires_grad=True)
        err = ad.finite_difference_check(lambda: weighted_sum(bad_sigmoid(x)), x, 1e-5)
        assert err > 1e-2


class TestAdam:
    def test_first_step_closed_form(self):
        state = AdamState(lr=1e-4)
        params = {"t": np.array([1.0])}
        adam_apply(state, params, {"t": np.array([0.5])})
        assert params["t"][0] == pytest.approx(1.0 - 1e-4, abs=1e-11)
        assert state.step == 1

    def test_zero_gradient_from_fresh_state_is_noop(self):
        params = {"t": np.array([1.0, 2.0])}
        adam_apply(AdamState(lr=1e-2), params, {"t": np.zeros(2)})
        np.testing.assert_array_equal(params["t"], [1.0, 2.0])

    def test_zero_gradient_decays_moments(self):
        state = AdamState(lr=1e-2)
        params = {"t": np.array([1.0, 2.0])}
        adam_apply(state, params, {"t": np.array([1.0, -1.0])})
        m_before = np.abs(state.m["t"]).copy()
        adam_apply(state, params, {"t": np.zeros(2)})
        assert np.all(np.abs(state.m["t"]) < m_before)

    def test_quadratic_descent_matches_scalar_recurrence(self):
        state = AdamState(lr=0.01)
        params = {"t": np.array([1.0])}
        m = v = 0.0
        theta = 1.0
        for t in range(1, 101):
            adam_apply(state, params, {"t": 2 * params["t"]})
            g = 2 * theta
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert params["t"][0] == pytest.approx(theta, abs=1e-12)
        assert abs(params["t"][0]) < 1.0

    def test_step_counter_increments(self):
        state = AdamState()
        params = {"a": np.zeros(2)}
        for i in range(3):
            adam_apply(state, params, {"a": np.ones(2)})
            assert state.step == i + 1
        assert state.m["a"].shape == params["a"].shape

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            adam_apply(AdamState(), {"a": np.zeros(2)}, {"a": np.zeros(3)})

    def test_does_not_mutate_old_arrays(self):
        old = np.ones(2)
        params = {"a": old}
        adam_apply(AdamState(lr=0.1), params, {"a": np.ones(2)})
        np.testing.assert_array_equal(old, 1.0)


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == 5.0
    assert clipped["a"][0] == pytest.approx(0.6)
    same, _ = clip_by_global_norm(grads, 10.0)
    assert same["b"][0] == 4.0
