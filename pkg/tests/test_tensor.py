import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmoe import tensor as T
from xmoe.tensor import (
    ContractError,
    DimensionError,
    DomainError,
    Tape,
    Tensor,
    backward,
    finite_diff_check,
)


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(eye, a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_projection():
    p = Tensor([[1.0, 0.0], [0.0, 0.0]])
    v = Tensor([[5.0], [7.0]])
    out = T.matmul(p, v)
    np.testing.assert_array_equal(out.data, [[5.0], [0.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_vs_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 3)))
    err = finite_diff_check(lambda: T.matmul(a, b).sum(), [a])
    assert err <= 1e-6


def test_elementwise_anchor_values():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.exp(Tensor(0.0)).item() == 1.0
    assert T.log(Tensor(1.0)).item() == 0.0
    assert T.tanh(Tensor(0.0)).item() == 0.0


def test_sigmoid_grad_vs_finite_differences():
    x = Tensor(0.3, requires_grad=True)
    err = finite_diff_check(lambda: T.sigmoid(x), [x])
    assert err <= 1e-6


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.log(Tensor(-2.0))


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_broadcast_trailing_and_column():
    m = Tensor(np.arange(6.0).reshape(2, 3))
    v = Tensor([1.0, 2.0, 3.0])
    col = Tensor([[10.0], [20.0]])
    np.testing.assert_array_equal(T.add(m, v).data, m.data + v.data)
    np.testing.assert_array_equal(T.mul(m, col).data, m.data * col.data)


def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [0.25, 0.25, 0.25, 0.25])


def test_softmax_extreme_logits_no_overflow():
    out = T.softmax(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == pytest.approx(1.0)
    assert out.data[1] == pytest.approx(0.0, abs=1e-300)


@settings(max_examples=100)
@given(st.lists(st.floats(-50.0, 50.0), min_size=8, max_size=8))
def test_softmax_simplex_property(logits):
    out = T.softmax(Tensor(logits))
    assert np.all(out.data >= 0.0)
    assert abs(out.data.sum() - 1.0) <= 1e-12


def test_softmax_grad_vs_finite_differences():
    rng = np.random.default_rng(1)
    z = Tensor(rng.standard_normal(5), requires_grad=True)
    w = rng.standard_normal(5)
    err = finite_diff_check(lambda: T.mul(T.softmax(z), Tensor(w)).sum(), [z])
    assert err <= 1e-6


def test_logsumexp_matches_direct():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((4, 6))
    out = T.logsumexp(Tensor(z), axis=1)
    np.testing.assert_allclose(out.data, np.log(np.exp(z).sum(axis=1)), rtol=1e-12)
    zt = Tensor(z, requires_grad=True)
    err = finite_diff_check(lambda: T.logsumexp(zt, axis=1).sum(), [zt])
    assert err <= 1e-6


def test_reduce_anchors():
    assert T.tsum(Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert T.tmean(Tensor(np.ones((2, 2)))).item() == 1.0
    out = T.tmean(Tensor([[1.0, 3.0], [5.0, 7.0]]), axis=0)
    np.testing.assert_array_equal(out.data, [3.0, 5.0])


def test_reduce_invalid_axis():
    with pytest.raises(DimensionError):
        T.tsum(Tensor(np.ones(3)), axis=2)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape():
        backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_analytic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        backward(T.mul(x, x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates_without_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = T.mul(x, x).sum()
        backward(loss)
        backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_backward_non_scalar_root_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = T.mul(x, x)
        with pytest.raises(ContractError):
            backward(y)


def test_backward_untracked_root_rejected():
    x = Tensor(3.0, requires_grad=True)
    with pytest.raises(ContractError):
        backward(x)


def test_finite_diff_check_square():
    x = Tensor(3.0, requires_grad=True)
    err = finite_diff_check(lambda: T.square(x), [x])
    assert err <= 1e-8


def test_finite_diff_check_sigmoid_at_zero():
    x = Tensor(0.0, requires_grad=True)
    err = finite_diff_check(lambda: T.sigmoid(x), [x])
    assert err <= 1e-8


def test_finite_diff_check_epsilon_contract():
    x = Tensor(1.0, requires_grad=True)
    with pytest.raises(ContractError):
        finite_diff_check(lambda: T.square(x), [x], epsilon=1e-2)


def test_indexing_ops_grads():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))

    def f():
        sub = T.take(x, [0, 2, 2])
        return T.mul(sub, Tensor(w)).sum()

    assert finite_diff_check(f, [x]) <= 1e-6

    def g():
        vals = T.take_elems(x, [0, 1, 4], [3, 0, 2])
        return T.square(vals).sum()

    assert finite_diff_check(g, [x]) <= 1e-6

    def h():
        spread = T.scatter(T.take(x, [1, 3]), [4, 0], 6)
        return T.square(spread).sum()

    assert finite_diff_check(h, [x]) <= 1e-6


def test_stack_concat_row_grads():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)

    def f():
        rows = [T.row(x, i) for i in range(4)]
        re = T.stack(rows[::-1])
        return T.square(re).sum()

    assert finite_diff_check(f, [x]) <= 1e-6

    y = Tensor(rng.standard_normal((2, 3)), requires_grad=True)

    def g():
        joined = T.concat([x, y], axis=0)
        return T.mul(joined, joined).sum()

    assert finite_diff_check(g, [x, y]) <= 1e-6


def test_maximum_outer_transpose_grads():
    rng = np.random.default_rng(5)
    u = Tensor(rng.standard_normal(4), requires_grad=True)
    v = Tensor(rng.standard_normal(3), requires_grad=True)

    def f():
        return T.maximum(T.outer(u, v), 0.1).sum()

    assert finite_diff_check(f, [u, v]) <= 1e-6

    m = Tensor(rng.standard_normal((3, 4)), requires_grad=True)

    def g():
        return T.mul(T.transpose(m), Tensor(rng_fixed)).sum()

    rng_fixed = rng.standard_normal((4, 3))
    assert finite_diff_check(g, [m]) <= 1e-6


def test_no_recording_without_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(x, x)
    assert y._tape is None


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        a = Tensor(rng.standard_normal((8, 8)))
        b = Tensor(rng.standard_normal((8, 8)))
        return T.softmax(T.matmul(a, b), axis=1).data

    first, second = run(), run()
    assert np.array_equal(first, second)


def test_independent_tapes_in_parallel_threads():
    import threading

    rng = np.random.default_rng(6)
    shared = Tensor(rng.standard_normal((4, 4)))  # read-only across threads
    results = {}

    def worker(idx):
        x = Tensor(np.full(4, float(idx + 1)), requires_grad=True)
        with Tape():
            backward(T.mul(T.matmul(x, shared), T.matmul(x, shared)).sum())
        results[idx] = x.grad.copy()

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for idx, grad in results.items():
        x = Tensor(np.full(4, float(idx + 1)), requires_grad=True)
        with Tape():
            backward(T.mul(T.matmul(x, shared), T.matmul(x, shared)).sum())
        np.testing.assert_array_equal(grad, x.grad)
