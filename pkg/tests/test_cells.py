import math

import numpy as np
import pytest

from xmoe import cells
from xmoe import tensor as T
from xmoe.tensor import Tape, Tensor, backward, finite_diff_check


def zeroed_slstm(d=4, heads=2, forget_act="sigmoid"):
    params = cells.init_slstm(d, heads, np.random.default_rng(0), forget_act)
    for t in params.tensors().values():
        t.data[...] = 0.0
    return params


def test_slstm_zero_params_zero_output():
    d = 4
    params = zeroed_slstm(d)
    x = Tensor(np.random.default_rng(1).standard_normal(d))
    h, state = cells.slstm_step(params, x, cells.init_slstm_state(d))
    np.testing.assert_array_equal(h.data, np.zeros(d))
    assert np.all(state.n.data > 0)


def test_slstm_forget_off_writes_candidate():
    # forget pre-activation -> -inf, input gate exp(0) = 1: c = tanh(Wz x), n = 1
    d = 4
    rng = np.random.default_rng(2)
    params = zeroed_slstm(d)
    params.wz.data[...] = rng.standard_normal((d, d))
    params.bf.data[...] = -1e9
    x = Tensor(rng.standard_normal(d))
    h, state = cells.slstm_step(params, x, cells.init_slstm_state(d))
    expected_c = np.tanh(x.data @ params.wz.data)
    np.testing.assert_allclose(state.c.data, expected_c, rtol=0, atol=1e-12)
    np.testing.assert_allclose(state.n.data, np.ones(d), rtol=0, atol=1e-12)
    np.testing.assert_allclose(state.c.data / state.n.data, expected_c, atol=1e-12)


@pytest.mark.parametrize("kappa", [-20.0, -3.0, 0.5, 7.0, 20.0])
def test_slstm_stabilizer_shift_invariance(kappa):
    # With the exponential forget gate, shifting both gate pre-activations by a
    # constant scales c and n identically, so the m-shift cancels out of h.
    d = 6
    rng = np.random.default_rng(3)
    params = cells.init_slstm(d, 2, rng, forget_act="exp")
    state = cells.init_slstm_state(d)
    state.c.data[...] = rng.standard_normal(d)
    state.n.data[...] = np.abs(rng.standard_normal(d)) + 0.5
    x = Tensor(rng.standard_normal(d))
    h_ref, _ = cells.slstm_step(params, x, state)
    params.bi.data += kappa
    params.bf.data += kappa
    h_shift, _ = cells.slstm_step(params, x, state)
    rel = np.abs(h_shift.data - h_ref.data) / np.maximum(np.abs(h_ref.data), 1e-12)
    assert rel.max() <= 1e-10


def test_slstm_stabilizer_monotone_under_nonnegative_forget():
    # with the exponential forget gate and forget pre-activation >= 0,
    # log f >= 0 so m_t = max(log f + m_{t-1}, log i) never decreases
    d = 4
    rng = np.random.default_rng(19)
    params = cells.init_slstm(d, 2, rng, forget_act="exp")
    params.wf.data[...] = 0.0
    params.bf.data[...] = np.abs(rng.standard_normal(d))
    state = cells.init_slstm_state(d)
    prev_m = state.m.data.copy()
    for _ in range(6):
        _, state = cells.slstm_step(params, Tensor(rng.standard_normal(d)), state)
        assert np.all(state.m.data >= prev_m - 1e-15)
        assert np.all(np.isfinite(state.m.data))
        prev_m = state.m.data.copy()


def test_slstm_normalizer_positive_and_bounded_output():
    d = 8
    rng = np.random.default_rng(4)
    params = cells.init_slstm(d, 2, rng)
    state = cells.init_slstm_state(d)
    for _ in range(5):
        x = Tensor(rng.uniform(-10, 10, d))
        h, state = cells.slstm_step(params, x, state)
        assert np.all(state.n.data > 0)
        assert np.all(np.abs(h.data) <= np.abs(state.c.data / state.n.data) + 1e-15)
        assert np.all(np.isfinite(h.data))


def test_slstm_block_diagonal_recurrence():
    d, heads = 6, 3
    rng = np.random.default_rng(5)
    params = cells.init_slstm(d, heads, rng)
    mask = cells.head_block_mask(d, heads)
    for name in ("ri", "rf", "rz", "ro"):
        assert np.all(getattr(params, name).data[mask == 0] == 0.0)
    # gradient never reaches masked-out entries
    xs = Tensor(rng.standard_normal((3, d)))
    with Tape():
        ys, _ = cells.slstm_sequence(params, xs)
        backward(ys.sum())
    assert np.all(params.ri.grad[mask == 0] == 0.0)
    assert np.any(params.ri.grad[mask == 1] != 0.0)


def test_slstm_step_gradients():
    d = 5
    rng = np.random.default_rng(6)
    params = cells.init_slstm(d, 1, rng)
    x = Tensor(rng.standard_normal(d), requires_grad=True)
    probe = rng.standard_normal(d)
    leaves = [x] + list(params.tensors().values())

    def f():
        h, _ = cells.slstm_step(params, x, cells.init_slstm_state(d))
        return T.mul(h, Tensor(probe)).sum()

    assert finite_diff_check(f, leaves) <= 1e-6


def test_mlstm_exact_recall_single_association():
    # f = i = 1, identity-scale store: C = v k^T, n^T q = 1, read-out equals v
    state = cells.init_mlstm_state(2)
    q = Tensor([1.0, 0.0])
    k = Tensor([1.0, 0.0])
    v = Tensor([2.0, 3.0])
    zero = Tensor(0.0)
    h, state = cells.mlstm_recurrence(q, k, v, zero, zero, state)
    np.testing.assert_array_equal(state.C.data, np.outer([2.0, 3.0], [1.0, 0.0]))
    assert float(state.n.data @ q.data) == 1.0
    np.testing.assert_allclose(h.data, [2.0, 3.0], atol=1e-15)


def test_mlstm_orthonormal_keys_exact_recall():
    d, r = 8, 5
    rng = np.random.default_rng(7)
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    keys = basis[:, :r].T
    values = rng.standard_normal((r, d))
    state = cells.init_mlstm_state(d)
    zero = Tensor(0.0)
    for j in range(r):
        _, state = cells.mlstm_recurrence(
            Tensor(keys[j]), Tensor(keys[j]), Tensor(values[j]), zero, zero, state
        )
    # query steps with f = 1 and i = exp(-1e9) = 0 read without writing
    for j in range(r):
        h, queried = cells.mlstm_recurrence(
            Tensor(keys[j]), Tensor(keys[j]), Tensor(values[j]),
            Tensor(-1e9), zero, state,
        )
        np.testing.assert_array_equal(queried.C.data, state.C.data)
        np.testing.assert_allclose(h.data, values[j], atol=1e-10)


def test_mlstm_zero_value_projection_zero_readout():
    d = 4
    rng = np.random.default_rng(8)
    params = cells.init_mlstm(d, rng)
    params.wv.data[...] = 0.0
    state = cells.init_mlstm_state(d)
    for _ in range(3):
        h, state = cells.mlstm_step(params, Tensor(rng.standard_normal(d)), state)
    np.testing.assert_array_equal(state.C.data @ np.ones(d), np.zeros(d))
    np.testing.assert_array_equal(h.data, np.zeros(d))


def test_mlstm_step_gradients():
    d = 4
    rng = np.random.default_rng(9)
    params = cells.init_mlstm(d, rng)
    x = Tensor(rng.standard_normal(d), requires_grad=True)
    probe = rng.standard_normal(d)
    leaves = [x] + list(params.tensors().values())

    def f():
        h, _ = cells.mlstm_step(params, x, cells.init_mlstm_state(d))
        return T.mul(h, Tensor(probe)).sum()

    assert finite_diff_check(f, leaves) <= 1e-6


def test_mlstm_finite_readout_for_finite_inputs():
    d = 8
    rng = np.random.default_rng(10)
    params = cells.init_mlstm(d, rng)
    state = cells.init_mlstm_state(d)
    for _ in range(10):
        h, state = cells.mlstm_step(params, Tensor(rng.uniform(-10, 10, d)), state)
        assert np.all(np.isfinite(h.data))


def test_ffn_zero_weights_zero_output():
    d = 4
    params = cells.init_ffn(d, np.random.default_rng(11))
    for t in params.tensors().values():
        t.data[...] = 0.0
    out = cells.ffn_forward(params, Tensor(np.ones(d)))
    np.testing.assert_array_equal(out.data, np.zeros(d))


def test_ffn_hand_computed_value():
    # identity-like first layer on x = [1, -1]: hidden = silu([1, -1, 0, ...]),
    # second layer sums the first two hidden units into each output.
    d = 2
    params = cells.init_ffn(d, np.random.default_rng(12))
    params.w1.data[...] = 0.0
    params.w1.data[0, 0] = 1.0
    params.w1.data[1, 1] = 1.0
    params.b1.data[...] = 0.0
    params.w2.data[...] = 0.0
    params.w2.data[0, :] = 1.0
    params.w2.data[1, :] = 1.0
    params.b2.data[...] = 0.0
    x = Tensor([1.0, -1.0])
    out = cells.ffn_forward(params, x)
    silu = lambda v: v / (1.0 + math.exp(-v))
    expected = silu(1.0) + silu(-1.0)
    np.testing.assert_allclose(out.data, [expected, expected], atol=1e-15)


def test_ffn_gradients():
    d = 3
    rng = np.random.default_rng(13)
    params = cells.init_ffn(d, rng)
    x = Tensor(rng.standard_normal(d), requires_grad=True)
    probe = rng.standard_normal(d)
    leaves = [x] + list(params.tensors().values())

    def f():
        return T.mul(cells.ffn_forward(params, x), Tensor(probe)).sum()

    assert finite_diff_check(f, leaves) <= 1e-6


@pytest.mark.parametrize("kind", ["slstm", "mlstm"])
def test_sequence_single_step_matches_step(kind):
    d = 5
    rng = np.random.default_rng(14)
    params = cells.init_cell_params(kind, d, 1, rng)
    x = rng.standard_normal(d)
    ys, _ = cells.sequence_forward(kind, params, Tensor(x.reshape(1, d)))
    h, _ = cells.cell_step(kind, params, Tensor(x), cells.init_cell_state(kind, d))
    np.testing.assert_allclose(ys.data[0], h.data, atol=1e-12)


@pytest.mark.parametrize("kind", ["slstm", "mlstm"])
def test_sequence_causality(kind):
    d, steps, tpos = 4, 6, 3
    rng = np.random.default_rng(15)
    params = cells.init_cell_params(kind, d, 2, rng)
    xs = rng.standard_normal((steps, d))
    ys_ref, _ = cells.sequence_forward(kind, params, Tensor(xs))
    perturbed = xs.copy()
    perturbed[tpos] += rng.standard_normal(d)
    ys_new, _ = cells.sequence_forward(kind, params, Tensor(perturbed))
    np.testing.assert_array_equal(ys_new.data[:tpos], ys_ref.data[:tpos])
    assert np.any(ys_new.data[tpos:] != ys_ref.data[tpos:])


@pytest.mark.parametrize("kind", ["slstm", "mlstm"])
def test_sequence_causality_by_autodiff(kind):
    d, steps = 3, 4
    rng = np.random.default_rng(16)
    params = cells.init_cell_params(kind, d, 1, rng)
    xs = Tensor(rng.standard_normal((steps, d)), requires_grad=True)
    t = 1
    with Tape():
        ys, _ = cells.sequence_forward(kind, params, xs)
        backward(T.row(ys, t).sum())
    assert np.all(xs.grad[t + 1 :] == 0.0)
    assert np.any(xs.grad[: t + 1] != 0.0)


@pytest.mark.parametrize("kind", ["slstm", "mlstm"])
def test_sequence_state_size_independent_of_length(kind):
    d = 4
    rng = np.random.default_rng(17)
    params = cells.init_cell_params(kind, d, 2, rng)

    def state_floats(steps):
        xs = Tensor(rng.standard_normal((steps, d)))
        _, state = cells.sequence_forward(kind, params, xs)
        return sum(getattr(state, f).data.size for f in vars(state))

    assert state_floats(3) == state_floats(31)


def test_sequence_gradients_multi_step():
    d, steps = 4, 3
    rng = np.random.default_rng(18)
    for kind in ("slstm", "mlstm"):
        params = cells.init_cell_params(kind, d, 2, rng)
        xs = Tensor(rng.standard_normal((steps, d)), requires_grad=True)
        probe = rng.standard_normal((steps, d))
        leaves = [xs] + list(params.tensors().values())

        def f():
            ys, _ = cells.sequence_forward(kind, params, xs)
            return T.mul(ys, Tensor(probe)).sum()

        assert finite_diff_check(f, leaves) <= 1e-5
