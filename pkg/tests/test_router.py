import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmoe import router
from xmoe import tensor as T
from xmoe.tensor import ContractError, Tensor, finite_diff_check


def make_params(d=6, e=4, gamma=1.0, rng=None):
    rng = rng or np.random.default_rng(0)
    return router.init_router(d, e, gamma, rng)


def test_difficulty_score_anchors():
    params = make_params(d=2)
    params.diff_w.data[...] = 0.0
    params.diff_b.data[...] = 0.0
    h = Tensor([1.3, -0.4])
    assert router.difficulty_score(params, h).item() == 0.5

    params.diff_b.data[...] = -30.0
    assert router.difficulty_score(params, h).item() < 1e-12

    params.diff_w.data[...] = [1.0, 0.0]
    params.diff_b.data[...] = 0.0
    h = Tensor([math.log(3.0), 5.0])
    assert router.difficulty_score(params, h).item() == pytest.approx(0.75, abs=1e-12)


def test_modulation_bias_anchors():
    params = make_params(d=2, e=4, gamma=2.0)
    np.testing.assert_array_equal(
        router.modulation_bias(Tensor(0.0), params).data, np.zeros(4)
    )
    np.testing.assert_array_equal(
        router.modulation_bias(Tensor(0.5), params).data, [1.0, 1.0, -1.0, -1.0]
    )
    zero_gamma = make_params(d=2, e=4, gamma=0.0)
    np.testing.assert_array_equal(
        router.modulation_bias(Tensor(0.9), zero_gamma).data, np.zeros(4)
    )


def test_gamma_must_be_nonnegative():
    with pytest.raises(ContractError):
        make_params(gamma=-0.5)


def test_route_uniform_when_unbiased_and_zero_weights():
    params = make_params(d=3, e=4, gamma=0.0)
    for t in params.tensors().values():
        t.data[...] = 0.0
    dec = router.route(params, Tensor([0.2, -1.0, 0.7]), k=2)
    np.testing.assert_array_equal(dec.probs.data, np.full(4, 0.25))
    assert dec.normalized_entropy == pytest.approx(1.0, abs=1e-12)
    assert [i for i, _ in dec.topk] == [0, 1]


def test_route_k_equals_e_selects_all():
    params = make_params(d=3, e=4)
    dec = router.route(params, Tensor(np.random.default_rng(1).standard_normal(3)), k=4)
    assert sorted(i for i, _ in dec.topk) == [0, 1, 2, 3]
    for i, w in dec.topk:
        assert w == pytest.approx(float(dec.probs.data[i]))


def test_route_biased_hand_value():
    # zero gate weights, gamma=1, d=0.5: z = [.5,.5,-.5,-.5]
    params = make_params(d=2, e=4, gamma=1.0)
    for name in ("gate_w", "gate_b", "diff_w"):
        getattr(params, name).data[...] = 0.0
    params.diff_b.data[...] = 0.0  # sigmoid(0) = 0.5
    dec = router.route(params, Tensor([0.3, 0.3]), k=2)
    expected = np.exp([0.5, 0.5, -0.5, -0.5])
    expected /= expected.sum()
    np.testing.assert_allclose(dec.probs.data, expected, atol=1e-12)
    np.testing.assert_allclose(
        dec.probs.data, [0.3655, 0.3655, 0.1345, 0.1345], atol=5e-5
    )


def test_route_k_out_of_range():
    params = make_params(e=4)
    with pytest.raises(ContractError):
        router.route(params, Tensor(np.zeros(6)), k=5)
    with pytest.raises(ContractError):
        router.route(params, Tensor(np.zeros(6)), k=0)


def test_normalized_entropy_anchors():
    assert router.normalized_entropy(np.full(8, 0.125)) == pytest.approx(1.0, abs=1e-12)
    assert router.normalized_entropy(np.array([1.0, 0.0, 0.0])) == 0.0
    assert router.normalized_entropy(np.array([0.5, 0.5, 0.0, 0.0])) == pytest.approx(
        0.5, abs=1e-12
    )
    with pytest.raises(ContractError):
        router.normalized_entropy(np.array([1.0]))


def test_group_mass_anchors():
    p_m, p_s = router.group_mass(np.full(8, 0.125))
    assert (p_m, p_s) == (0.5, 0.5)
    p_m, p_s = router.group_mass(np.array([1.0, 0.0, 0.0, 0.0]))
    assert (p_m, p_s) == (1.0, 0.0)
    p_m, p_s = router.group_mass(np.array([0.4, 0.1, 0.3, 0.2]))
    assert p_m == pytest.approx(0.5) and p_s == pytest.approx(0.5)


def test_group_mass_tensor_matches_numpy():
    rng = np.random.default_rng(2)
    p = rng.dirichlet(np.ones(6))
    tm, ts = router.group_mass(Tensor(p))
    nm, ns = router.group_mass(p)
    assert tm.item() == pytest.approx(nm, abs=1e-15)
    assert ts.item() == pytest.approx(ns, abs=1e-15)


def _decision_from_logits(raw, gamma, d, k=1):
    return router.decision_from_components(raw, gamma, d, k=k)


def test_decision_from_components_matches_route():
    # identity gate weights and a difficulty-head bias that pins d reproduce
    # the same decision through the full route() path
    e, d_val = 4, 0.31
    params = make_params(d=e, e=e, gamma=1.7)
    params.gate_w.data[...] = np.eye(e)
    params.gate_b.data[...] = 0.0
    params.diff_w.data[...] = 0.0
    params.diff_b.data[...] = math.log(d_val / (1.0 - d_val))
    h = np.array([0.4, -0.2, 1.1, 0.0])
    via_route = router.route(params, Tensor(h), k=2)
    direct = router.decision_from_components(
        h, 1.7, via_route.difficulty.item(), k=2
    )
    np.testing.assert_allclose(direct.probs.data, via_route.probs.data, atol=1e-15)
    assert direct.topk == via_route.topk


def test_routing_ratio_zero_difficulty_equals_correction():
    dec = _decision_from_logits([0.3, -0.2, 0.9, 0.1], gamma=1.5, d=0.0)
    exact, predicted, correction = router.routing_ratio(dec)
    assert predicted == pytest.approx(1.0, abs=1e-12)
    assert exact == pytest.approx(correction, rel=1e-12)


def test_routing_ratio_balanced_logits_pure_exponential():
    dec = _decision_from_logits([0.7, -0.1, 0.7, -0.1], gamma=1.0, d=0.5)
    exact, predicted, correction = router.routing_ratio(dec)
    assert correction == pytest.approx(1.0, rel=1e-12)
    assert exact == pytest.approx(math.e, rel=1e-9)
    assert predicted == pytest.approx(math.e, rel=1e-9)


def test_routing_ratio_identity_random_case():
    dec = _decision_from_logits([1.2, -0.7, 0.4, 2.1], gamma=1.5, d=0.7)
    exact, predicted, correction = router.routing_ratio(dec)
    assert exact / (predicted * correction) == pytest.approx(1.0, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-8.0, 8.0), min_size=4, max_size=4),
    st.floats(0.0, 4.0),
    st.floats(0.001, 0.999),
)
def test_ratio_identity_property(raw, gamma, d):
    dec = _decision_from_logits(raw, gamma=gamma, d=d)
    exact, predicted, correction = router.routing_ratio(dec)
    assert exact == pytest.approx(predicted * correction, rel=1e-9)


def test_group_mass_monotone_in_difficulty():
    raw = np.array([0.4, -1.0, 0.2, 0.9])
    masses = []
    for d_val in np.arange(0.0, 1.01, 0.1):
        signs = np.concatenate([np.ones(2), -np.ones(2)])
        z = raw + 1.0 * d_val * signs
        p = np.exp(z - z.max())
        p /= p.sum()
        masses.append(router.group_mass(p)[0])
    assert all(b > a for a, b in zip(masses, masses[1:]))


def test_gamma_zero_probs_bitwise_equal_unbiased():
    params = make_params(d=5, e=6, gamma=0.0)
    dec = router.route(params, Tensor(np.random.default_rng(3).standard_normal(5)), k=3)
    assert np.array_equal(dec.probs.data, dec.unbiased_probs.data)
    np.testing.assert_array_equal(dec.bias.data, np.zeros(6))


def test_topk_weights_are_largest_probs_not_renormalized():
    params = make_params(d=4, e=6)
    rng = np.random.default_rng(4)
    dec = router.route(params, Tensor(rng.standard_normal(4)), k=3)
    chosen = sorted((w for _, w in dec.topk), reverse=True)
    all_sorted = sorted(dec.probs.data, reverse=True)
    np.testing.assert_allclose(chosen, all_sorted[:3], atol=1e-15)
    assert sum(w for _, w in dec.topk) <= 1.0 + 1e-12


def test_topk_tie_breaks_to_lower_index():
    probs = np.array([0.25, 0.25, 0.25, 0.25])
    np.testing.assert_array_equal(router.top_k_indices(probs, 2), [0, 1])
    probs = np.array([0.1, 0.3, 0.3, 0.3])
    np.testing.assert_array_equal(router.top_k_indices(probs, 2), [1, 2])


def test_route_tokens_matches_single_route():
    params = make_params(d=5, e=4)
    rng = np.random.default_rng(5)
    hs = rng.standard_normal((3, 5))
    batch = router.route_tokens(params, Tensor(hs), k=2)
    for t in range(3):
        dec = router.route(params, Tensor(hs[t]), k=2)
        np.testing.assert_allclose(batch.probs.data[t], dec.probs.data, atol=1e-15)
        assert batch.difficulty.data[t] == pytest.approx(dec.difficulty.item())
        assert batch.entropy[t] == pytest.approx(dec.normalized_entropy)
        np.testing.assert_array_equal(batch.topk_indices[t], [i for i, _ in dec.topk])


def test_difficulty_and_entropy_ranges():
    params = make_params(d=8, e=4, gamma=2.5)
    rng = np.random.default_rng(6)
    batch = router.route_tokens(params, Tensor(rng.uniform(-20, 20, (50, 8))), k=2)
    assert np.all((batch.difficulty.data >= 0) & (batch.difficulty.data <= 1))
    assert np.all((batch.entropy >= 0) & (batch.entropy <= 1.0 + 1e-12))


def test_router_gradients_flow_through_difficulty_path():
    # seed chosen so every gradient coordinate sits well above the FD noise
    # floor (~1e-10 absolute), keeping the relative comparison meaningful
    params = router.init_router(4, 4, 1.3, np.random.default_rng(1))
    rng = np.random.default_rng(101)
    h = Tensor(rng.standard_normal(4), requires_grad=True)
    probe = rng.standard_normal(4)
    leaves = [h] + list(params.tensors().values())

    def f():
        dec = router.route(params, h, k=2)
        return T.mul(dec.probs, Tensor(probe)).sum()

    assert finite_diff_check(f, leaves) <= 1e-6
