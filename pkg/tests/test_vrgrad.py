from __future__ import annotations

from itertools import combinations

import numpy as np
import pytest

from qatlab.jacobian import SurrogateJacobian
from qatlab.objectives import make_regression_task
from qatlab.quant import GroupedWeights, QuantSpec
from qatlab.vrgrad import (
    ctrl_update,
    estimator_variance,
    grad_est,
    init_vr_state,
    ref_grad,
    refresh_anchor,
    surrogate_batch,
    surrogate_per_sample,
)


def setup(n=8, d=6, seed=0, gains=None):
    obj = make_regression_task(d, n, seed=seed)
    weights = GroupedWeights.from_flat(np.linspace(-1.0, 1.0, d), group_size=3)
    spec = QuantSpec.generic(bits=4, step=0.25, group_size=3)
    jac = SurrogateJacobian.identity(weights.n_groups)
    if gains is not None:
        jac = jac.with_gains(gains)
    return obj, weights, spec, jac


def full_surrogate(obj, weights, spec, jac):
    _, _, g = surrogate_batch(weights, jac, obj, spec, np.arange(obj.n))
    return g


def test_ref_grad_single_sample_and_identity_gains():
    obj, weights, spec, jac = setup(n=1)
    g = ref_grad(weights, jac, obj, spec)
    assert np.array_equal(g, surrogate_per_sample(weights, jac, obj, spec, 0))


def test_ref_grad_matches_direct_summation():
    obj, weights, spec, jac = setup(n=8, gains=[0.5, 1.0])
    g = ref_grad(weights, jac, obj, spec)
    total = np.zeros(weights.dim)
    for i in range(obj.n):
        total = total + surrogate_per_sample(weights, jac, obj, spec, i)
    np.testing.assert_allclose(g, total / obj.n, rtol=1e-13)


def test_ref_grad_empty_set_rejected():
    obj, weights, spec, jac = setup()
    with pytest.raises(ValueError, match="empty"):
        ref_grad(weights, jac, obj, spec, ref_set=np.array([], dtype=int))


def test_plain_full_batch_is_full_surrogate_gradient():
    obj, weights, spec, jac = setup(gains=[0.7, 0.9])
    state = init_vr_state("plain", weights, jac, obj, spec)
    g = grad_est(weights, jac, state, obj, spec, np.arange(obj.n))
    np.testing.assert_allclose(g, full_surrogate(obj, weights, spec, jac), rtol=1e-14)


def test_svrg_at_anchor_returns_reference_bit_exactly():
    obj, weights, spec, jac = setup()
    state = init_vr_state("svrg", weights, jac, obj, spec)
    g = grad_est(weights, jac, state, obj, spec, np.array([2, 5, 1]))
    assert np.array_equal(g, state.anchor_grad)


@pytest.mark.parametrize("mode,n,batch", [("svrg", 4, 1), ("svrg", 6, 2),
                                          ("saga", 4, 1), ("saga", 6, 2)])
def test_exhaustive_minibatch_unbiasedness(mode, n, batch):
    # Enumerate every equiprobable minibatch; the average estimate must
    # equal the full-batch modulated gradient to 1e-12.
    obj, weights, spec, jac = setup(n=n, gains=[0.6, 1.0])
    state = init_vr_state(mode, weights, jac, obj, spec)
    # displace both the point and (for saga) the table to break symmetry
    moved = weights.with_values(weights.values + 0.2)
    if mode == "saga":
        state = ctrl_update(state, weights.with_values(weights.values - 0.1),
                            np.array([0, 1]), obj, spec, jac=jac)
    batches = list(combinations(range(n), batch))
    acc = np.zeros(weights.dim)
    for b in batches:
        acc = acc + grad_est(moved, jac, state, obj, spec, np.array(b))
    mean_est = acc / len(batches)
    target = full_surrogate(obj, moved, spec, jac)
    assert np.max(np.abs(mean_est - target)) <= 1e-12


def test_saga_running_mean_invariant_after_updates():
    obj, weights, spec, jac = setup(n=8)
    state = init_vr_state("saga", weights, jac, obj, spec)
    rng = np.random.default_rng(4)
    for t in range(10):
        point = weights.with_values(weights.values + rng.normal(0, 0.3, weights.dim))
        state = ctrl_update(state, point, rng.choice(8, size=3, replace=False), obj, spec, jac=jac)
        assert np.max(np.abs(state.saga_mean - state.saga_table.mean(axis=0))) <= 1e-10


def test_saga_full_update_sets_mean_to_fresh_gradients():
    obj, weights, spec, jac = setup(n=6)
    state = init_vr_state("saga", weights, jac, obj, spec)
    point = weights.with_values(weights.values * 0.5)
    state = ctrl_update(state, point, np.arange(6), obj, spec, jac=jac)
    np.testing.assert_allclose(state.saga_mean, full_surrogate(obj, point, spec, jac), atol=1e-12)


def test_svrg_ctrl_update_is_identity():
    obj, weights, spec, jac = setup()
    state = init_vr_state("svrg", weights, jac, obj, spec)
    after = ctrl_update(state, weights.with_values(weights.values + 1.0),
                        np.array([0]), obj, spec, jac=jac)
    assert after is state


def test_missing_saga_table_rejected():
    obj, weights, spec, jac = setup()
    state = init_vr_state("svrg", weights, jac, obj, spec)
    bad = type(state)(mode="saga", anchor_weights=state.anchor_weights,
                      anchor_gains=state.anchor_gains, anchor_grad=state.anchor_grad)
    with pytest.raises(ValueError, match="table"):
        grad_est(weights, jac, bad, obj, spec, np.array([0]))


def test_sarah_refresh_then_recursive_difference():
    obj, weights, spec, jac = setup(n=6)
    state = init_vr_state("sarah", weights, jac, obj, spec)
    # right after (implicit) refresh: estimate equals the anchor gradient
    g0 = grad_est(weights, jac, state, obj, spec, np.array([1, 3]))
    assert np.array_equal(g0, state.anchor_grad)
    state = ctrl_update(state, weights, np.array([1, 3]), obj, spec, jac=jac, grad=g0)
    moved = weights.with_values(weights.values + 0.4)
    batch = np.array([0, 2])
    g1 = grad_est(moved, jac, state, obj, spec, batch)
    expected = np.zeros(weights.dim)
    for i in batch:
        expected = expected + (surrogate_per_sample(moved, jac, obj, spec, int(i))
                               - surrogate_per_sample(weights, jac, obj, spec, int(i)))
    expected = expected / batch.size + g0
    np.testing.assert_allclose(g1, expected, rtol=1e-13)
    # refresh clears the recursive memory
    state = refresh_anchor(state, moved, jac, obj, spec)
    assert state.sarah_prev is None
    g2 = grad_est(moved, jac, state, obj, spec, np.array([4]))
    assert np.array_equal(g2, state.anchor_grad)


def test_refresh_anchor_idempotent_and_matches_recomputation():
    obj, weights, spec, jac = setup()
    state = init_vr_state("svrg", weights, jac, obj, spec)
    moved = weights.with_values(weights.values - 0.3)
    once = refresh_anchor(state, moved, jac, obj, spec)
    twice = refresh_anchor(once, moved, jac, obj, spec)
    assert np.array_equal(once.anchor_grad, twice.anchor_grad)
    np.testing.assert_allclose(once.anchor_grad, full_surrogate(obj, moved, spec, jac), rtol=1e-14)
    g = grad_est(moved, jac, once, obj, spec, np.array([0, 1]))
    assert np.array_equal(g, once.anchor_grad)


def test_estimator_variance_full_batch_is_zero():
    obj, weights, spec, jac = setup(n=6)
    state = init_vr_state("plain", weights, jac, obj, spec)
    # full batch in permuted order: only accumulation round-off remains
    v = estimator_variance(state, weights, jac, obj, spec, batch_size=6, trials=5)
    assert v <= 1e-28


def test_estimator_variance_svrg_zero_at_anchor():
    obj, weights, spec, jac = setup(n=8)
    state = init_vr_state("svrg", weights, jac, obj, spec)
    v = estimator_variance(state, weights, jac, obj, spec, batch_size=2, trials=10)
    assert v <= 1e-24


def test_svrg_variance_below_plain_near_anchor():
    obj, weights, spec, jac = setup(n=32, d=8)
    state_svrg = init_vr_state("svrg", weights, jac, obj, spec)
    state_plain = init_vr_state("plain", weights, jac, obj, spec)
    moved = weights.with_values(weights.values * (1.0 + 0.05))
    v_svrg = estimator_variance(state_svrg, moved, jac, obj, spec, batch_size=4, trials=200)
    v_plain = estimator_variance(state_plain, moved, jac, obj, spec, batch_size=4, trials=200)
    assert v_svrg <= v_plain
