"""Variance-reduced estimators over gain-modulated per-sample gradients.

The modulated per-sample gradient is F_i(W) = apply_gains(B, v_i) with
v_i evaluated at the quantized point. Estimators: plain minibatch mean,
SVRG-style anchor differences, SAGA-style per-index table, and a
SARAH-style recursive difference. All share the control-variate form

    g = mean_{i in S} (F_i(W) - h_i(state)) + reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .jacobian import SurrogateJacobian, apply_gains
from .objectives import Objective, per_sample_grad
from .quant import GroupedWeights, QuantSpec, quantize
from .rng import substream

__all__ = [
    "VRState",
    "init_vr_state",
    "ref_grad",
    "grad_est",
    "ctrl_update",
    "refresh_anchor",
    "estimator_variance",
    "surrogate_per_sample",
    "surrogate_batch",
]

_MODES = ("plain", "svrg", "saga", "sarah")


def surrogate_per_sample(weights: GroupedWeights, jac: SurrogateJacobian, obj: Objective,
                         spec: QuantSpec, i: int, q: np.ndarray | None = None) -> np.ndarray:
    """F_i(W) = gains * grad of sample i at the quantized point."""
    if q is None:
        q = quantize(weights, spec)
    _, v = per_sample_grad(obj, q, i)
    return apply_gains(jac, v, weights.group_bounds)


def surrogate_batch(weights: GroupedWeights, jac: SurrogateJacobian, obj: Objective,
                    spec: QuantSpec, batch: np.ndarray, q: np.ndarray | None = None,
                    ) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean loss, mean raw gradient and mean modulated gradient over a batch."""
    if q is None:
        q = quantize(weights, spec)
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("empty batch")
    pairs = [per_sample_grad(obj, q, int(i)) for i in batch]
    loss = float(np.mean([p[0] for p in pairs]))
    v_bar = np.mean(np.stack([p[1] for p in pairs]), axis=0)
    return loss, v_bar, apply_gains(jac, v_bar, weights.group_bounds)


@dataclass(frozen=True)
class VRState:
    """Anchor state plus mode-specific memory for the gradient estimator."""

    mode: str
    anchor_weights: GroupedWeights
    anchor_gains: SurrogateJacobian
    anchor_grad: np.ndarray
    saga_table: np.ndarray | None = None
    saga_mean: np.ndarray | None = None
    sarah_prev: tuple[GroupedWeights, SurrogateJacobian, np.ndarray] | None = None
    ref_set: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    def __post_init__(self) -> None:
        if self.mode not in _MODES:
            raise ValueError(f"unknown VR mode {self.mode!r}")
        if not np.all(np.isfinite(self.anchor_grad)):
            raise ValueError("anchor gradient must be finite")


def ref_grad(anchor_weights: GroupedWeights, anchor_gains: SurrogateJacobian, obj: Objective,
             spec: QuantSpec, ref_set: np.ndarray | None = None) -> np.ndarray:
    """Reference gradient: mean modulated gradient at the anchor (full data by default)."""
    if ref_set is None:
        ref_set = np.arange(obj.n)
    ref_set = np.asarray(ref_set, dtype=int)
    if ref_set.size == 0:
        raise ValueError("empty reference set")
    _, _, g = surrogate_batch(anchor_weights, anchor_gains, obj, spec, ref_set)
    return g


def init_vr_state(mode: str, weights: GroupedWeights, jac: SurrogateJacobian, obj: Objective,
                  spec: QuantSpec, ref_set: np.ndarray | None = None) -> VRState:
    """Anchor at the given point; SAGA tables start from anchor gradients."""
    if ref_set is None:
        ref_set = np.arange(obj.n)
    ref_set = np.asarray(ref_set, dtype=int)
    g_ref = ref_grad(weights, jac, obj, spec, ref_set)
    saga_table = None
    saga_mean = None
    if mode == "saga":
        q = quantize(weights, spec)
        saga_table = np.stack([surrogate_per_sample(weights, jac, obj, spec, i, q=q)
                               for i in range(obj.n)])
        saga_mean = saga_table.mean(axis=0)
    return VRState(mode=mode, anchor_weights=weights, anchor_gains=jac,
                   anchor_grad=g_ref, saga_table=saga_table, saga_mean=saga_mean,
                   ref_set=ref_set)


def grad_est(weights: GroupedWeights, jac: SurrogateJacobian, state: VRState, obj: Objective,
             spec: QuantSpec, batch: np.ndarray) -> np.ndarray:
    """Control-variate gradient estimate for one minibatch."""
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("empty batch")
    q = quantize(weights, spec)
    if state.mode == "plain":
        _, _, g = surrogate_batch(weights, jac, obj, spec, batch, q=q)
        return g
    if state.mode == "svrg":
        q_anchor = quantize(state.anchor_weights, spec)
        diffs = [surrogate_per_sample(weights, jac, obj, spec, int(i), q=q)
                 - surrogate_per_sample(state.anchor_weights, state.anchor_gains, obj, spec,
                                        int(i), q=q_anchor)
                 for i in batch]
        return np.mean(np.stack(diffs), axis=0) + state.anchor_grad
    if state.mode == "saga":
        if state.saga_table is None or state.saga_mean is None:
            raise ValueError("SAGA state missing its per-index table")
        diffs = [surrogate_per_sample(weights, jac, obj, spec, int(i), q=q) - state.saga_table[int(i)]
                 for i in batch]
        return np.mean(np.stack(diffs), axis=0) + state.saga_mean
    # sarah: anchor value right after a refresh, recursive difference otherwise
    if state.sarah_prev is None:
        return state.anchor_grad.copy()
    prev_weights, prev_gains, prev_grad = state.sarah_prev
    q_prev = quantize(prev_weights, spec)
    diffs = [surrogate_per_sample(weights, jac, obj, spec, int(i), q=q)
             - surrogate_per_sample(prev_weights, prev_gains, obj, spec, int(i), q=q_prev)
             for i in batch]
    return np.mean(np.stack(diffs), axis=0) + prev_grad


def ctrl_update(state: VRState, weights: GroupedWeights, batch: np.ndarray, obj: Objective,
                spec: QuantSpec, jac: SurrogateJacobian | None = None,
                grad: np.ndarray | None = None) -> VRState:
    """Refresh the estimator memory after a step.

    SAGA replaces the touched table rows and adjusts the running mean
    incrementally; SARAH stores the step's (weights, gains, estimate);
    plain and SVRG states are returned unchanged.
    """
    if state.mode in ("plain", "svrg"):
        return state
    if state.mode == "saga":
        if state.saga_table is None or state.saga_mean is None:
            raise ValueError("SAGA state missing its per-index table")
        if jac is None:
            raise ValueError("SAGA update needs the current gains")
        table = state.saga_table.copy()
        mean = state.saga_mean.copy()
        q = quantize(weights, spec)
        n = table.shape[0]
        for i in np.asarray(batch, dtype=int):
            fresh = surrogate_per_sample(weights, jac, obj, spec, int(i), q=q)
            mean = mean + (fresh - table[int(i)]) / n
            table[int(i)] = fresh
        return replace(state, saga_table=table, saga_mean=mean)
    # sarah
    if jac is None or grad is None:
        raise ValueError("SARAH update needs the current gains and gradient estimate")
    return replace(state, sarah_prev=(weights, jac, np.asarray(grad, dtype=float)))


def refresh_anchor(state: VRState, weights: GroupedWeights, jac: SurrogateJacobian,
                   obj: Objective, spec: QuantSpec,
                   ref_set: np.ndarray | None = None) -> VRState:
    """Synchronize the anchor to the given point and recompute the reference gradient."""
    if ref_set is None:
        ref_set = state.ref_set if state.ref_set.size else np.arange(obj.n)
    ref_set = np.asarray(ref_set, dtype=int)
    g_ref = ref_grad(weights, jac, obj, spec, ref_set)
    sarah_prev = None if state.mode == "sarah" else state.sarah_prev
    return replace(state, anchor_weights=weights, anchor_gains=jac, anchor_grad=g_ref,
                   sarah_prev=sarah_prev, ref_set=ref_set)


def estimator_variance(state: VRState, weights: GroupedWeights, jac: SurrogateJacobian,
                       obj: Objective, spec: QuantSpec, batch_size: int, trials: int,
                       seed: int = 0) -> float:
    """Mean squared deviation of the estimator from the full-batch modulated gradient.

    Measured empirically over independent minibatch draws (without
    replacement within a batch).
    """
    if trials < 2:
        raise ValueError("trials must be >= 2")
    _, _, g_full = surrogate_batch(weights, jac, obj, spec, np.arange(obj.n))
    total = 0.0
    for t in range(trials):
        rng = substream(seed, "minibatch", t)
        batch = rng.choice(obj.n, size=batch_size, replace=False)
        g = grad_est(weights, jac, state, obj, spec, batch)
        diff = g - g_full
        total += float(diff @ diff)
    return total / trials
