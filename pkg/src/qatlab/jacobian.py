"""Learned surrogate Jacobian: one backward gain per quantization group.

The gain vector replaces the identity that a straight-through backward
pass would use. Gains are estimated from the quantizer's measured
response to random perturbations (probe slope fit, probe least squares,
or a dithered common-random-number slope fit), clipped, and smoothed by
an EMA. The straight-through rule is the special case of all-ones gains.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .quant import DitherDraw, GroupedWeights, QuantSpec, quantize_array
from .rng import substream

__all__ = [
    "SurrogateJacobian",
    "ProbeConfig",
    "probe_update",
    "probe_ls_update",
    "dither_update",
    "apply_gains",
    "probe_slope_samples",
]


@dataclass(frozen=True)
class SurrogateJacobian:
    """Per-group scalar gains with EMA smoothing state."""

    gains: np.ndarray
    ema_rate: float = 0.9
    clip_lo: float = 0.0
    clip_hi: float = 1.0
    reg_eps: float = 1e-8

    def __post_init__(self) -> None:
        gains = np.asarray(self.gains, dtype=float)
        object.__setattr__(self, "gains", gains)
        if not np.all(np.isfinite(gains)):
            raise ValueError("gains must be finite")
        if not 0.0 < self.ema_rate <= 1.0:
            raise ValueError("ema_rate must lie in (0, 1]")
        if self.clip_lo > self.clip_hi:
            raise ValueError("clip_lo must not exceed clip_hi")

    @classmethod
    def identity(cls, n_groups: int, ema_rate: float = 0.9, clip_lo: float = 0.0,
                 clip_hi: float = 1.0, reg_eps: float = 1e-8) -> "SurrogateJacobian":
        """All-ones gains: the straight-through starting point."""
        return cls(gains=np.ones(n_groups), ema_rate=ema_rate, clip_lo=clip_lo,
                   clip_hi=clip_hi, reg_eps=reg_eps)

    def with_gains(self, gains: np.ndarray) -> "SurrogateJacobian":
        return replace(self, gains=np.asarray(gains, dtype=float))

    def _ema(self, estimates: np.ndarray, mask: np.ndarray) -> "SurrogateJacobian":
        clipped = np.clip(estimates, self.clip_lo, self.clip_hi)
        new = self.gains.copy()
        new[mask] = (1.0 - self.ema_rate) * self.gains[mask] + self.ema_rate * clipped[mask]
        return self.with_gains(new)


@dataclass(frozen=True)
class ProbeConfig:
    """Gaussian probe settings: scale (weight units), count, stream id."""

    sigma: float
    num_probes: int = 1
    seed_tag: int = 0

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.num_probes < 1:
            raise ValueError("num_probes must be >= 1")

    @classmethod
    def for_spec(cls, spec: QuantSpec, num_probes: int = 1, seed_tag: int = 0) -> "ProbeConfig":
        """Default probe scale: half the quantizer step."""
        step = float(np.min(spec.step)) if spec.per_group else float(spec.step)
        return cls(sigma=0.5 * step, num_probes=num_probes, seed_tag=seed_tag)


def probe_slope_samples(w_group: np.ndarray, spec: QuantSpec, step: float,
                        sigma: float, m: int, rng: np.random.Generator,
                        dither: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Slope-fit ingredients for one group and m probes.

    Returns (cross, energy): per-probe inner products <dq_k, delta_k> and
    probe energies |delta_k|^2. When ``dither`` is given, each probe's two
    quantizer evaluations share the same dither draw (common random
    numbers), so the fit targets the dither-smoothed sensitivity. A 1-D
    dither is shared across probes; a (m, group) array is per-probe.
    """
    deltas = rng.normal(0.0, sigma, size=(m, w_group.size))
    if dither is None:
        base = quantize_array(w_group, spec, step=step)[None, :]
        shifted = quantize_array(w_group[None, :] + deltas, spec, step=step)
    else:
        dither = np.atleast_2d(dither)
        base = quantize_array(w_group[None, :] + dither, spec, step=step) - dither
        shifted = quantize_array(w_group[None, :] + deltas + dither, spec, step=step) - dither
    dq = shifted - base
    cross = np.einsum("ij,ij->i", dq, deltas)
    energy = np.einsum("ij,ij->i", deltas, deltas)
    return cross, energy


def _per_group_update(weights: GroupedWeights, spec: QuantSpec, jac: SurrogateJacobian,
                      sigma: float, m: int, rng_for_group, least_squares: bool,
                      dither_for_group=None) -> SurrogateJacobian:
    n_groups = weights.n_groups
    if jac.gains.size != n_groups:
        raise ValueError("gain count does not match group count")
    estimates = np.zeros(n_groups)
    mask = np.zeros(n_groups, dtype=bool)
    for g, (lo, hi) in enumerate(weights.group_bounds):
        if hi == lo:
            warnings.warn(f"empty group {g} skipped", stacklevel=3)
            continue
        step_g = spec.step_for_group(g)
        dither = dither_for_group(g, hi - lo, step_g) if dither_for_group is not None else None
        cross, energy = probe_slope_samples(weights.values[lo:hi], spec, step_g,
                                            sigma, m, rng_for_group(g), dither=dither)
        if least_squares:
            denom = float(energy.sum())
            if denom == 0.0:
                raise ValueError("zero excitation")
            estimates[g] = float(cross.sum()) / denom
        else:
            estimates[g] = float(np.mean(cross / (energy + jac.reg_eps)))
        mask[g] = True
    return jac._ema(estimates, mask)


def probe_update(weights: GroupedWeights, spec: QuantSpec, jac: SurrogateJacobian,
                 cfg: ProbeConfig, draw_key: int = 0) -> SurrogateJacobian:
    """One-step slope fit per group: <dq, delta> / (|delta|^2 + eps), then clip + EMA.

    With num_probes > 1 the raw estimates are averaged before clipping.
    """
    def rng_for_group(g: int) -> np.random.Generator:
        return substream(cfg.seed_tag, "probe", draw_key, g)

    return _per_group_update(weights, spec, jac, cfg.sigma, cfg.num_probes,
                             rng_for_group, least_squares=False)


def probe_ls_update(weights: GroupedWeights, spec: QuantSpec, jac: SurrogateJacobian,
                    cfg: ProbeConfig, draw_key: int = 0) -> SurrogateJacobian:
    """Scalar least-squares over the probe batch: sum<dq,delta> / sum|delta|^2."""
    def rng_for_group(g: int) -> np.random.Generator:
        return substream(cfg.seed_tag, "probe", draw_key, g)

    return _per_group_update(weights, spec, jac, cfg.sigma, cfg.num_probes,
                             rng_for_group, least_squares=True)


def dither_update(weights: GroupedWeights, spec: QuantSpec, jac: SurrogateJacobian,
                  cfg: ProbeConfig, dither_seed: int, draw_key: int = 0,
                  fixed_dither: DitherDraw | None = None) -> SurrogateJacobian:
    """Slope fit on the de-dithered proxy, common dither across both evaluations.

    Each probe draws its own dither, shared by that probe's base and
    perturbed evaluation. ``fixed_dither`` reuses an externally drawn
    dither (e.g. the forward dither of a training step) for every probe
    instead.
    """
    def rng_for_group(g: int) -> np.random.Generator:
        return substream(cfg.seed_tag, "probe", draw_key, g)

    if fixed_dither is not None:
        bounds = weights.group_bounds

        def dither_for_group(g: int, size: int, step_g: float) -> np.ndarray:
            lo, hi = bounds[g]
            return fixed_dither.r[lo:hi]
    else:
        def dither_for_group(g: int, size: int, step_g: float) -> np.ndarray:
            rng = substream(dither_seed, "dither", draw_key, g)
            return rng.uniform(-0.5 * step_g, 0.5 * step_g, size=(cfg.num_probes, size))

    return _per_group_update(weights, spec, jac, cfg.sigma, cfg.num_probes,
                             rng_for_group, least_squares=False,
                             dither_for_group=dither_for_group)


def apply_gains(jac: SurrogateJacobian, v: np.ndarray,
                group_bounds: tuple[tuple[int, int], ...]) -> np.ndarray:
    """Scale an upstream gradient by its group's gain: out_i = b_{group(i)} * v_i."""
    v = np.asarray(v, dtype=float)
    if len(group_bounds) != jac.gains.size or (group_bounds and group_bounds[-1][1] != v.size):
        raise ValueError("gradient length does not match group bounds")
    out = np.empty_like(v)
    for g, (lo, hi) in enumerate(group_bounds):
        out[lo:hi] = jac.gains[g] * v[lo:hi]
    return out
