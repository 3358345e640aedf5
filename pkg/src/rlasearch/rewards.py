"""Stage reward R = sum_k w_k R_k over accuracy, decay, complexity, conditioning.

All four components are clamped to [0, 1] and computed from a single
execution trace.  The accuracy series is normalized per environment:
relative residuals for linear systems, the loss ratio against the zero
iterate for logistic instances, and the normalized Rayleigh deficit
(lambda_max - rho_t) / (lambda_max - rho_0) for eigenproblems, so that
0 always means solved and 1 means no progress.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .executor import OK, ExecutionTrace, best_over_grid
from .instances import (
    GAUSSIAN,
    HEAVY_TAILED,
    LOW_COND,
    MID_COND,
    PSD,
    InstanceSpec,
    ProblemInstance,
    generate_instance,
)
from .kernels import CONDITION_SATURATED, condition_number
from .shapes import MAT_KIND

ACC_FLOOR = 1e-16
SEARCH_GRID = (0.01, 0.1, 1.0)
REPORTING_GRID = (0.01, 0.03, 0.07, 0.1, 0.3, 0.7, 1.0)


@dataclass(frozen=True)
class RewardWeights:
    w_acc: float = 5.0
    w_decay: float = 1.0
    w_comp: float = 1.0
    w_cond: float = 0.0

    def __post_init__(self):
        vals = (self.w_acc, self.w_decay, self.w_comp, self.w_cond)
        if any(v < 0 for v in vals):
            raise ValueError("reward weights must be nonnegative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one reward weight must be positive")


EARLY_STAGE_WEIGHTS = RewardWeights(5.0, 1.0, 1.0, 0.0)
COMPLEXITY_STAGE_WEIGHTS = RewardWeights(5.0, 1.0, 8.0, 0.0)


@dataclass
class RewardBreakdown:
    r_acc: float
    r_decay: float
    r_comp: float
    r_cond: float
    total: float
    rho_max: float
    flops: int

    def components(self) -> tuple[float, float, float, float]:
        return (self.r_acc, self.r_decay, self.r_comp, self.r_cond)


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def _normalized_series(trace: ExecutionTrace, inst: ProblemInstance) -> Optional[list[float]]:
    hist = trace.residuals
    if not hist or not math.isfinite(hist[0]):
        return None
    if inst.env == "linear":
        return list(hist)
    if inst.env == "logistic":
        base = hist[0]
        if base <= 0:
            return None
        return [h / base for h in hist]
    # eigen: normalized Rayleigh deficit relative to the start vector
    lam = inst.lambda_max if inst.lambda_max is not None else max(hist)
    d0 = lam - hist[0]
    if d0 <= 0:
        return [0.0 for _ in hist]
    return [max(lam - h, 0.0) / d0 for h in hist]


def reward_components(trace: ExecutionTrace, inst: ProblemInstance,
                      with_cond: bool = True) -> RewardBreakdown:
    """Score one trace; failed executions map to an all-zero breakdown."""
    series = _normalized_series(trace, inst)
    if trace.status != OK or series is None:
        return RewardBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, float("inf"), trace.flops)

    r_T = max(series[-1], 0.0)
    r_acc = _clamp01(-math.log10(max(r_T, ACC_FLOOR)) / 16.0)

    rho_max = 0.0
    for prev, nxt in zip(series, series[1:]):
        ratio = 0.0 if prev == 0.0 else nxt / prev
        rho_max = max(rho_max, ratio)
    r_decay = _clamp01(1.0 - max(0.0, rho_max - 1.0))

    f_base = 2.0 * inst.m * inst.n**2
    f = max(float(trace.flops), 1.0)
    r_comp = _clamp01(1.0 - math.log10(f / f_base) / 3.0)

    r_cond = _conditioning_component(trace, inst) if with_cond else 0.0
    return RewardBreakdown(r_acc, r_decay, r_comp, r_cond, 0.0, rho_max, trace.flops)


def _conditioning_component(trace: ExecutionTrace, inst: ProblemInstance) -> float:
    """Preconditioner quality of the last setup-produced n-by-n cache register."""
    n = inst.n
    chosen = None
    for rid in reversed(trace.setup_write_order):
        val = trace.setup_registers.get(rid)
        if val is not None and val.shape.kind == MAT_KIND and val.data.shape == (n, n):
            chosen = val
            break
    if chosen is None:
        return 0.0
    kappa_a = max(inst.realized_kappa, 1.0)
    try:
        kappa_am = condition_number(inst.A @ chosen.data)
    except Exception:
        return 0.0
    if kappa_am >= CONDITION_SATURATED:
        return 0.0
    if kappa_a <= 1.0 + 1e-9:
        return 1.0 if kappa_am <= 1.0 + 1e-6 else 0.0
    return _clamp01(1.0 - math.log10(max(kappa_am, 1.0)) / math.log10(kappa_a))


def weighted_reward(breakdown: RewardBreakdown, weights: RewardWeights) -> float:
    """Dot product of components and weights."""
    return (weights.w_acc * breakdown.r_acc
            + weights.w_decay * breakdown.r_decay
            + weights.w_comp * breakdown.r_comp
            + weights.w_cond * breakdown.r_cond)


def score_trace(trace: ExecutionTrace, inst: ProblemInstance,
                weights: RewardWeights) -> RewardBreakdown:
    """Components plus their weighted total, skipping unused conditioning work."""
    bd = reward_components(trace, inst, with_cond=weights.w_cond > 0)
    bd.total = weighted_reward(bd, weights)
    return bd


# ---------------------------------------------------------------------------
# auxiliary multi-environment reporting reward

AUX_PROFILE_WEIGHTS = (1.0, 5.0, 10.0)

_AUX_ENVS = {
    "ht": (
        ("psd", InstanceSpec(PSD, 5, 5, kappa_target=2.0)),
        ("ht_low_cond", InstanceSpec(LOW_COND, 200, 20, kappa_target=5.0,
                                     leverage=HEAVY_TAILED)),
        ("ht_mid_cond", InstanceSpec(MID_COND, 2000, 50, kappa_target=300.0,
                                     leverage=HEAVY_TAILED)),
    ),
    "non_ht": (
        ("psd", InstanceSpec(PSD, 5, 5, kappa_target=2.0)),
        ("low_cond", InstanceSpec(LOW_COND, 200, 20, kappa_target=5.0)),
        ("mid_cond", InstanceSpec(MID_COND, 2000, 50, kappa_target=300.0)),
    ),
}


def aux_weighted_reward(program, profile: str, seed: int = 0, T: int = 50,
                        weights: RewardWeights = COMPLEXITY_STAGE_WEIGHTS,
                        grid=REPORTING_GRID) -> float:
    """Reporting-only aggregate over a fixed environment profile.

    Evaluates the program on each profile environment with the full
    reporting step-size grid and returns the normalized weighted mean of
    the per-environment rewards; never consumed by search.
    """
    if profile not in _AUX_ENVS:
        raise ValueError(f"unknown profile {profile!r}; expected one of {list(_AUX_ENVS)}")
    envs = _AUX_ENVS[profile]
    omega = np.asarray(AUX_PROFILE_WEIGHTS, dtype=float)
    omega = omega / omega.sum()
    total = 0.0
    for w, (name, spec) in zip(omega, envs):
        inst = generate_instance(spec, seed)
        _, tr = best_over_grid(program, inst, list(grid), T, seed=seed)
        total += w * score_trace(tr, inst, weights).total
    return total
