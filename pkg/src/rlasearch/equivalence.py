"""Two-step semantic program equivalence.

Two programs are equivalent iff their symbolic canonical forms match and
executing both on held-out random instances with common random numbers
produces matching final iterates.  The canonical comparison is exact and
cheap; the execution test guards against unsound rewrites.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .executor import OK, ExecConfig, execute
from .instances import EIGEN_FAMILY, LOGISTIC_FAMILY, MID_COND, InstanceSpec, generate_instance
from .ir import Program, canonicalize_symbolic, serialize

EXEC_TOLERANCE = 1e-8
HELD_OUT_SEED = 987_001


def canonical_form(p: Program) -> str:
    """Serialized symbolic canonical form (terminal flag ignored)."""
    return serialize(canonicalize_symbolic(replace(p, terminal=False)))


def _held_out_spec(env: str) -> InstanceSpec:
    if env == "logistic":
        return InstanceSpec(LOGISTIC_FAMILY, 40, 6, kappa_target=5.0, noise_sigma=0.2)
    if env == "eigen":
        return InstanceSpec(EIGEN_FAMILY, 12, 12, kappa_target=8.0, spectral_gap=1.2)
    return InstanceSpec(MID_COND, 40, 8, kappa_target=100.0)


def programs_equivalent(p1: Program, p2: Program, trials: int = 5,
                        tol: float = EXEC_TOLERANCE) -> bool:
    """Canonical forms must match and executions must agree on final iterates."""
    if p1.env != p2.env:
        raise ValueError(f"environment mismatch: {p1.env} vs {p2.env}")
    if canonical_form(p1) != canonical_form(p2):
        return False
    return execution_equivalent(p1, p2, trials=trials, tol=tol)


def execution_equivalent(p1: Program, p2: Program, trials: int = 5,
                         tol: float = EXEC_TOLERANCE, T: int = 8,
                         eta: float = 0.1) -> bool:
    """Common-random-number execution comparison on held-out instances."""
    spec = _held_out_spec(p1.env)
    cfg = ExecConfig()
    for t in range(trials):
        inst = generate_instance(spec, HELD_OUT_SEED + t)
        seed = HELD_OUT_SEED + 7919 * t
        tr1 = execute(replace(p1, terminal=False), inst, eta, T, seed=seed, config=cfg)
        tr2 = execute(replace(p2, terminal=False), inst, eta, T, seed=seed, config=cfg)
        if tr1.status != OK or tr2.status != OK:
            return False
        denom = max(float(np.linalg.norm(tr1.final_x)),
                    float(np.linalg.norm(tr2.final_x)), 1e-30)
        if float(np.linalg.norm(tr1.final_x - tr2.final_x)) / denom > tol:
            return False
    return True
