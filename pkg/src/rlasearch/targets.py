"""Registry of known-algorithm programs and standard curricula.

Each known method ships as program text in the fixed format; update
formulas in the sources describe the mathematics, and these listings are
this package's translation into instructions.  Programs are validated by
execution properties in the test suite.
"""

from __future__ import annotations

from functools import lru_cache

from .curriculum import CurriculumStage
from .instances import (
    EIGEN_FAMILY,
    GAUSSIAN,
    HEAVY_TAILED,
    LOGISTIC_FAMILY,
    LOW_COND,
    MID_COND,
    PSD,
    InstanceSpec,
)
from .ir import Program, parse
from .rewards import COMPLEXITY_STAGE_WEIGHTS, EARLY_STAGE_WEIGHTS, RewardWeights

# ---------------------------------------------------------------------------
# linear-system programs

LANDWEBER = """[SETUP]
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_VEC_SUB(v1, b)
"""

LS_GD = """[SETUP]
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_VEC_SUB(v1, b)
v1 <- VEC_MAT_MUL(v1, A)
"""

PRECOND_GD = """[SETUP]
R1 <- HHQR(A, NONE)
R1 <- MAT_INV(R1, NONE)
R1 <- MAT_MAT_TRANS_MUL(R1, R1)
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_VEC_SUB(v1, b)
v1 <- VEC_MAT_MUL(v1, A)
v1 <- MAT_VEC_MUL(R1, v1)
"""

SKETCHED_PRECOND_GD = """[SETUP]
R1 <- SKETCH(A, NONE)
R1 <- MAT_MAT_MUL(R1, A)
R1 <- HHQR(R1, NONE)
R1 <- MAT_INV(R1, NONE)
R1 <- MAT_MAT_TRANS_MUL(R1, R1)
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_VEC_SUB(v1, b)
v1 <- VEC_MAT_MUL(v1, A)
v1 <- MAT_VEC_MUL(R1, v1)
"""

# stochastic-gradient family: the residual is subsampled with per-step
# shared indices, so (S_t A)^T S_t (Ax - b) is an unbiased gradient sketch
SUBSAMPLED_LS_GD = """[SETUP]
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_VEC_SUB(v1, b)
u1 <- SUBSAMPLING(v1, NONE)
R1 <- SUBSAMPLING(A, NONE)
v1 <- VEC_MAT_MUL(u1, R1)
"""

LEVERAGE_SUBSAMPLED_LS_GD = """[SETUP]
v2 <- LEVERAGE_SCORE(A, NONE)
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_VEC_SUB(v1, b)
u1 <- SUBSAMPLING(v1, v2)
R1 <- SUBSAMPLING(A, v2)
v1 <- VEC_MAT_MUL(u1, R1)
"""

SUBSAMPLED_PRECOND_GD = """[SETUP]
R1 <- SKETCH(A, NONE)
R1 <- MAT_MAT_MUL(R1, A)
R1 <- HHQR(R1, NONE)
R1 <- MAT_INV(R1, NONE)
R1 <- MAT_MAT_TRANS_MUL(R1, R1)
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_VEC_SUB(v1, b)
u1 <- SUBSAMPLING(v1, NONE)
R2 <- SUBSAMPLING(A, NONE)
v1 <- VEC_MAT_MUL(u1, R2)
v1 <- MAT_VEC_MUL(R1, v1)
"""

PRECOND_WEIGHTED_SGD = """[SETUP]
R1 <- SKETCH(A, NONE)
R1 <- MAT_MAT_MUL(R1, A)
R1 <- HHQR(R1, NONE)
R1 <- MAT_INV(R1, NONE)
R1 <- MAT_MAT_TRANS_MUL(R1, R1)
v2 <- LEVERAGE_SCORE(A, NONE)
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_VEC_SUB(v1, b)
u1 <- SUBSAMPLING(v1, v2)
R2 <- SUBSAMPLING(A, v2)
v1 <- VEC_MAT_MUL(u1, R2)
v1 <- MAT_VEC_MUL(R1, v1)
"""

# block projection onto a sampled row subsystem (sketch-and-project)
BLOCK_RANDOMIZED_KACZMARZ = """[SETUP]
[ITER]
R1 <- SUBSAMPLING(A, NONE)
u1 <- SUBSAMPLING(b, NONE)
R2 <- MAT_MAT_TRANS_MUL(R1, R1)
R2 <- MAT_INV(R2, NONE)
u2 <- MAT_VEC_MUL(R1, x)
u2 <- VEC_VEC_SUB(u2, u1)
u2 <- MAT_VEC_MUL(R2, u2)
v1 <- VEC_MAT_MUL(u2, R1)
"""

# ---------------------------------------------------------------------------
# logistic programs (labels in {-1,+1}; see tests for the gradient algebra)

LOGISTIC_WARMUP = """[SETUP]
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_VEC_SUB(v1, b)
v1 <- VEC_MAT_MUL(v1, A)
"""

SIGMOID_DESCENT = """[SETUP]
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- SIGMOID(v1, NONE)
v1 <- VEC_VEC_SUB(v1, b)
v1 <- VEC_MAT_MUL(v1, A)
"""

GAUSS_NEWTON = """[SETUP]
R1 <- MAT_TRANS_MAT_MUL(A, A)
R1 <- MAT_INV(R1, NONE)
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- SIGMOID(v1, NONE)
v1 <- VEC_VEC_SUB(v1, b)
v1 <- VEC_MAT_MUL(v1, A)
v1 <- MAT_VEC_MUL(R1, v1)
"""

SKETCHED_GAUSS_NEWTON = """[SETUP]
R2 <- SKETCH(A, NONE)
R2 <- MAT_MAT_MUL(R2, A)
R1 <- MAT_TRANS_MAT_MUL(R2, R2)
R1 <- MAT_INV(R1, NONE)
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- SIGMOID(v1, NONE)
v1 <- VEC_VEC_SUB(v1, b)
v1 <- VEC_MAT_MUL(v1, A)
v1 <- MAT_VEC_MUL(R1, v1)
"""

# ---------------------------------------------------------------------------
# eigenvalue programs

POWER_ITERATION = """[SETUP]
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_NORMALIZE(v1, NONE)
"""

SKETCHED_POWER_ITERATION = """[SETUP]
R1 <- SKETCH(A, NONE)
R1 <- MAT_MAT_MUL(R1, A)
[ITER]
v1 <- MAT_VEC_MUL(R1, x)
v1 <- VEC_MAT_MUL(v1, R1)
v1 <- VEC_NORMALIZE(v1, NONE)
"""

REGISTRY = {
    "landweber": (LANDWEBER, "linear"),
    "ls_gd": (LS_GD, "linear"),
    "precond_gd": (PRECOND_GD, "linear"),
    "sketched_precond_gd": (SKETCHED_PRECOND_GD, "linear"),
    "subsampled_ls_gd": (SUBSAMPLED_LS_GD, "linear"),
    "leverage_subsampled_ls_gd": (LEVERAGE_SUBSAMPLED_LS_GD, "linear"),
    "subsampled_precond_gd": (SUBSAMPLED_PRECOND_GD, "linear"),
    "precond_weighted_sgd": (PRECOND_WEIGHTED_SGD, "linear"),
    "block_randomized_kaczmarz": (BLOCK_RANDOMIZED_KACZMARZ, "linear"),
    "logistic_warmup": (LOGISTIC_WARMUP, "logistic"),
    "sigmoid_descent": (SIGMOID_DESCENT, "logistic"),
    "gauss_newton": (GAUSS_NEWTON, "logistic"),
    "sketched_gauss_newton": (SKETCHED_GAUSS_NEWTON, "logistic"),
    "power_iteration": (POWER_ITERATION, "eigen"),
    "sketched_power_iteration": (SKETCHED_POWER_ITERATION, "eigen"),
}


@lru_cache(maxsize=None)
def target(name: str) -> Program:
    text, env = REGISTRY[name]
    return parse(text, env)


# ---------------------------------------------------------------------------
# standard curricula


def landweber_stage(n: int = 20, budget: int = 4000) -> CurriculumStage:
    """NULL -> Landweber on a small well-conditioned PSD system."""
    return CurriculumStage(
        name="landweber",
        spec=InstanceSpec(PSD, n, n, kappa_target=2.0),
        weights=EARLY_STAGE_WEIGHTS,
        targets=[target("landweber")],
        budget=budget, T=25, max_added=2)


def ls_gd_stage(m: int = 200, n: int = 20, budget: int = 2000) -> CurriculumStage:
    """Landweber -> least-squares gradient descent on a rectangular system."""
    return CurriculumStage(
        name="ls_gd",
        spec=InstanceSpec(LOW_COND, m, n, kappa_target=5.0),
        weights=EARLY_STAGE_WEIGHTS,
        targets=[target("ls_gd")],
        budget=budget, T=25, max_added=2)


def subsampled_stage(m: int = 2000, n: int = 20, budget: int = 5000) -> CurriculumStage:
    """LS-GD -> subsampled LS-GD under a complexity-heavy reward."""
    return CurriculumStage(
        name="subsampled_ls_gd",
        spec=InstanceSpec(LOW_COND, m, n, kappa_target=5.0),
        weights=COMPLEXITY_STAGE_WEIGHTS,
        targets=[target("subsampled_ls_gd")],
        budget=budget, T=25, max_added=3,
        subsample_size=4 * n)


def precond_stage(m: int = 2000, n: int = 50, budget: int = 8000) -> CurriculumStage:
    """LS-GD -> QR-preconditioned gradient descent on an ill-conditioned system."""
    return CurriculumStage(
        name="precond_gd",
        spec=InstanceSpec(MID_COND, m, n, kappa_target=100.0),
        weights=EARLY_STAGE_WEIGHTS,
        targets=[target("precond_gd")],
        budget=budget, T=40, max_added=4)


def sketched_precond_stage(m: int = 2000, n: int = 50,
                           budget: int = 8000) -> CurriculumStage:
    """Preconditioned GD -> sketched preconditioning under complexity pressure."""
    return CurriculumStage(
        name="sketched_precond_gd",
        spec=InstanceSpec(MID_COND, m, n, kappa_target=100.0),
        weights=COMPLEXITY_STAGE_WEIGHTS,
        targets=[target("sketched_precond_gd")],
        budget=budget, T=60, max_added=2,
        sketch_size=20 * n)


def leverage_stage(m: int = 2000, n: int = 20, budget: int = 6000) -> CurriculumStage:
    """Uniform subsampling -> leverage-score subsampling on heavy-tailed rows."""
    return CurriculumStage(
        name="leverage_subsampled_ls_gd",
        spec=InstanceSpec(LOW_COND, m, n, kappa_target=5.0, leverage=HEAVY_TAILED),
        weights=COMPLEXITY_STAGE_WEIGHTS,
        targets=[target("leverage_subsampled_ls_gd")],
        budget=budget, T=25, max_added=3,
        subsample_size=4 * n)


def subsampled_ls_gd_curriculum(m: int = 2000, n: int = 20,
                                budgets=(4000, 2000, 5000)) -> list[CurriculumStage]:
    """Three stages: NULL -> Landweber -> LS-GD -> subsampled LS-GD."""
    return [
        landweber_stage(n=n, budget=budgets[0]),
        ls_gd_stage(m=max(10 * n, 200), n=n, budget=budgets[1]),
        subsampled_stage(m=m, n=n, budget=budgets[2]),
    ]


def sketch_precondition_curriculum(m: int = 2000, n: int = 50) -> list[CurriculumStage]:
    """The six-stage linear progression up to leverage-weighted subsampling."""
    sub_n = 20
    return [
        landweber_stage(n=20, budget=4000),
        ls_gd_stage(m=200, n=sub_n, budget=2000),
        precond_stage(m=m, n=n, budget=8000),
        sketched_precond_stage(m=m, n=n, budget=8000),
        subsampled_stage(m=m, n=n, budget=6000),
        leverage_stage(m=m, n=n, budget=6000),
    ]


def newton_sketch_curriculum(m_small: int = 500, n_small: int = 10,
                             m_big: int = 1000, n_big: int = 20,
                             kappa_big: float = 100.0,
                             budgets=(4000, 1500, 4000, 4000)) -> list[CurriculumStage]:
    """Four logistic stages ending in the sketched second-order step.

    Stage targets: least-squares warmup, sigmoid-corrected descent,
    fixed-Hessian Gauss-Newton, sketched Gauss-Newton.
    """
    small = InstanceSpec(LOGISTIC_FAMILY, m_small, n_small, kappa_target=2.0,
                         noise_sigma=0.1)
    big = InstanceSpec(LOGISTIC_FAMILY, m_big, n_big, kappa_target=kappa_big,
                       noise_sigma=0.1)
    return [
        CurriculumStage("logistic_warmup", small, EARLY_STAGE_WEIGHTS,
                        [target("logistic_warmup")], budget=budgets[0], T=20,
                        max_added=3),
        CurriculumStage("sigmoid_descent", small, EARLY_STAGE_WEIGHTS,
                        [target("sigmoid_descent")], budget=budgets[1], T=20,
                        max_added=1),
        CurriculumStage("gauss_newton", big, EARLY_STAGE_WEIGHTS,
                        [target("gauss_newton")], budget=budgets[2], T=12,
                        max_added=3),
        CurriculumStage("sketched_gauss_newton", big, COMPLEXITY_STAGE_WEIGHTS,
                        [target("sketched_gauss_newton")], budget=budgets[3], T=12,
                        max_added=3, sketch_size=4 * n_big),
    ]


def eigen_curriculum(sizes=(5, 50, 200),
                     budgets=(3000, 3000, 6000)) -> list[CurriculumStage]:
    """Power iteration at two scales, then the sketched Gram variant."""
    n0, n1, n2 = sizes
    return [
        CurriculumStage(
            "power_iteration_small",
            InstanceSpec(EIGEN_FAMILY, n0, n0, kappa_target=2.0, spectral_gap=1.3),
            EARLY_STAGE_WEIGHTS, [target("power_iteration")],
            budget=budgets[0], T=60, max_added=2, eta_grid=(1.0,)),
        CurriculumStage(
            "power_iteration",
            InstanceSpec(EIGEN_FAMILY, n1, n1, kappa_target=100.0, spectral_gap=1.3),
            EARLY_STAGE_WEIGHTS, [target("power_iteration")],
            budget=budgets[1], T=60, max_added=2, eta_grid=(1.0,)),
        CurriculumStage(
            "sketched_power_iteration",
            InstanceSpec(EIGEN_FAMILY, n2, n2, kappa_target=100.0, spectral_gap=1.3),
            COMPLEXITY_STAGE_WEIGHTS, [target("sketched_power_iteration")],
            budget=budgets[2], T=40, max_added=4, eta_grid=(1.0,),
            sketch_size=n2 // 4),
    ]


CURRICULA = {
    "subsampled_ls_gd": subsampled_ls_gd_curriculum,
    "sketch_precondition": sketch_precondition_curriculum,
    "newton_sketch": newton_sketch_curriculum,
    "eigen": eigen_curriculum,
}
