"""Runs symbolic programs against problem instances.

One execution binds the symbolic dimension labels to the instance, runs
the setup stage once, then T iteration passes.  After every pass the
environment update rule is applied to the iterate:

- linear / logistic: ``x <- x - eta * v1`` (an unwritten v1 reads as a
  zero vector, and a v1 whose runtime shape does not match x is a no-op
  update -- partial programs stay executable and simply score poorly);
- eigen: ``x <- v1`` (replacement; normalization is the program's job).

Stochastic operators draw from substreams keyed by the master seed, the
step index and content fingerprints: subsample index sets are shared
within a step between calls with equal weights (so ``S_t A`` and
``S_t b`` see the same rows), and sketches are keyed by their operand's
bytes.  Dead code therefore never shifts a live instruction's stream,
replay is deterministic, and the eta grid and canonical-form-equal
programs all see common random numbers.

Programs whose update can never move the iterate (direction register
unwritten, no loop-carried registers) run a single representative pass
and extrapolate: every pass is observably identical, so the trace is
constant and the FLOP total scales linearly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .ir import (
    DIRECTION_REGISTER,
    ITER,
    SETUP,
    Instruction,
    Program,
    dce_with_survivors,
    typecheck,
)
from .kernels import DenseValue, FlopCounter, KernelError, NumericError
from .shapes import MAT_KIND, SCALAR_KIND, VEC_KIND, Shape

OK = "OK"
DIVERGED = "DIVERGED"
NUMERIC_ERROR = "NUMERIC_ERROR"

DIVERGENCE_FACTOR = 1e3


@dataclass
class ExecConfig:
    """Execution-time knobs: bound dimensions and resource guards."""

    sketch_size: Optional[int] = None  # default 4n
    subsample_size: Optional[int] = None  # default min(4n, m)
    max_elements: int = 30_000_000  # per materialized value
    max_op_flops: float = 2e9  # true arithmetic per kernel call
    max_total_flops: float = 8e9  # true arithmetic per execution
    divergence_factor: float = DIVERGENCE_FACTOR

    def bind(self, m: int, n: int) -> dict[str, int]:
        s = self.sketch_size if self.sketch_size is not None else 4 * n
        k = self.subsample_size if self.subsample_size is not None else min(4 * n, m)
        return {"m": m, "n": n, "s": max(1, s), "k": max(1, k)}


@dataclass
class ExecutionTrace:
    """Metric history, FLOP total and numeric status of one run."""

    residuals: list[float]
    flops: int
    final_x: np.ndarray
    status: str
    eta: float
    note: str = ""
    setup_registers: dict = field(default_factory=dict)
    setup_write_order: list = field(default_factory=list)

    @property
    def final_residual(self) -> float:
        return self.residuals[-1]


class StepSamplingContext:
    """Per-step cache of subsample index sets keyed by the weight vector.

    The first subsampling call of a step draws indices; later calls in
    the same step with equal weights reuse them, keeping the sampled
    rows of A and b consistent.
    """

    def __init__(self, step: int):
        self.step = step
        self.cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    @staticmethod
    def weights_key(weights: Optional[np.ndarray]) -> str:
        if weights is None:
            return "uniform"
        return hashlib.sha1(np.ascontiguousarray(weights).tobytes()).hexdigest()


def _norm(v: np.ndarray) -> float:
    return math.sqrt(float(v @ v))


def _metric_linear(A: np.ndarray, b: np.ndarray, x: np.ndarray) -> float:
    denom = _norm(b) or 1.0
    return _norm(A @ x - b) / denom


def logistic_metric(X: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """Cross-entropy objective sum log(1 + exp(-y_i x_i^T w)), overflow-safe."""
    z = -y * (X @ w)
    return float(np.sum(np.logaddexp(0.0, z)))


def rayleigh_quotient(A: np.ndarray, v: np.ndarray) -> float:
    nv = float(v @ v)
    if nv == 0.0:
        raise NumericError("Rayleigh quotient of the zero vector")
    return float(v @ (A @ v)) / nv


@dataclass
class _PlanStep:
    stage: str
    index: int
    ins: Instruction
    out_shape: Shape
    canon: int  # canonical stream slot; >= 100000 marks dead code
    true_cost: float
    invariant: bool = False  # deterministic with pass-constant operands
    cached: object = None  # (value, charged_flops) after the first pass


class _Runtime:
    """Precompiled instruction plan plus the register file for one run."""

    def __init__(self, program: Program, inst, eta: float, seed: int, config: ExecConfig):
        self.program = program
        self.env = program.environment()
        self.inst = inst
        self.eta = eta
        self.seed = int(seed)
        self.config = config
        self.binding = config.bind(inst.m, inst.n)
        self.binding["s"] = min(self.binding["s"], inst.m)
        self.flops = FlopCounter()
        self.regs: dict[str, DenseValue] = {}
        self.v1_written = False
        self._sketch_occurrences: dict[tuple[int, int], int] = {}

        sys_shapes = self.env.system_shapes()
        self.regs["A"] = DenseValue.of(sys_shapes["A"], inst.A)
        if "b" in sys_shapes:
            self.regs["b"] = DenseValue.of(sys_shapes["b"], inst.b)
        if program.env == "eigen":
            x0 = np.ones(inst.n) / math.sqrt(inst.n)
        else:
            x0 = np.zeros(inst.n)
        self.x_shape = sys_shapes["x"]
        self.regs["x"] = DenseValue.of(self.x_shape, x0)
        self.setup_plan, self.iter_plan = self._compile()

    # ---- plan construction

    def _compile(self) -> tuple[list[_PlanStep], list[_PlanStep]]:
        types = typecheck(self.program, max_len=max(64, len(self.program)))
        _, setup_idx, iter_idx = dce_with_survivors(self.program)
        canon: dict[tuple[str, int], int] = {}
        for stage, survivors, base in ((SETUP, setup_idx, 0), (ITER, iter_idx, 1000)):
            pos = {orig: j for j, orig in enumerate(survivors)}
            for i in range(len(self.program.stage(stage))):
                canon[(stage, i)] = base + pos[i] if i in pos else 100_000 + base + i
        plans: dict[str, list[_PlanStep]] = {SETUP: [], ITER: []}
        # pass-constant registers: never written in the iteration, except
        # the iterate register, which the update rewrites
        iter_targets = {ins.target for ins in self.program.iteration} | {"x"}
        for stage in (SETUP, ITER):
            maps = types.setup_maps if stage == SETUP else types.iter_maps
            for i, ins in enumerate(self.program.stage(stage)):
                out_shape = maps[i + 1][ins.target]
                self._guard_elements(out_shape)
                cost = self._true_cost(ins, maps[i], out_shape)
                if cost > self.config.max_op_flops:
                    raise NumericError("resource guard: kernel arithmetic exceeds cap")
                invariant = (stage == ITER
                             and ins.opcode not in ("SKETCH", "SUBSAMPLING")
                             and not any(r in iter_targets for r in ins.reads()))
                plans[stage].append(_PlanStep(stage, i, ins, out_shape,
                                              canon[(stage, i)], cost, invariant))
        return plans[SETUP], plans[ITER]

    def _dims(self, shape: Shape) -> tuple[int, ...]:
        return shape.concrete(self.binding)

    def _guard_elements(self, shape: Shape) -> None:
        n_el = 1
        for d in self._dims(shape):
            n_el *= d
        if n_el > self.config.max_elements:
            raise NumericError(f"resource guard: {n_el} elements exceeds cap")

    def _true_cost(self, ins: Instruction, shape_map: dict, out_shape: Shape) -> float:
        op = ins.opcode
        s1 = shape_map[ins.op1]
        if op in ("MAT_MAT_MUL", "MAT_MAT_TRANS_MUL", "MAT_TRANS_MAT_MUL"):
            r, c = self._dims(s1)
            od = self._dims(out_shape)
            return 2.0 * r * c * od[0] * od[1] / (r if op != "MAT_TRANS_MAT_MUL" else c)
        if op in ("MAT_VEC_MUL", "VEC_MAT_MUL"):
            mshape = s1 if s1.kind == MAT_KIND else shape_map[ins.op2]
            r, c = self._dims(mshape)
            return 2.0 * r * c
        if op in ("MAT_INV", "HHQR", "LINEAR_SOLVE"):
            d = self._dims(s1)
            return 2.0 * d[0] * d[-1] ** 2
        if op == "SKETCH":
            return float(min(self.binding["s"], self._dims(s1)[0]) * self._dims(s1)[0])
        if op == "DIAG_SCALE":
            r, c = self._dims(shape_map[ins.op2])
            return float(r * c)
        dims = self._dims(out_shape)
        n_el = 1
        for d in dims:
            n_el *= d
        return 4.0 * n_el

    def guard_totals(self, T: int) -> None:
        setup_cost = sum(p.true_cost for p in self.setup_plan)
        iter_cost = sum(p.true_cost for p in self.iter_plan)
        if setup_cost + T * iter_cost > self.config.max_total_flops:
            raise NumericError("resource guard: execution arithmetic budget exhausted")

    # ---- streams

    def stream(self, *key_parts: int) -> np.random.Generator:
        # integer-tuple hashes are stable across processes, so this keying
        # is deterministic; a SplitMix-style mix feeds PCG64 directly,
        # which is much cheaper than SeedSequence spawning
        mix = hash((self.seed,) + key_parts) & 0xFFFFFFFFFFFFFFFF
        mix = (mix ^ (mix >> 30)) * 0xBF58476D1CE4E5B9 & 0xFFFFFFFFFFFFFFFF
        mix = (mix ^ (mix >> 27)) * 0x94D049BB133111EB & 0xFFFFFFFFFFFFFFFF
        return np.random.Generator(np.random.PCG64(mix ^ (mix >> 31)))

    def _sketch_stream(self, step_plan: _PlanStep, operand: DenseValue,
                       step: int) -> np.random.Generator:
        """Sketch randomness keyed by step and operand content.

        Content keying makes dead code inert and gives canonical-form-equal
        programs identical sketches; repeated same-step sketches of one
        value stay independent through an occurrence counter that only
        live instructions advance.
        """
        if step_plan.canon >= 100_000:  # dead instruction: private stream
            return self.stream(step, 999_983, step_plan.canon)
        fp = int.from_bytes(
            hashlib.sha1(np.ascontiguousarray(operand.data).tobytes()).digest()[:6], "big")
        occ = self._sketch_occurrences.get((step, fp), 0)
        self._sketch_occurrences[(step, fp)] = occ + 1
        return self.stream(step, 424_243, fp, occ)

    # ---- metric and dispatch

    def metric(self) -> float:
        x = self.regs["x"].data
        if self.program.env == "linear":
            return _metric_linear(self.inst.A, self.inst.b, x)
        if self.program.env == "logistic":
            return logistic_metric(self.inst.A, self.inst.b, x)
        return rayleigh_quotient(self.inst.A, x)

    def run_step(self, plan: _PlanStep, ctx: Optional[StepSamplingContext], step: int) -> None:
        ins = plan.ins
        if plan.invariant and plan.cached is not None:
            # deterministic op on pass-constant inputs: reuse the value but
            # charge the model cost of executing it again
            out, charged = plan.cached
            self.flops.add(charged)
        else:
            before = self.flops.total
            out = self._dispatch(plan, ctx, step)
            if plan.invariant:
                plan.cached = (out, self.flops.total - before)
        if ins.target == DIRECTION_REGISTER:
            self.v1_written = True
        self.regs[ins.target] = out

    def _dispatch(self, plan: _PlanStep, ctx: Optional[StepSamplingContext],
                  step: int) -> DenseValue:
        ins = plan.ins
        op = ins.opcode
        a = self.regs[ins.op1]
        bv = self.regs[ins.op2] if ins.op2 is not None else None
        out_shape = plan.out_shape
        f = self.flops
        if op == "MAT_VEC_MUL":
            return kernels.matvec(a, bv, f)
        if op == "VEC_MAT_MUL":
            return kernels.vec_mat(a, bv, f)
        if op == "VEC_VEC_ADD":
            return kernels.vec_add(a, bv, f)
        if op == "VEC_VEC_SUB":
            return kernels.vec_sub(a, bv, f)
        if op == "VEC_VEC_DOT":
            return kernels.vec_dot(a, bv, f)
        if op == "SCALAR_VEC_MUL":
            return kernels.scalar_vec(a, bv, f)
        if op == "SCALAR_DIV":
            return kernels.scalar_div(a, bv, f)
        if op == "MAT_MAT_MUL":
            return kernels.mat_mat(a, bv, f, out_shape)
        if op == "MAT_MAT_TRANS_MUL":
            return kernels.mat_mat_trans(a, bv, f, out_shape)
        if op == "MAT_TRANS_MAT_MUL":
            return kernels.mat_trans_mat(a, bv, f, out_shape)
        if op == "MAT_INV":
            return kernels.mat_inv(a, f)
        if op == "TRIANGULAR_SOLVE":
            return kernels.triangular_solve(a, bv, f)
        if op == "LINEAR_SOLVE":
            return kernels.linear_solve(a, bv, f)
        if op == "HHQR":
            _, R = kernels.hhqr(a, f)
            return R
        if op == "SIGMOID":
            return kernels.sigmoid(a, f)
        if op == "ELEM_SQRT":
            return kernels.elem_sqrt(a, f)
        if op == "VEC_NORMALIZE":
            return kernels.vec_normalize(a, f)
        if op == "LEVERAGE_SCORE":
            return kernels.leverage_weights(a, f)
        if op == "SKETCH":
            rng = self._sketch_stream(plan, a, step)
            rows_in = a.data.shape[0]
            s_eff = min(self.binding["s"], rows_in)
            return kernels.sketch_matrix(s_eff, rows_in, rng, f, out_shape)
        if op == "SUBSAMPLING":
            return self._subsample(a, bv, out_shape, ctx, step)
        raise kernels.ShapeError(f"opcode {op} is not executable")

    def _subsample(self, X: DenseValue, weights: Optional[DenseValue],
                   out_shape: Shape, ctx: Optional[StepSamplingContext],
                   step: int) -> DenseValue:
        m = X.data.shape[0]
        k = self.binding["k"]
        warr = None
        if weights is not None:
            warr = np.clip(weights.data, 0.0, None)
            total = float(warr.sum())
            if total <= 0:
                raise NumericError("subsampling weights sum to zero")
            warr = warr / total
        key = StepSamplingContext.weights_key(warr)
        if ctx is not None and key in ctx.cache:
            idx, probs = ctx.cache[key]
        else:
            digest = int.from_bytes(hashlib.sha1(key.encode()).digest()[:6], "big")
            rng = self.stream(step, 7_000_000, digest)
            idx, probs = kernels.draw_subsample_indices(m, k, warr, rng)
            if ctx is not None:
                ctx.cache[key] = (idx, probs)
        return kernels.subsample_rows(X, idx, probs, self.flops, out_shape)

    # ---- update rule

    def apply_update(self) -> None:
        x = self.regs["x"]
        v1 = self.regs.get(DIRECTION_REGISTER)
        if self.program.env == "eigen":
            if (self.v1_written and v1 is not None
                    and v1.data.shape == x.data.shape
                    and _norm(v1.data) > 0.0):
                self.regs["x"] = DenseValue(self.x_shape, v1.data.copy())
            return
        if v1 is None or v1.data.shape != x.data.shape:
            return  # zero-default / shape-guarded no-op update
        v1.check_finite()
        self.regs["x"] = DenseValue(self.x_shape, x.data - self.eta * v1.data)
        self.flops.add(2 * x.data.shape[0])


def _is_static(program: Program) -> bool:
    """True when no pass can change anything observable: the direction
    register is never written and no register carries values between
    passes, so all passes are exchangeable."""
    targets = {ins.target for ins in program.setup} | {ins.target for ins in program.iteration}
    if DIRECTION_REGISTER in targets:
        return False
    first_write: dict[str, int] = {}
    for i, ins in enumerate(program.iteration):
        first_write.setdefault(ins.target, i)
    for i, ins in enumerate(program.iteration):
        for rid in ins.reads():
            fw = first_write.get(rid)
            if fw is not None and i <= fw:
                return False
    return True


def execute(program: Program, inst, eta: float, T: int, seed: int = 0,
            config: Optional[ExecConfig] = None) -> ExecutionTrace:
    """Run setup once and T iteration passes; record the metric each step."""
    if program.env != inst.env:
        raise kernels.ShapeError(
            f"program environment {program.env} does not match instance {inst.env}")
    if eta <= 0 or T < 1:
        raise ValueError("require eta > 0 and T >= 1")
    cfg = config or ExecConfig()
    history: list[float] = []
    setup_written: dict[str, None] = {}

    with np.errstate(all="ignore"):
        try:
            rt = _Runtime(program, inst, eta, seed, cfg)
            rt.guard_totals(T)
        except KernelError as e:
            x0 = (np.ones(inst.n) / math.sqrt(inst.n) if inst.env == "eigen"
                  else np.zeros(inst.n))
            return ExecutionTrace([float("nan")], 0, x0, NUMERIC_ERROR, eta, str(e))

        def trace(status: str, note: str = "") -> ExecutionTrace:
            setup_regs = {rid: rt.regs[rid] for rid in setup_written if rid in rt.regs}
            return ExecutionTrace(history, rt.flops.total, rt.regs["x"].data.copy(),
                                  status, eta, note, setup_regs, list(setup_written))

        try:
            for plan in rt.setup_plan:
                rt.run_step(plan, None, step=0)
                setup_written.pop(plan.ins.target, None)
                setup_written[plan.ins.target] = None  # keep last-write order
            r0 = rt.metric()
            history.append(r0)
        except KernelError as e:
            history = history or [float("nan")]
            return trace(NUMERIC_ERROR, str(e))

        if _is_static(program):
            # all passes are observably identical: run one for error
            # detection, then extrapolate the trace and the charged cost
            setup_charged = rt.flops.total
            try:
                ctx = StepSamplingContext(1)
                for plan in rt.iter_plan:
                    rt.run_step(plan, ctx, step=1)
            except KernelError as e:
                history.append(r0)
                return trace(NUMERIC_ERROR, str(e))
            iter_charged = rt.flops.total - setup_charged
            rt.flops.total = setup_charged + T * iter_charged
            history.extend([r0] * T)
            return trace(OK)

        threshold = cfg.divergence_factor * max(abs(r0), 1e-300)
        for t in range(1, T + 1):
            ctx = StepSamplingContext(t)
            try:
                for plan in rt.iter_plan:
                    rt.run_step(plan, ctx, step=t)
                rt.apply_update()
                r = rt.metric()
            except KernelError as e:
                return trace(NUMERIC_ERROR, str(e))
            history.append(r)
            if not math.isfinite(r):
                return trace(DIVERGED, f"non-finite metric at step {t}")
            if program.env != "eigen" and r > threshold:
                return trace(DIVERGED,
                             f"metric exceeded {cfg.divergence_factor} x r0 at step {t}")
        return trace(OK)


_STATUS_RANK = {OK: 0, DIVERGED: 1, NUMERIC_ERROR: 2}


def best_over_grid(program: Program, inst, grid: list[float], T: int, seed: int = 0,
                   config: Optional[ExecConfig] = None) -> tuple[float, ExecutionTrace]:
    """Execute once per step size with common random numbers; keep the best.

    Best = smallest final metric among the healthiest status class; ties
    break toward the smaller eta.  For the eigen environment "smallest"
    means the largest Rayleigh quotient, via the sign flip below.
    """
    if not grid:
        raise ValueError("step-size grid must be nonempty")
    sign = -1.0 if program.env == "eigen" else 1.0
    values = sorted(grid)
    if _is_static(program):
        values = values[:1]  # the update can never fire; eta is irrelevant
    best: Optional[tuple[int, float, float]] = None
    best_trace: Optional[ExecutionTrace] = None
    for eta in values:
        tr = execute(program, inst, eta, T, seed=seed, config=config)
        final = tr.final_residual
        score = sign * (final if math.isfinite(final) else float("inf"))
        key = (_STATUS_RANK[tr.status], score, eta)
        if best is None or key < best:
            best = key
            best_trace = tr
    return best_trace.eta, best_trace
