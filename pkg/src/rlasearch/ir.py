"""Symbolic program representation over typed registers.

A program is two ordered instruction lists: a setup stage executed once
and an iteration stage executed every step.  Instructions have the form
``target <- OPCODE(operand1, operand2)`` with ``NONE`` for the absent
second operand.  Search states are programs normalized by dead-code
elimination; `canonical_key` additionally renames cache registers so
that register-choice symmetries merge.

The iteration stage is a loop body: a register written there feeds both
later instructions in the same pass and earlier reads in the next pass.
Legality and dead-code analysis both account for that back edge, and the
designated direction register ``v1`` carries an implicit end-of-pass
read (the executor's iterate update).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional

from .shapes import MAT_KIND, SCALAR_KIND, VEC_KIND, Shape, mat, scalar, vec

SETUP = "setup"
ITER = "iter"
STAGES = (SETUP, ITER)

DIRECTION_REGISTER = "v1"
DEFAULT_MAX_LEN = 14


class LegalityError(Exception):
    """Program or action violates a typing/availability/stage constraint."""


class ParseError(Exception):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# registers


@dataclass(frozen=True)
class RegisterDecl:
    rid: str
    kind: str  # shape kind this register may hold
    readonly: bool
    shape: Optional[Shape] = None  # fixed shape for system registers


_CACHE_DECLS = (
    RegisterDecl("R1", MAT_KIND, False),
    RegisterDecl("R2", MAT_KIND, False),
    RegisterDecl("R3", MAT_KIND, False),
    RegisterDecl("v1", VEC_KIND, False),
    RegisterDecl("v2", VEC_KIND, False),
    RegisterDecl("v3", VEC_KIND, False),
    RegisterDecl("u1", VEC_KIND, False),
    RegisterDecl("u2", VEC_KIND, False),
    RegisterDecl("c1", SCALAR_KIND, False),
)

VEC_CACHE_ORDER = ("v1", "v2", "v3", "u1", "u2")
MAT_CACHE_ORDER = ("R1", "R2", "R3")
SCALAR_CACHE_ORDER = ("c1",)


# ---------------------------------------------------------------------------
# operator library


@dataclass(frozen=True)
class OperatorSpec:
    """One library operator: signature inference plus grammar metadata."""

    opcode: str
    arity: int
    infer: Callable[[Shape, Optional[Shape]], Optional[Shape]]
    category: str
    commutative: bool = False
    optional_second: bool = False  # SUBSAMPLING takes an optional weight vector
    insertable: bool = True  # DO_NOTHING is realized as the TERMINATE action


def _infer_vec_vec(s1: Shape, s2: Optional[Shape]) -> Optional[Shape]:
    if s2 is None or s1.kind != VEC_KIND or s2.kind != VEC_KIND or s1.dims != s2.dims:
        return None
    return s1


def _infer_dot(s1, s2):
    if s2 is None or s1.kind != VEC_KIND or s2.kind != VEC_KIND or s1.dims != s2.dims:
        return None
    return scalar()


def _infer_mat_vec(s1, s2):
    if s2 is None or s1.kind != MAT_KIND or s2.kind != VEC_KIND:
        return None
    if s1.dims[1] != s2.dims[0]:
        return None
    return vec(s1.dims[0])


def _infer_vec_mat(s1, s2):
    if s2 is None or s1.kind != VEC_KIND or s2.kind != MAT_KIND:
        return None
    if s1.dims[0] != s2.dims[0]:
        return None
    return vec(s2.dims[1])


def _infer_scalar_vec(s1, s2):
    if s2 is None or s1.kind != SCALAR_KIND or s2.kind != VEC_KIND:
        return None
    return s2


def _infer_scalar_div(s1, s2):
    if s2 is None or s1.kind != SCALAR_KIND or s2.kind != SCALAR_KIND:
        return None
    return scalar()


def _infer_mat_mat(s1, s2):
    if s2 is None or s1.kind != MAT_KIND or s2.kind != MAT_KIND:
        return None
    if s1.dims[1] != s2.dims[0]:
        return None
    return mat(s1.dims[0], s2.dims[1])


def _infer_mat_mat_trans(s1, s2):
    if s2 is None or s1.kind != MAT_KIND or s2.kind != MAT_KIND:
        return None
    if s1.dims[1] != s2.dims[1]:
        return None
    return mat(s1.dims[0], s2.dims[0])


def _infer_mat_trans_mat(s1, s2):
    if s2 is None or s1.kind != MAT_KIND or s2.kind != MAT_KIND:
        return None
    if s1.dims[0] != s2.dims[0]:
        return None
    return mat(s1.dims[1], s2.dims[1])


def _infer_mat_inv(s1, s2):
    if s2 is not None or s1.kind != MAT_KIND or s1.dims[0] != s1.dims[1]:
        return None
    return s1


def _infer_square_solve(s1, s2):
    if s2 is None or s1.kind != MAT_KIND or s2.kind != VEC_KIND:
        return None
    if s1.dims[0] != s1.dims[1] or s1.dims[0] != s2.dims[0]:
        return None
    return s2


def _infer_hhqr(s1, s2):
    if s2 is not None or s1.kind != MAT_KIND:
        return None
    return mat(s1.dims[1], s1.dims[1])


def _infer_sketch(s1, s2):
    if s2 is not None or s1.kind != MAT_KIND:
        return None
    return mat("s", s1.dims[0])


def _infer_subsampling(s1, s2):
    if s1.kind == MAT_KIND:
        lead = s1.dims[0]
        out = mat("k", s1.dims[1])
    elif s1.kind == VEC_KIND:
        lead = s1.dims[0]
        out = vec("k")
    else:
        return None
    if lead != "m":
        return None
    if s2 is not None and (s2.kind != VEC_KIND or s2.dims[0] != "m"):
        return None
    return out


def _infer_leverage(s1, s2):
    if s2 is not None or s1.kind != MAT_KIND or s1.dims[0] != "m":
        return None
    return vec("m")


def _infer_vec_unary(s1, s2):
    if s2 is not None or s1.kind != VEC_KIND:
        return None
    return s1


def _infer_diag_scale(s1, s2):
    if s2 is None or s1.kind != VEC_KIND or s2.kind != MAT_KIND:
        return None
    if s1.dims[0] != s2.dims[0]:
        return None
    return s2


def _infer_nothing(s1, s2):
    return None


_BASE_OPS = [
    OperatorSpec("VEC_VEC_ADD", 2, _infer_vec_vec, "vector arithmetic", commutative=True),
    OperatorSpec("VEC_VEC_SUB", 2, _infer_vec_vec, "vector arithmetic"),
    OperatorSpec("VEC_VEC_DOT", 2, _infer_dot, "vector arithmetic", commutative=True),
    OperatorSpec("MAT_VEC_MUL", 2, _infer_mat_vec, "matrix-vector"),
    OperatorSpec("VEC_MAT_MUL", 2, _infer_vec_mat, "matrix-vector"),
    OperatorSpec("SCALAR_VEC_MUL", 2, _infer_scalar_vec, "scalar"),
    OperatorSpec("SCALAR_DIV", 2, _infer_scalar_div, "scalar"),
    OperatorSpec("MAT_MAT_MUL", 2, _infer_mat_mat, "matrix"),
    OperatorSpec("MAT_MAT_TRANS_MUL", 2, _infer_mat_mat_trans, "matrix"),
    OperatorSpec("MAT_TRANS_MAT_MUL", 2, _infer_mat_trans_mat, "matrix"),
    OperatorSpec("MAT_INV", 1, _infer_mat_inv, "matrix"),
    OperatorSpec("TRIANGULAR_SOLVE", 2, _infer_square_solve, "matrix"),
    OperatorSpec("HHQR", 1, _infer_hhqr, "matrix"),
    OperatorSpec("SKETCH", 1, _infer_sketch, "matrix"),
    OperatorSpec("SUBSAMPLING", 2, _infer_subsampling, "sampling", optional_second=True),
    OperatorSpec("LEVERAGE_SCORE", 1, _infer_leverage, "sampling"),
    OperatorSpec("DO_NOTHING", 0, _infer_nothing, "control", insertable=False),
]

_LOGISTIC_EXTRA = [
    OperatorSpec("SIGMOID", 1, _infer_vec_unary, "elementwise"),
    OperatorSpec("DIAG_SCALE", 2, _infer_diag_scale, "elementwise"),
    OperatorSpec("ELEM_SQRT", 1, _infer_vec_unary, "elementwise"),
    OperatorSpec("LINEAR_SOLVE", 2, _infer_square_solve, "matrix"),
]

_EIGEN_EXTRA = [
    OperatorSpec("VEC_NORMALIZE", 1, _infer_vec_unary, "elementwise"),
]


@dataclass(frozen=True)
class Environment:
    """Register declarations, operator library and stage grammar for one task family."""

    name: str
    registers: dict
    library: dict
    setup_only: frozenset

    def decl(self, rid: str) -> RegisterDecl:
        try:
            return self.registers[rid]
        except KeyError:
            raise LegalityError(f"unknown register {rid!r}") from None

    def system_shapes(self) -> dict[str, Shape]:
        return {r.rid: r.shape for r in self.registers.values() if r.readonly}

    def op(self, opcode: str) -> OperatorSpec:
        try:
            return self.library[opcode]
        except KeyError:
            raise LegalityError(f"unknown opcode {opcode!r}") from None

    def stages_for(self, opcode: str) -> tuple[str, ...]:
        return (SETUP,) if opcode in self.setup_only else STAGES


def _make_env(name: str, system: list[RegisterDecl], ops: list[OperatorSpec],
              setup_only: Iterable[str]) -> Environment:
    regs = {r.rid: r for r in system}
    for r in _CACHE_DECLS:
        regs[r.rid] = r
    return Environment(name, regs, {o.opcode: o for o in ops}, frozenset(setup_only))


LINEAR = _make_env(
    "linear",
    [
        RegisterDecl("A", MAT_KIND, True, mat("m", "n")),
        RegisterDecl("b", VEC_KIND, True, vec("m")),
        RegisterDecl("x", VEC_KIND, True, vec("n")),
    ],
    _BASE_OPS,
    # one-time preprocessing cost model: factorizations and the fixed sketch
    # belong to setup for linear systems; per-step resampling stays available
    setup_only=["SKETCH", "HHQR", "MAT_INV"],
)

LOGISTIC = _make_env(
    "logistic",
    [
        RegisterDecl("A", MAT_KIND, True, mat("m", "n")),
        RegisterDecl("b", VEC_KIND, True, vec("m")),
        RegisterDecl("x", VEC_KIND, True, vec("n")),
    ],
    _BASE_OPS + _LOGISTIC_EXTRA,
    setup_only=[],
)

EIGEN = _make_env(
    "eigen",
    [
        RegisterDecl("A", MAT_KIND, True, mat("n", "n")),
        RegisterDecl("x", VEC_KIND, True, vec("n")),
    ],
    _BASE_OPS + _EIGEN_EXTRA,
    setup_only=[],
)

ENVIRONMENTS = {e.name: e for e in (LINEAR, LOGISTIC, EIGEN)}


# ---------------------------------------------------------------------------
# instructions, programs, actions


@dataclass(frozen=True)
class Instruction:
    target: str
    opcode: str
    op1: str
    op2: Optional[str] = None

    def reads(self) -> tuple[str, ...]:
        return (self.op1,) if self.op2 is None else (self.op1, self.op2)

    def text(self) -> str:
        second = self.op2 if self.op2 is not None else "NONE"
        return f"{self.target} <- {self.opcode}({self.op1}, {second})"


@dataclass(frozen=True)
class Program:
    env: str
    setup: tuple[Instruction, ...] = ()
    iteration: tuple[Instruction, ...] = ()
    terminal: bool = False

    def __len__(self) -> int:
        return len(self.setup) + len(self.iteration)

    def stage(self, stage: str) -> tuple[Instruction, ...]:
        return self.setup if stage == SETUP else self.iteration

    def environment(self) -> Environment:
        return ENVIRONMENTS[self.env]


def empty_program(env: str) -> Program:
    if env not in ENVIRONMENTS:
        raise LegalityError(f"unknown environment {env!r}")
    return Program(env)


@dataclass(frozen=True)
class Action:
    """Insert one instruction at (stage, position), or TERMINATE."""

    stage: Optional[str] = None
    position: int = 0
    instruction: Optional[Instruction] = None

    @property
    def is_terminate(self) -> bool:
        return self.instruction is None

    def sort_key(self):
        # TERMINATE first (exact-state evaluations), then iteration-stage
        # insertions (algorithms live there), then setup insertions
        if self.is_terminate:
            return (0, 0, "", "", "", "")
        ins = self.instruction
        stage_rank = 1 if self.stage == ITER else 2
        return (stage_rank, self.position, ins.opcode, ins.target,
                ins.op1, ins.op2 or "")


TERMINATE = Action()


# ---------------------------------------------------------------------------
# type checking


@dataclass
class ProgramTypes:
    """Shape dataflow facts produced by a successful typecheck."""

    setup_maps: list  # register -> Shape before each setup position (len+1 entries)
    iter_maps: list  # likewise for the iteration stage, starting from setup exit
    entry: dict  # shapes at iteration entry (= setup exit)

    def shape_out(self, stage: str, index: int) -> dict:
        maps = self.setup_maps if stage == SETUP else self.iter_maps
        return maps[index + 1]


def typecheck(p: Program, max_len: int = DEFAULT_MAX_LEN) -> ProgramTypes:
    """Validate the whole program; raises LegalityError with the violated rule."""
    env = p.environment()
    if len(p) > max_len:
        raise LegalityError(f"program length {len(p)} exceeds maximum {max_len}")

    def step(shape_map: dict, instr: Instruction, stage: str, idx: int) -> dict:
        op = env.op(instr.opcode)
        if not op.insertable:
            raise LegalityError(f"{instr.opcode} is not an executable instruction")
        if stage not in env.stages_for(instr.opcode):
            raise LegalityError(
                f"{instr.opcode} is restricted to the setup stage in {env.name} "
                f"(at {stage}[{idx}])")
        tdecl = env.decl(instr.target)
        if tdecl.readonly:
            raise LegalityError(f"write to read-only register {instr.target} at {stage}[{idx}]")
        shapes = []
        for rid in instr.reads():
            decl = env.decl(rid)
            if rid not in shape_map:
                raise LegalityError(f"register {rid} not available at {stage}[{idx}]")
            shapes.append(shape_map[rid])
        s2 = shapes[1] if len(shapes) == 2 else None
        out = op.infer(shapes[0], s2)
        if out is None:
            got = ", ".join(str(s) for s in shapes)
            raise LegalityError(f"{instr.opcode}({got}) does not unify at {stage}[{idx}]")
        if out.kind != tdecl.kind:
            raise LegalityError(
                f"target {instr.target} holds {tdecl.kind}, got {out.kind} at {stage}[{idx}]")
        nm = dict(shape_map)
        nm[instr.target] = out
        return nm

    setup_maps = [dict(env.system_shapes())]
    for i, instr in enumerate(p.setup):
        setup_maps.append(step(setup_maps[-1], instr, SETUP, i))
    entry = setup_maps[-1]
    iter_maps = [entry]
    for i, instr in enumerate(p.iteration):
        iter_maps.append(step(iter_maps[-1], instr, ITER, i))

    # loop-carried shape consistency: a register read before its first write
    # in the iteration stage sees the setup value on pass 1 and the last
    # iteration write on later passes, so those shapes must agree
    first_write: dict[str, int] = {}
    last_shape: dict[str, Shape] = {}
    for i, instr in enumerate(p.iteration):
        first_write.setdefault(instr.target, i)
        last_shape[instr.target] = iter_maps[i + 1][instr.target]
    for rid, fw in first_write.items():
        prefix_read = any(
            rid in instr.reads() and j <= fw for j, instr in enumerate(p.iteration[: fw + 1])
        )
        if prefix_read and rid in entry and last_shape[rid] != entry[rid]:
            raise LegalityError(
                f"loop-carried register {rid} changes shape across iteration passes "
                f"({entry[rid]} vs {last_shape[rid]})")
    return ProgramTypes(setup_maps, iter_maps, entry)


def is_legal(p: Program, max_len: int = DEFAULT_MAX_LEN) -> bool:
    try:
        typecheck(p, max_len)
        return True
    except LegalityError:
        return False


# ---------------------------------------------------------------------------
# action enumeration


def _register_order(env: Environment) -> dict[str, int]:
    return {rid: i for i, rid in enumerate(env.registers)}


def _target_candidates(env: Environment, kind: str, written: set[str]) -> list[str]:
    """Writable targets of a kind: written caches plus one fresh symmetry-breaking slot.

    v1 is semantically distinguished (the executor reads it), so it is always
    offered for vectors; other unwritten caches of a kind are interchangeable
    and only the first is emitted.
    """
    if kind == MAT_KIND:
        order = MAT_CACHE_ORDER
        out = [r for r in order if r in written]
    elif kind == VEC_KIND:
        order = tuple(r for r in VEC_CACHE_ORDER if r != DIRECTION_REGISTER)
        out = [DIRECTION_REGISTER] + [r for r in order if r in written]
    elif kind == SCALAR_KIND:
        order = SCALAR_CACHE_ORDER
        out = [r for r in order if r in written]
    else:
        return []
    for r in order:
        if r not in written:
            out.append(r)
            break
    return out


def legal_actions(p: Program, max_len: int = DEFAULT_MAX_LEN) -> list[Action]:
    """Every insertion preserving legality, plus TERMINATE when allowed.

    Excludes trivial symmetries: commutative operand orders beyond the
    canonical one, and the choice among interchangeable unwritten cache
    registers.
    """
    if p.terminal:
        return []
    actions: list[Action] = []
    can_terminate = len(p.iteration) > 0
    if len(p) < max_len:
        actions.extend(_insertions(p, max_len))
    if can_terminate:
        actions.append(TERMINATE)
    actions.sort(key=Action.sort_key)
    return actions


def _insertions(p: Program, max_len: int) -> list[Action]:
    env = p.environment()
    types = typecheck(p, max_len)
    written = {ins.target for ins in p.setup} | {ins.target for ins in p.iteration}
    order = _register_order(env)
    checker = _InsertionChecker(p, types)
    infer_memo: dict = {}
    target_memo = {
        kind: _target_candidates(env, kind, written)
        for kind in (MAT_KIND, VEC_KIND, SCALAR_KIND)
    }

    ops = [o for o in env.library.values() if o.insertable]
    out: list[Action] = []
    for stage in STAGES:
        body = p.stage(stage)
        maps = types.setup_maps if stage == SETUP else types.iter_maps
        stage_ops = [o for o in ops if stage in env.stages_for(o.opcode)]
        insertion_ok = checker.insertion_ok
        for pos in range(len(body) + 1):
            shape_map = maps[pos]
            avail = sorted(shape_map, key=order.__getitem__)
            for op in stage_ops:
                for o1, o2, oshape in _operand_choices(op, avail, shape_map, order,
                                                       infer_memo):
                    reads = (o1,) if o2 is None else (o1, o2)
                    for tgt in target_memo[oshape.kind]:
                        if insertion_ok(stage, pos, tgt, reads, oshape):
                            out.append(Action(stage, pos,
                                              Instruction(tgt, op.opcode, o1, o2)))
    return out


_MISSING = object()


def _operand_choices(op: OperatorSpec, avail: list[str], shape_map: dict,
                     order: dict, memo: Optional[dict] = None,
                     ) -> Iterable[tuple[str, Optional[str], Shape]]:
    if memo is None:
        memo = {}
    infer = op.infer
    code = op.opcode
    missing = _MISSING
    if op.arity == 1 or op.optional_second:
        for o1 in avail:
            key = (code, shape_map[o1], None)
            s = memo.get(key, missing)
            if s is missing:
                s = infer(shape_map[o1], None)
                memo[key] = s
            if s is not None:
                yield o1, None, s
        if op.arity == 1:
            return
    for o1 in avail:
        s1 = shape_map[o1]
        for o2 in avail:
            if op.commutative and order[o1] > order[o2]:
                continue
            key = (code, s1, shape_map[o2])
            s = memo.get(key, missing)
            if s is missing:
                s = infer(s1, shape_map[o2])
                memo[key] = s
            if s is not None:
                yield o1, o2, s


class _InsertionChecker:
    """Per-candidate validation that an insertion keeps the program legal.

    Most candidates are settled by O(1) checks on precomputed read/write
    position tables; only writes whose value is actually consumed
    downstream with a changed shape fall back to an exact suffix
    recheck, memoized on (stage, position, target, shape).  The fuzz
    tests cross-validate all of this against the full typecheck.
    """

    def __init__(self, p: Program, types: ProgramTypes):
        self.p = p
        self.env = p.environment()
        self.types = types
        self.entry = types.entry
        self.reads: dict[str, dict[str, list[int]]] = {SETUP: {}, ITER: {}}
        self.writes: dict[str, dict[str, list[int]]] = {SETUP: {}, ITER: {}}
        for stage in STAGES:
            for i, ins in enumerate(p.stage(stage)):
                for rid in set(ins.reads()):
                    self.reads[stage].setdefault(rid, []).append(i)
                self.writes[stage].setdefault(ins.target, []).append(i)
        self.iter_first_write = {r: w[0] for r, w in self.writes[ITER].items()}
        self.iter_last_write = {r: w[-1] for r, w in self.writes[ITER].items()}
        self.iter_last_shape = {
            r: types.iter_maps[w + 1][r] for r, w in self.iter_last_write.items()
        }
        # registers read in the iteration at or before their first write there
        self.iter_prefix_read: set[str] = set()
        for rid, positions in self.reads[ITER].items():
            fw = self.iter_first_write.get(rid)
            if positions and (fw is None or positions[0] <= fw):
                self.iter_prefix_read.add(rid)
        self._suffix_memo: dict[tuple, bool] = {}
        # precomputed per-register read constraint: reading rid as a new
        # prefix read is fine iff the loop value matches the entry shape
        self.read_ok: dict[str, bool] = {}
        for rid in self.iter_last_shape:
            self.read_ok[rid] = self.iter_last_shape[rid] == self.entry.get(rid)
        # write-constraint tables: (mode, shape) per stage, register, position
        self.write_table: dict[str, dict[str, list]] = {SETUP: {}, ITER: {}}
        for stage in STAGES:
            maps = types.setup_maps if stage == SETUP else types.iter_maps
            npos = len(p.stage(stage)) + 1
            regs = set(self.reads[stage]) | set(self.writes[stage])
            if stage == SETUP:
                regs |= self.iter_prefix_read
            else:
                regs |= set(self.iter_prefix_read)
            for rid in regs:
                row = []
                for pos in range(npos):
                    row.append(self._classify_write(stage, rid, pos, maps[pos].get(rid)))
                self.write_table[stage][rid] = row

    def _classify_write(self, stage: str, rid: str, pos: int, old):
        """(mode, shape): mode 0 = any shape, 1 = must equal shape, 2 = memo."""
        if self._first_read_before_write(stage, rid, pos) is not None:
            return (2, old)
        if stage == SETUP:
            if not self._has_write_at_or_after(SETUP, rid, pos) \
                    and rid in self.iter_prefix_read:
                return (3, self.entry.get(rid))  # equal-or-memo
            return (0, None)
        if not self._has_write_at_or_after(ITER, rid, pos) \
                and rid in self.iter_prefix_read:
            return (1, self.entry.get(rid))
        return (0, None)

    def _first_read_before_write(self, stage: str, rid: str, pos: int) -> Optional[int]:
        """First original index >= pos reading rid with no intervening write.

        A same-index read belonging to a writing instruction happens before
        the write, so a read at the first write position still counts.
        """
        rs = [i for i in self.reads[stage].get(rid, ()) if i >= pos]
        if not rs:
            return None
        ws = [i for i in self.writes[stage].get(rid, ()) if i >= pos]
        if ws and ws[0] < rs[0]:
            return None
        return rs[0]

    def _has_write_at_or_after(self, stage: str, rid: str, pos: int) -> bool:
        ws = self.writes[stage].get(rid, ())
        return bool(ws) and ws[-1] >= pos

    def insertion_ok(self, stage: str, pos: int, rid: str,
                     reads: tuple, out_shape: Shape) -> bool:
        row = self.write_table[stage].get(rid)
        mode, shape = row[pos] if row is not None else (0, None)
        retyped: Optional[dict] = None
        if mode == 1:
            if out_shape != shape:
                return False
        elif mode == 2 and out_shape != shape:
            res = self._suffix_ok(stage, pos, rid, out_shape)
            if res is False:
                return False
            if stage == SETUP:
                return True  # fully validated; setup reads carry no loop terms
            retyped = res
        elif mode == 3 and out_shape != shape:
            return self._suffix_ok(stage, pos, rid, out_shape) is not False
        if stage == SETUP:
            return True
        # iteration-stage loop constraints for the candidate's own register uses;
        # constraints from original reads under retyping were checked in the
        # suffix pass
        mine_is_last = not self._has_write_at_or_after(ITER, rid, pos)

        def loop_value(r: str) -> Optional[Shape]:
            if r == rid and mine_is_last:
                return out_shape
            if retyped is not None and r in retyped:
                return retyped[r]
            if r in self.iter_last_shape:
                return self.iter_last_shape[r]
            return self.entry.get(r)

        if retyped is not None or (mine_is_last and rid in self.iter_prefix_read):
            # (a) original prefix reads of rid (all before pos on this path)
            fw = self.iter_first_write.get(rid)
            prefix_rid = any(i < pos and (fw is None or i <= fw)
                             for i in self.reads[ITER].get(rid, ()))
            if prefix_rid and loop_value(rid) != self.entry.get(rid):
                return False
        # (b) the inserted instruction's reads: prefix iff no earlier write
        for r in reads:
            fw_r = self.iter_first_write.get(r)
            if fw_r is not None and fw_r < pos:
                continue
            if r == rid or retyped is not None:
                lv = loop_value(r)
                if lv is None or lv != self.entry.get(r):
                    return False
            elif fw_r is not None and not self.read_ok[r]:
                return False
        return True

    # ---- exact fallback, memoized on (stage, pos, target, shape)

    def _suffix_ok(self, stage: str, pos: int, rid: str, out_shape: Shape):
        """False when invalid; for the iteration stage, the dict of modified
        per-register end-of-pass shapes; True for a validated setup insert."""
        key = (stage, pos, rid, out_shape)
        hit = self._suffix_memo.get(key)
        if hit is None:
            hit = self._suffix_recheck(stage, pos, rid, out_shape)
            self._suffix_memo[key] = hit
        return hit

    def _suffix_recheck(self, stage: str, pos: int, rid: str, out_shape: Shape):
        maps = self.types.setup_maps if stage == SETUP else self.types.iter_maps
        shape_map = dict(maps[pos])
        shape_map[rid] = out_shape
        body = self.p.stage(stage)
        suffix_shapes: list[Shape] = []
        for ins in body[pos:]:
            s1 = shape_map.get(ins.op1)
            s2 = shape_map.get(ins.op2) if ins.op2 is not None else None
            if s1 is None or (ins.op2 is not None and s2 is None):
                return False
            out = self.env.op(ins.opcode).infer(s1, s2)
            if out is None:
                return False
            shape_map[ins.target] = out
            suffix_shapes.append(out)
        if stage == SETUP:
            return True if self._iteration_ok(shape_map) else False
        # merged end-of-pass shapes for the modified body
        last_shape: dict[str, Shape] = dict(self.iter_last_shape)
        for i, ins in enumerate(body[:pos]):
            last_shape[ins.target] = self.types.iter_maps[i + 1][ins.target]
        last_shape[rid] = out_shape
        for ins, shp in zip(body[pos:], suffix_shapes):
            last_shape[ins.target] = shp
        if not self._loop_consistent_modified(pos, rid, last_shape):
            return False
        return last_shape

    def _iteration_ok(self, entry: dict) -> bool:
        """Full iteration recheck under a modified entry map."""
        shape_map = dict(entry)
        out_shapes = []
        for ins in self.p.iteration:
            s1 = shape_map.get(ins.op1)
            s2 = shape_map.get(ins.op2) if ins.op2 is not None else None
            if s1 is None or (ins.op2 is not None and s2 is None):
                return False
            out = self.env.op(ins.opcode).infer(s1, s2)
            if out is None:
                return False
            shape_map[ins.target] = out
            out_shapes.append(out)
        # loop constraints under the new entry
        first_write: dict[str, int] = {}
        last_shape: dict[str, Shape] = {}
        for i, ins in enumerate(self.p.iteration):
            first_write.setdefault(ins.target, i)
            last_shape[ins.target] = out_shapes[i]
        for r, fw in first_write.items():
            prefix = any(r in ins.reads() for ins in self.p.iteration[: fw + 1])
            if prefix and (r not in entry or last_shape[r] != entry[r]):
                return False
        return True

    def _loop_consistent_modified(self, pos: int, rid: str,
                                  last_shape: dict) -> bool:
        """Loop constraints from original reads in the modified iteration body.

        The inserted write sits between pos-1 and pos; an original read at
        index i is a prefix read iff no write (original or inserted)
        precedes it.
        """
        for r, positions in self.reads[ITER].items():
            fw = self.iter_first_write.get(r)
            if r == rid:
                # prefix iff before the inserted write and any original write
                prefix = any(i < pos and (fw is None or i <= fw)
                             for i in positions)
            else:
                if fw is None:
                    continue
                prefix = any(i <= fw for i in positions)
            if prefix and (r not in self.entry
                           or last_shape.get(r) != self.entry[r]):
                return False
        return True


def apply_action(p: Program, a: Action, max_len: int = DEFAULT_MAX_LEN) -> Program:
    """Insert (or terminate) and normalize by dead-code elimination."""
    if p.terminal:
        raise LegalityError("cannot act on a terminal program")
    if a.is_terminate:
        if not p.iteration:
            raise LegalityError("TERMINATE requires a non-empty iteration stage")
        return replace(p, terminal=True)
    if len(p) >= max_len:
        raise LegalityError(f"program already at maximum length {max_len}")
    body = list(p.stage(a.stage))
    if not 0 <= a.position <= len(body):
        raise LegalityError(f"insertion position {a.position} out of range")
    body.insert(a.position, a.instruction)
    if a.stage == SETUP:
        candidate = replace(p, setup=tuple(body))
    else:
        candidate = replace(p, iteration=tuple(body))
    typecheck(candidate, max_len)  # raises LegalityError naming the constraint
    return normalize(candidate)


# ---------------------------------------------------------------------------
# dead-code elimination


def _live_flags(p: Program) -> tuple[list[bool], list[bool]]:
    """Overwrite-based deadness, one stage pass at a time.

    An instruction is dead exactly when its target is overwritten before
    any read of the written value.  A value that is never overwritten is
    always kept (it persists to the end of the run), which is what lets
    multi-instruction setup pipelines be built one insertion at a time.
    Setup values are additionally overwritten by the iteration stage's
    first write of the same register, observable only through reads that
    precede it (pass-one prefix reads).
    """

    def read_between(body, lo: int, hi: int, rid: str) -> bool:
        # reads attached to instruction hi (its operands) happen before its write
        for k in range(lo + 1, hi + 1):
            if k < len(body) and rid in body[k].reads():
                return True
        return False

    iter_first_write: dict[str, int] = {}
    for i, ins in enumerate(p.iteration):
        iter_first_write.setdefault(ins.target, i)

    def iter_prefix_reads(rid: str) -> bool:
        fw = iter_first_write.get(rid, len(p.iteration))
        return any(rid in ins.reads() for ins in p.iteration[: fw + 1])

    setup_flags: list[bool] = []
    for i, ins in enumerate(p.setup):
        rid = ins.target
        nxt = next((j for j in range(i + 1, len(p.setup)) if p.setup[j].target == rid), None)
        if nxt is not None:
            setup_flags.append(read_between(p.setup, i, nxt, rid))
        elif rid in iter_first_write:
            live = any(rid in other.reads() for other in p.setup[i + 1 :]) \
                or iter_prefix_reads(rid)
            setup_flags.append(live)
        else:
            setup_flags.append(True)

    iter_flags: list[bool] = []
    for i, ins in enumerate(p.iteration):
        rid = ins.target
        nxt = next((j for j in range(i + 1, len(p.iteration))
                    if p.iteration[j].target == rid), None)
        if nxt is None:
            iter_flags.append(True)
        else:
            iter_flags.append(read_between(p.iteration, i, nxt, rid))
    return setup_flags, iter_flags


def eliminate_dead_code(p: Program) -> Program:
    """Iteratively drop instructions overwritten before any observable read."""
    return dce_with_survivors(p)[0]


def dce_with_survivors(p: Program) -> tuple[Program, list[int], list[int]]:
    """DCE plus the original indices of the surviving instructions."""
    cur = p
    setup_idx = list(range(len(p.setup)))
    iter_idx = list(range(len(p.iteration)))
    while True:
        sf, itf = _live_flags(cur)
        if all(sf) and all(itf):
            return cur, setup_idx, iter_idx
        setup_idx = [i for i, keep in zip(setup_idx, sf) if keep]
        iter_idx = [i for i, keep in zip(iter_idx, itf) if keep]
        cur = replace(
            cur,
            setup=tuple(ins for ins, keep in zip(cur.setup, sf) if keep),
            iteration=tuple(ins for ins, keep in zip(cur.iteration, itf) if keep),
        )


# ---------------------------------------------------------------------------
# canonical renaming, scheduling, and keys


def canonical_schedule(p: Program) -> Program:
    """Deterministically reorder data-independent instructions.

    Within a stage, instructions form a dependency DAG (read-after-write,
    write-after-read, write-after-write on the same register); any
    topological order computes identical register values, so states
    reached by different insertion orders merge.  Greedy list scheduling
    with a fixed tie-break key picks the canonical order.
    """
    return replace(p, setup=_schedule_stage(p.setup), iteration=_schedule_stage(p.iteration))


def _schedule_stage(body: tuple[Instruction, ...]) -> tuple[Instruction, ...]:
    n = len(body)
    if n <= 1:
        return body
    deps: list[set[int]] = [set() for _ in range(n)]
    for j in range(n):
        for i in range(j):
            a, b = body[i], body[j]
            if (a.target in b.reads() or b.target in a.reads()
                    or a.target == b.target):
                deps[j].add(i)
    done: list[int] = []
    placed = [False] * n
    keys = [(ins.opcode, ins.target, ins.op1, ins.op2 or "") for ins in body]
    for _ in range(n):
        ready = [i for i in range(n)
                 if not placed[i] and all(placed[d] for d in deps[i])]
        nxt = min(ready, key=lambda i: (keys[i], i))
        placed[nxt] = True
        done.append(nxt)
    return tuple(body[i] for i in done)


def canonical_rename(p: Program) -> Program:
    """Rename cache registers into first-write order; v1 is pinned.

    Register choice among interchangeable caches is a trivial symmetry;
    renaming collapses it so that state merging sees one program.
    """
    mapping: dict[str, str] = {DIRECTION_REGISTER: DIRECTION_REGISTER}
    counters = {MAT_KIND: iter(MAT_CACHE_ORDER),
                VEC_KIND: iter(r for r in VEC_CACHE_ORDER if r != DIRECTION_REGISTER),
                SCALAR_KIND: iter(SCALAR_CACHE_ORDER)}
    env = p.environment()

    def canon(rid: str) -> str:
        if rid in mapping or env.decl(rid).readonly:
            return mapping.get(rid, rid)
        mapping[rid] = next(counters[env.decl(rid).kind])
        return mapping[rid]

    def rename_stage(body: tuple[Instruction, ...]) -> tuple[Instruction, ...]:
        out = []
        for ins in body:
            op1 = mapping.get(ins.op1, ins.op1)
            op2 = mapping.get(ins.op2, ins.op2) if ins.op2 is not None else None
            out.append(Instruction(canon(ins.target), ins.opcode, op1, op2))
        return tuple(out)

    # operand occurrences always follow an earlier write, except reads of
    # system registers, so walking in program order is sufficient
    setup = rename_stage(p.setup)
    iteration = rename_stage(p.iteration)
    return replace(p, setup=setup, iteration=iteration)


def normalize(p: Program) -> Program:
    """The canonical search state: DCE, canonical schedule, canonical names."""
    return canonical_rename(canonical_schedule(eliminate_dead_code(p)))


def canonical_key(p: Program) -> bytes:
    """Injective serialization of the normalized program."""
    text = serialize(normalize(p))
    if p.terminal:
        text += "#terminal\n"
    return text.encode()


# ---------------------------------------------------------------------------
# symbolic canonicalization


def canonicalize_symbolic(p: Program) -> Program:
    """Apply the algebraic rewrite set to a fixed point.

    Rules: (i) collapse matvec/vec-mat pairs computing M^T(Mw) or M(M^T w)
    into a single Gram-product operation; (ii) drop multiplications by a
    register statically known to hold an identity; (iii) normalize chains
    of scalar multiplications into canonical operand order; plus two
    normalizations the equivalence contract requires: hoisting of
    deterministic loop-invariant instructions into the setup stage and
    canonical re-allocation of cache registers.  Semantics are preserved;
    the result is compared via its serialization for the equivalence check.
    """
    cur = eliminate_dead_code(p)
    for _ in range(64):
        nxt = _rewrite_once(cur)
        if nxt is None:
            break
        cur = eliminate_dead_code(nxt)
    cur = canonical_schedule(cur)
    cur = _canonical_alloc(cur)
    return canonical_rename(canonical_schedule(eliminate_dead_code(cur)))


def _rewrite_once(p: Program) -> Optional[Program]:
    for fn in (_hoist_loop_invariant, _collapse_gram_pair, _drop_identity_products,
               _normalize_scalar_chains):
        out = fn(p)
        if out is not None:
            return out
    return None


_STOCHASTIC_OPS = frozenset({"SKETCH", "SUBSAMPLING"})


def _hoist_loop_invariant(p: Program) -> Optional[Program]:
    """Move a deterministic iteration instruction with setup-constant operands
    to the end of the setup stage.

    Requires the target to be written exactly once in the iteration and
    never read before that write (so every pass sees the same value either
    way).  This makes a one-time product computed per step compare equal
    to the same product precomputed in setup.
    """
    # the iterate register changes every pass through the update rule
    iter_written = {ins.target for ins in p.iteration} | {"x"}
    writes: dict[str, int] = {}
    for ins in p.iteration:
        writes[ins.target] = writes.get(ins.target, 0) + 1
    prefix = _loop_carried(p)
    for idx, ins in enumerate(p.iteration):
        if ins.opcode in _STOCHASTIC_OPS:
            continue
        if writes[ins.target] != 1 or ins.target in prefix:
            continue
        if any(r in iter_written for r in ins.reads()):
            continue
        new_iter = p.iteration[:idx] + p.iteration[idx + 1 :]
        cand = replace(p, setup=p.setup + (ins,), iteration=new_iter)
        if is_legal(cand, max_len=max(DEFAULT_MAX_LEN, len(cand))):
            return cand
    return None


def _stage_replace(p: Program, stage: str, body: list[Instruction]) -> Program:
    if stage == SETUP:
        return replace(p, setup=tuple(body))
    return replace(p, iteration=tuple(body))


def _collapse_gram_pair(p: Program) -> Optional[Program]:
    """Collapse two-step Gram applications into a single matrix operation.

    Pattern 1: [u <- MAT_VEC_MUL(M, w); v <- VEC_MAT_MUL(u, M)] computes
    M^T(Mw) and becomes [G <- MAT_TRANS_MAT_MUL(M, M); v <- MAT_VEC_MUL(G, w)].
    Pattern 2: [u <- VEC_MAT_MUL(w, M); v <- MAT_VEC_MUL(M, u)] computes
    M(M^T w) and becomes [G <- MAT_MAT_TRANS_MUL(M, M); v <- MAT_VEC_MUL(G, w)].

    Requires u and M and w unwritten between the pair and the intermediate
    value consumed only by the pair.
    """
    for stage in STAGES:
        body = list(p.stage(stage))
        for j, ins_j in enumerate(body):
            if ins_j.opcode == "VEC_MAT_MUL":
                u, M, gram_op = ins_j.op1, ins_j.op2, "MAT_TRANS_MAT_MUL"
                inner_op = "MAT_VEC_MUL"

                def inner_match(ins):
                    return ins.opcode == inner_op and ins.op1 == M

                def inner_w(ins):
                    return ins.op2
            elif ins_j.opcode == "MAT_VEC_MUL":
                M, u, gram_op = ins_j.op1, ins_j.op2, "MAT_MAT_TRANS_MUL"
                inner_op = "VEC_MAT_MUL"

                def inner_match(ins):
                    return ins.opcode == inner_op and ins.op2 == M

                def inner_w(ins):
                    return ins.op1
            else:
                continue
            if u is None or u == M:
                continue
            for i in range(j - 1, -1, -1):
                ins_i = body[i]
                if ins_i.target == u:
                    if not inner_match(ins_i):
                        break
                    w = inner_w(ins_i)
                    between = body[i + 1 : j]
                    touched = {b.target for b in between}
                    if M in touched or w in touched or u in touched:
                        break
                    if any(u in b.reads() for b in between):
                        break
                    # the intermediate must die at j unless j overwrites it
                    if ins_j.target != u and (_read_after(p, stage, j, u)
                                              or u == DIRECTION_REGISTER):
                        break
                    gram = _free_matrix_cache(p, stage, i, j, {M, w, u, ins_j.target})
                    if gram is None:
                        break
                    if stage == ITER and gram in _loop_carried(p):
                        break
                    newb = list(body)
                    newb[j] = Instruction(ins_j.target, "MAT_VEC_MUL", gram, w)
                    newb[i] = Instruction(gram, gram_op, M, M)
                    cand = _stage_replace(p, stage, newb)
                    if is_legal(cand, max_len=max(DEFAULT_MAX_LEN, len(cand))):
                        return cand
                    break
                if ins_i.target == M:
                    break
    return None


def _read_after(p: Program, stage: str, j: int, rid: str) -> bool:
    """Is rid's value at position j+1 observable later (incl. the loop edge)?"""
    body = p.stage(stage)
    for ins in body[j + 1 :]:
        if rid in ins.reads():
            return True
        if ins.target == rid:
            return False
    if stage == SETUP:
        for ins in p.iteration:
            if rid in ins.reads():
                return True
            if ins.target == rid:
                return False
        return rid == DIRECTION_REGISTER
    # iteration: value survives to the update read and the next pass
    if rid == DIRECTION_REGISTER:
        return True
    fw = next((k for k, ins in enumerate(p.iteration) if ins.target == rid), None)
    for k, ins in enumerate(p.iteration):
        if rid in ins.reads() and (fw is None or k <= fw):
            return True
    return False


def _loop_carried(p: Program) -> set[str]:
    out = set()
    first_write = {}
    for k, ins in enumerate(p.iteration):
        first_write.setdefault(ins.target, k)
    for k, ins in enumerate(p.iteration):
        for rid in ins.reads():
            fw = first_write.get(rid)
            if fw is not None and k <= fw:
                out.add(rid)
    return out


def _free_matrix_cache(p: Program, stage: str, i: int, j: int, used: set[str]) -> Optional[str]:
    for cand in MAT_CACHE_ORDER:
        if cand in used:
            continue
        # safe if cand's current value is dead at position i and it is not
        # read between i and j
        body = p.stage(stage)
        if any(cand in ins.reads() for ins in body[i:j + 1]):
            continue
        if _read_after(p, stage, j, cand):
            continue
        if stage == SETUP and any(cand in ins.reads() or ins.target == cand
                                  for ins in p.iteration):
            continue
        return cand
    return None


def _identity_registers(p: Program) -> dict[str, set[int]]:
    """Static value lattice {IDENTITY, OTHER} per register per stage index.

    Nothing in the operator library constructs an identity from the system
    registers, so this is dormant on reachable programs; it exists for
    completeness of the rewrite set.
    """
    ident: set[str] = set()
    out: dict[str, set[int]] = {SETUP: set(), ITER: set()}
    for stage in STAGES:
        for idx, ins in enumerate(p.stage(stage)):
            produced = False
            if ins.opcode in ("MAT_INV", "HHQR") and ins.op1 in ident:
                produced = True
            if ins.opcode in ("MAT_MAT_MUL", "MAT_MAT_TRANS_MUL", "MAT_TRANS_MAT_MUL") \
               and ins.op1 in ident and ins.op2 in ident:
                produced = True
            if produced:
                ident.add(ins.target)
                out[stage].add(idx)
            else:
                ident.discard(ins.target)
    return out


def _drop_identity_products(p: Program) -> Optional[Program]:
    ident = _identity_registers(p)
    for stage in STAGES:
        body = list(p.stage(stage))
        ident_regs: set[str] = set()
        for idx, ins in enumerate(body):
            if idx in ident[stage]:
                ident_regs.add(ins.target)
                continue
            # v <- I @ X becomes a forward rename of v's reads to X
            sub = None
            if ins.opcode in ("MAT_MAT_MUL", "MAT_VEC_MUL") and ins.op1 in ident_regs:
                sub = ins.op2
            elif ins.opcode == "MAT_MAT_MUL" and ins.op2 in ident_regs:
                sub = ins.op1
            if sub is not None and _substitutable(p, stage, body, idx, ins.target, sub):
                newb = body[:idx] + _substitute_forward(body[idx + 1 :], ins.target, sub)
                return _stage_replace(p, stage, newb)
            ident_regs.discard(ins.target)
    return None


def _substitutable(p: Program, stage: str, body: list[Instruction], idx: int,
                   old: str, new: str) -> bool:
    """Safe to delete ``old <- I @ new`` and redirect old's readers to new?

    Conservative: all reads of old's value must sit in the same stage
    after idx, before any rewrite of old or new, and off the loop edge.
    """
    if old == DIRECTION_REGISTER:
        return False
    if stage == ITER and (old in _loop_carried(p) or new in _loop_carried(p)):
        return False
    if stage == SETUP and any(old in ins.reads() for ins in p.iteration):
        return False
    for k in range(idx + 1, len(body)):
        if body[k].target == old:
            return True  # old rewritten; our value has no readers past here
        if body[k].target == new:
            # new changes; any later read of old would see the wrong value
            return not any(old in body[j].reads() for j in range(k, len(body)))
    return True


def _substitute_forward(rest: list[Instruction], old: str, new: str) -> list[Instruction]:
    out: list[Instruction] = []
    done = False
    for ins in rest:
        if done or ins.target == old:
            done = done or ins.target == old
            out.append(ins)
            continue
        op1 = new if ins.op1 == old else ins.op1
        op2 = new if ins.op2 == old else ins.op2
        out.append(Instruction(ins.target, ins.opcode, op1, op2))
    return out


def _canonical_alloc(p: Program) -> Program:
    """Canonically re-pack cache-register values (SSA extraction + first fit).

    Programs that differ only in how they reuse cache registers for the
    same value chain compare equal after this pass.  The direction
    register and loop-carried registers keep their identity; allocation
    failure falls back to the input program.
    """
    env = p.environment()
    pinned = _loop_carried(p)
    instrs = [(SETUP, ins) for ins in p.setup] + [(ITER, ins) for ins in p.iteration]
    horizon = len(instrs)
    v1_pool_ok = DIRECTION_REGISTER not in pinned

    cur_val: dict[str, int] = {}
    val_reg: dict[int, str] = {}
    val_def: dict[int, int] = {}
    val_last: dict[int, int] = {}
    slots: list[tuple[Optional[int], Optional[int], Optional[int]]] = []
    next_id = 0

    def tracked(rid: Optional[str]) -> bool:
        if rid is None or env.decl(rid).readonly or rid in pinned:
            return False
        return rid != DIRECTION_REGISTER or v1_pool_ok

    for pos, (stage, ins) in enumerate(instrs):
        read_ids = []
        for r in (ins.op1, ins.op2):
            if tracked(r) and r in cur_val:
                v = cur_val[r]
                val_last[v] = pos
                read_ids.append(v)
            else:
                read_ids.append(None)
        tid = None
        if tracked(ins.target):
            tid = next_id
            next_id += 1
            cur_val[ins.target] = tid
            val_reg[tid] = ins.target
            val_def[tid] = pos
            val_last[tid] = pos
        slots.append((read_ids[0], read_ids[1], tid))

    # the end-of-pass update reads the final v1 value each pass
    if v1_pool_ok and cur_val.get(DIRECTION_REGISTER) is not None:
        val_last[cur_val[DIRECTION_REGISTER]] = horizon
    v1_values = [v for v in range(next_id) if val_reg[v] == DIRECTION_REGISTER]
    v1_defs = sorted(val_def[v] for v in v1_values)

    def next_v1_def_after(pos: int) -> int:
        for d in v1_defs:
            if d > pos:
                return d
        return horizon + 1

    pools = {
        MAT_KIND: [r for r in MAT_CACHE_ORDER if r not in pinned],
        VEC_KIND: ([DIRECTION_REGISTER] if v1_pool_ok else [])
        + [r for r in VEC_CACHE_ORDER if r != DIRECTION_REGISTER and r not in pinned],
        SCALAR_KIND: [r for r in SCALAR_CACHE_ORDER if r not in pinned],
    }
    busy = {r: -1 for rs in pools.values() for r in rs}
    assign: dict[int, str] = {}
    for v in range(next_id):
        if val_reg[v] == DIRECTION_REGISTER:
            # direction-register values keep their carrier
            if busy[DIRECTION_REGISTER] > val_def[v]:
                return p
            assign[v] = DIRECTION_REGISTER
            busy[DIRECTION_REGISTER] = val_last[v]
            continue
        kind = env.decl(val_reg[v]).kind
        for r in pools[kind]:
            if busy[r] > val_def[v]:
                continue
            if r == DIRECTION_REGISTER:
                nxt = next_v1_def_after(val_def[v])
                # a temp may sit in v1 only when a real v1 write follows
                # before the update read and before the temp's last use
                if nxt > horizon or val_last[v] > nxt:
                    continue
            assign[v] = r
            busy[r] = val_last[v]
            break
        else:
            return p

    out: list[list[Instruction]] = [[], []]
    for pos, (stage, ins) in enumerate(instrs):
        r1, r2, tid = slots[pos]
        op1 = assign[r1] if r1 is not None else ins.op1
        op2 = assign[r2] if r2 is not None else ins.op2
        tgt = assign[tid] if tid is not None else ins.target
        out[0 if stage == SETUP else 1].append(Instruction(tgt, ins.opcode, op1, op2))
    cand = replace(p, setup=tuple(out[0]), iteration=tuple(out[1]))
    return cand if is_legal(cand, max_len=max(DEFAULT_MAX_LEN, len(cand))) else p


def _normalize_scalar_chains(p: Program) -> Optional[Program]:
    """Order the multipliers of nested SCALAR_VEC_MUL chains canonically."""
    for stage in STAGES:
        body = list(p.stage(stage))
        for j in range(1, len(body)):
            ins_j = body[j]
            if ins_j.opcode != "SCALAR_VEC_MUL":
                continue
            i = j - 1
            ins_i = body[i]
            if ins_i.opcode != "SCALAR_VEC_MUL" or ins_i.target != ins_j.op2:
                continue
            sa, sb = ins_i.op1, ins_j.op1
            if sa <= sb:
                continue
            if _read_after(p, stage, j, ins_i.target) and ins_i.target != ins_j.target:
                continue
            newb = list(body)
            newb[i] = Instruction(ins_i.target, "SCALAR_VEC_MUL", sb, ins_i.op2)
            newb[j] = Instruction(ins_j.target, "SCALAR_VEC_MUL", sa, ins_j.op2)
            cand = _stage_replace(p, stage, newb)
            if is_legal(cand, max_len=max(DEFAULT_MAX_LEN, len(cand))):
                return cand
    return None


# ---------------------------------------------------------------------------
# text format


def serialize(p: Program) -> str:
    """Fixed text format: stage headers, one instruction per line, LF endings."""
    lines = ["[SETUP]"]
    lines.extend(ins.text() for ins in p.setup)
    lines.append("[ITER]")
    lines.extend(ins.text() for ins in p.iteration)
    return "\n".join(lines) + "\n"


def parse(text: str, env: str = "linear", max_len: int = DEFAULT_MAX_LEN) -> Program:
    """Parse the program text format; rejects malformed or illegal programs."""
    if env not in ENVIRONMENTS:
        raise ParseError(f"unknown environment {env!r}", 0)
    environment = ENVIRONMENTS[env]
    setup: list[Instruction] = []
    iteration: list[Instruction] = []
    current: Optional[list[Instruction]] = None
    seen = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[SETUP]":
            if "[SETUP]" in seen:
                raise ParseError("duplicate [SETUP] header", lineno)
            if seen:
                raise ParseError("[SETUP] must precede [ITER]", lineno)
            seen.append("[SETUP]")
            current = setup
            continue
        if line == "[ITER]":
            if "[ITER]" in seen:
                raise ParseError("duplicate [ITER] header", lineno)
            if "[SETUP]" not in seen:
                raise ParseError("[ITER] before [SETUP]", lineno)
            seen.append("[ITER]")
            current = iteration
            continue
        if current is None:
            raise ParseError("instruction before any stage header", lineno)
        current.append(_parse_instruction(line, lineno, environment))
    if "[SETUP]" not in seen or "[ITER]" not in seen:
        raise ParseError("missing stage header", len(text.splitlines()) + 1)
    prog = Program(env, tuple(setup), tuple(iteration))
    try:
        typecheck(prog, max_len=max(max_len, len(prog)))
    except LegalityError as e:
        line = _locate_instruction(text, prog, str(e))
        raise ParseError(str(e), line) from None
    return prog


def _parse_instruction(line: str, lineno: int, env: Environment) -> Instruction:
    if "<-" not in line:
        raise ParseError(f"expected 'target <- OPCODE(a, b)', got {line!r}", lineno)
    lhs, rhs = (part.strip() for part in line.split("<-", 1))
    if lhs not in env.registers:
        raise ParseError(f"unknown register {lhs!r}", lineno)
    if env.registers[lhs].readonly:
        raise ParseError(f"write to read-only register {lhs}", lineno)
    if "(" not in rhs or not rhs.endswith(")"):
        raise ParseError(f"malformed operand list in {rhs!r}", lineno)
    opcode, argtext = rhs[:-1].split("(", 1)
    opcode = opcode.strip()
    if opcode not in env.library:
        raise ParseError(f"unknown opcode {opcode!r}", lineno)
    args = [a.strip() for a in argtext.split(",")]
    if len(args) != 2:
        raise ParseError(f"expected two operands, got {len(args)}", lineno)
    op1 = args[0]
    op2 = None if args[1] == "NONE" else args[1]
    if op1 == "NONE":
        raise ParseError("first operand cannot be NONE", lineno)
    for a in (op1, op2):
        if a is not None and a not in env.registers:
            raise ParseError(f"unknown register {a!r}", lineno)
    return Instruction(lhs, opcode, op1, op2)


def _locate_instruction(text: str, prog: Program, err: str) -> int:
    # best-effort line attribution for typecheck failures
    import re

    m = re.search(r"at (setup|iter)\[(\d+)\]", err)
    if not m:
        return 0
    stage, idx = m.group(1), int(m.group(2))
    want = prog.stage(stage)[idx].text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if raw.strip() == want:
            return lineno
    return 0
