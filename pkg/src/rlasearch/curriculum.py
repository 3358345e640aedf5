"""Curriculum staging: sequential discovery, promotion, ablations, reports.

A curriculum is an ordered list of stages; each stage searches from the
previous stage's discovered program and succeeds when a playout terminal
is semantically equivalent to a stage target.  On failure the curriculum
aborts (the default), so cumulative playout counts reflect the cost of
the attempt.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .equivalence import programs_equivalent
from .executor import ExecConfig
from .instances import InstanceSpec, ProblemInstance, generate_instance
from .ir import DEFAULT_MAX_LEN, Program, empty_program, serialize
from .rewards import SEARCH_GRID, RewardWeights
from .search import SearchConfig, SearchStats, search_stage


class CurriculumError(Exception):
    pass


@dataclass
class CurriculumStage:
    """Instance family, reward weights, targets and budget for one stage."""

    name: str
    spec: InstanceSpec
    weights: RewardWeights
    targets: list[Program]
    budget: int = 2000
    T: int = 25
    eta_grid: tuple = SEARCH_GRID
    max_added: int = 6  # insertion headroom over the stage base
    sketch_size: Optional[int] = None
    subsample_size: Optional[int] = None
    reward_threshold: Optional[float] = None  # open-discovery mode

    def exec_config(self) -> ExecConfig:
        return ExecConfig(sketch_size=self.sketch_size, subsample_size=self.subsample_size)

    def sample_instance(self, seed: int) -> ProblemInstance:
        return generate_instance(self.spec, seed)

    @property
    def env(self) -> str:
        return self.spec.env


@dataclass
class StageReport:
    name: str
    success: bool
    tau: Optional[int]
    playouts: int
    seconds: float
    program_text: str
    best_reward: float = 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "success": self.success,
            "tau": self.tau,
            "playouts": self.playouts,
            "seconds": self.seconds,
            "program": self.program_text,
            "best_reward": self.best_reward,
        }


@dataclass
class CurriculumReport:
    stages: list[StageReport] = field(default_factory=list)
    overall_success: bool = False
    rows: list = field(default_factory=list)  # concatenated per-playout logs

    @property
    def cumulative_playouts(self) -> int:
        return sum(s.playouts for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "overall_success": self.overall_success,
            "cumulative_playouts": self.cumulative_playouts,
            "stages": [s.to_dict() for s in self.stages],
        }


def check_discovery(candidate: Program, stage: CurriculumStage) -> bool:
    """True iff the candidate is equivalent to some stage target."""
    return any(programs_equivalent(candidate, t, 5) for t in stage.targets)


def validate_curriculum(stages: list[CurriculumStage]) -> None:
    if not stages:
        raise CurriculumError("curriculum has no stages")
    env = stages[0].env
    base_len = 0
    for st in stages:
        if st.env != env:
            raise CurriculumError(
                f"stage {st.name!r} environment {st.env} differs from {env}")
        if not st.targets and st.reward_threshold is None:
            raise CurriculumError(f"stage {st.name!r} has neither targets nor a threshold")
        for t in st.targets:
            if t.env != env:
                raise CurriculumError(f"target of stage {st.name!r} is for {t.env}")
        # edit-distance sanity: insertions never shrink a program, so the
        # shortest target must be reachable within the added-length budget
        if st.targets:
            min_len = min(len(t) for t in st.targets)
            if min_len - base_len > st.max_added:
                raise CurriculumError(
                    f"stage {st.name!r}: target needs {min_len - base_len} insertions, "
                    f"budget allows {st.max_added}")
            base_len = min(len(t) for t in st.targets)


def run_curriculum(stages: list[CurriculumStage], config: SearchConfig, seed: int = 0,
                   continue_on_failure: bool = False) -> CurriculumReport:
    """Run stages sequentially, promoting each discovery to the next base.

    ``continue_on_failure`` is an analysis mode that substitutes the stage
    target as the next base after a failed stage; reports flag it.
    """
    validate_curriculum(stages)
    report = CurriculumReport()
    base = empty_program(stages[0].env)
    for idx, stage in enumerate(stages):
        stage_seed = int(np.random.SeedSequence((seed, idx, 101)).generate_state(1)[0])
        max_len = min(DEFAULT_MAX_LEN, len(base) + stage.max_added)
        cfg = replace(config, budget=stage.budget, seed=stage_seed, max_len=max_len)
        t0 = time.perf_counter()
        program, stats = search_stage(stage, base, cfg)
        seconds = time.perf_counter() - t0
        success = stats.discovered
        if not success and stage.reward_threshold is not None:
            best = max((r[2] for r in stats.rows), default=0.0)
            success = best >= stage.reward_threshold
        best_reward = max((r[2] for r in stats.rows), default=0.0)
        report.stages.append(StageReport(
            stage.name, success, stats.tau, stats.playouts, seconds,
            serialize(replace(program, terminal=False)), best_reward))
        report.rows.append((stage.name, stats.rows))
        if success:
            base = replace(program, terminal=False)
        elif continue_on_failure and stage.targets:
            base = replace(stage.targets[0], terminal=False)
        else:
            report.overall_success = False
            return report
    report.overall_success = all(s.success for s in report.stages)
    return report


def ablation_variants(full: list[CurriculumStage]) -> list[tuple[str, list[CurriculumStage]]]:
    """No-curriculum plus every interior-skip variant, budgets preserved.

    The no-curriculum variant searches the final target directly with the
    summed budget; each skip variant removes one interior stage and folds
    its budget (and insertion headroom) into the following stage, so a
    failure attributes to the missing stage rather than lost budget.
    """
    validate_curriculum(full)
    total_budget = sum(s.budget for s in full)
    final = full[-1]
    no_curriculum = replace(
        _copy_stage(final), budget=total_budget,
        max_added=min(DEFAULT_MAX_LEN, max(len(t) for t in final.targets)),
        name=f"no_curriculum:{final.name}")
    variants: list[tuple[str, list[CurriculumStage]]] = [
        ("no_curriculum", [no_curriculum])]
    for skip in range(1, len(full) - 1):
        stages = []
        for i, st in enumerate(full):
            if i == skip:
                continue
            st2 = _copy_stage(st)
            if i == skip + 1:
                st2.budget += full[skip].budget
                st2.max_added += full[skip].max_added
            stages.append(st2)
        variants.append((f"skip:{full[skip].name}", stages))
    return variants


def _copy_stage(st: CurriculumStage) -> CurriculumStage:
    return CurriculumStage(
        name=st.name, spec=st.spec, weights=st.weights, targets=list(st.targets),
        budget=st.budget, T=st.T, eta_grid=st.eta_grid, max_added=st.max_added,
        sketch_size=st.sketch_size, subsample_size=st.subsample_size,
        reward_threshold=st.reward_threshold)
