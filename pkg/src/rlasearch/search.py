"""Monte Carlo tree / graph search over program states.

One playout = selection (UCT or UCD), expansion of a single untried
action, a uniform random rollout to a terminal program, evaluation on a
freshly sampled instance, and backpropagation along the traversed path.
In graph mode states are merged by canonical key, so one node can have
several parents and statistics flow across all of them; in tree mode
every expansion creates a fresh node.

Root advancement is gated by the LUCB rule: search stays at the current
root until the leader action's lower confidence bound clears the best
challenger's upper bound (or a playout slice is exhausted), then the
root moves to the leader's child and never backtracks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .equivalence import canonical_form, execution_equivalent
from .executor import ExecConfig, best_over_grid
from .ir import (Action, Program, apply_action, canonical_key,
                 eliminate_dead_code, legal_actions, serialize)
from .rewards import SEARCH_GRID, RewardWeights, score_trace

MCTS = "MCTS"
MCGS_UCT = "MCGS_UCT"
MCGS_UCD = "MCGS_UCD"
MODES = (MCTS, MCGS_UCT, MCGS_UCD)


@dataclass
class SearchConfig:
    mode: str = MCGS_UCD
    c: float = math.sqrt(2.0)
    budget: int = 2000
    max_depth: int = 16
    rollout_horizon: int = 6
    lucb_min_visits: int = 2
    budget_slice: int = 400
    max_len: int = 14
    seed: int = 0
    stop_on_discovery: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown search mode {self.mode!r}")
        if self.c <= 0 or self.budget < 0:
            raise ValueError("require c > 0 and budget >= 0")


@dataclass
class Edge:
    action: Action
    child_key: object
    n: int = 0
    q: float = 0.0


@dataclass
class SearchNode:
    key: object
    program: Program
    n_select: int = 0  # visits that traversed an outgoing edge; = sum of edge.n
    n_reach: int = 0  # incoming traversals; the UCD denominator
    edges: list = field(default_factory=list)
    untried: list = field(default_factory=list)
    parents: set = field(default_factory=set)
    exhausted: bool = False  # no undiscovered state remains below

    @property
    def terminal(self) -> bool:
        return self.program.terminal

    def fully_expanded(self) -> bool:
        return not self.untried


class SearchGraph:
    """Node store; merges canonical-equal states in graph mode."""

    def __init__(self, mode: str, max_len: int, seed: int = 0):
        self.mode = mode
        self.max_len = max_len
        self.seed = seed
        self.nodes: dict[object, SearchNode] = {}
        self.created = 0  # |S|
        self.expansions = 0  # |V|: expansion events
        self.redirects = 0  # expansions that landed on an existing state
        self._fresh = 0

    def _new_node(self, key: object, program: Program) -> SearchNode:
        untried = legal_actions(program, self.max_len)
        # deterministic per-node expansion order; a seeded shuffle avoids the
        # lexicographic bias of the serialization order
        rng = np.random.default_rng(np.random.SeedSequence(
            (self.seed, self.created, 911)))
        rng.shuffle(untried)
        node = SearchNode(key, program, untried=untried)
        node.exhausted = node.terminal or not untried
        self.nodes[key] = node
        self.created += 1
        return node

    def root_for(self, program: Program) -> SearchNode:
        if self.mode == MCTS:
            self._fresh += 1
            return self._new_node(("t", self._fresh), program)
        key = canonical_key(program)
        return self.nodes.get(key) or self._new_node(key, program)

    def refresh_exhausted(self, node: SearchNode) -> None:
        """A node is exhausted when nothing new is reachable below it."""
        if node.exhausted or node.untried or node.terminal:
            return
        for e in node.edges:
            if e.child_key == node.key:
                continue  # self-loops add nothing new
            child = self.nodes.get(e.child_key)
            if child is None or not child.exhausted:
                return
        node.exhausted = True

    def expand(self, node: SearchNode, action: Action) -> SearchNode:
        """Apply an untried action; merge into an existing state in graph mode."""
        child_prog = apply_action(node.program, action, self.max_len)
        self.expansions += 1
        if self.mode == MCTS:
            self._fresh += 1
            child = self._new_node(("t", self._fresh), child_prog)
        else:
            key = canonical_key(child_prog)
            child = self.nodes.get(key)
            if child is not None:
                self.redirects += 1
            else:
                child = self._new_node(key, child_prog)
        child.parents.add(node.key)
        node.edges.append(Edge(action, child.key))
        return child

    @property
    def revisit_rate(self) -> float:
        if self.expansions == 0:
            return 0.0
        return self.redirects / self.expansions

    @property
    def state_revisit_rate(self) -> float:
        """1 - |S|/|V| over expansion events."""
        if self.expansions == 0:
            return 0.0
        return 1.0 - min(self.created, self.expansions) / self.expansions


@dataclass
class SearchStats:
    playouts: int = 0
    unique_states: int = 0
    total_visits: int = 0
    revisit_rate: float = 0.0
    tau: Optional[int] = None  # playouts at first discovery; None = not found
    discovered: bool = False
    rows: list = field(default_factory=list)  # per-playout log rows

    @property
    def tau_or_inf(self) -> float:
        return float(self.tau) if self.tau is not None else float("inf")


# ---------------------------------------------------------------------------
# selection rules


def select_uct(node: SearchNode, c: float) -> Action:
    """argmax of q + c*sqrt(ln N(s) / N(s,a)); unvisited edges first."""
    if node.terminal or not node.edges:
        raise ValueError("select_uct requires a non-terminal node with edges")
    for e in node.edges:
        if e.n == 0:
            return e.action
    log_n = math.log(max(node.n_select, 1))
    best, best_score = None, -math.inf
    for e in node.edges:
        score = e.q + c * math.sqrt(log_n / e.n)
        if score > best_score + 1e-15:
            best, best_score = e, score
    return best.action


def select_ucd(node: SearchNode, graph: SearchGraph, c: float) -> Action:
    """UCT with the child state's total visit count in the bonus denominator.

    A multi-parent child's visits through other parents shrink its bonus
    here, so merged states are not over-explored.
    """
    if node.terminal or not node.edges:
        raise ValueError("select_ucd requires a non-terminal node with edges")
    for e in node.edges:
        if e.n == 0:
            return e.action
    log_n = math.log(max(node.n_select, 1))
    best, best_score = None, -math.inf
    for e in node.edges:
        denom = max(graph.nodes[e.child_key].n_reach, e.n)
        score = e.q + c * math.sqrt(log_n / denom)
        if score > best_score + 1e-15:
            best, best_score = e, score
    return best.action


def _select_edge(node: SearchNode, graph: SearchGraph, config: SearchConfig) -> Optional[Edge]:
    """UCT/UCD selection, restricted to children that can still yield news."""
    live = [e for e in node.edges
            if e.child_key != node.key
            and not graph.nodes[e.child_key].exhausted]
    pool = live or node.edges
    if not pool:
        return None
    view = SearchNode(node.key, node.program, n_select=node.n_select,
                      n_reach=node.n_reach, edges=pool)
    action = (select_ucd(view, graph, config.c) if config.mode == MCGS_UCD
              else select_uct(view, config.c))
    for e in pool:
        if e.action == action:
            return e
    raise RuntimeError("selected action has no edge")


def backpropagate(graph: SearchGraph, path: list[tuple[SearchNode, Edge]], reward: float) -> None:
    """Incremental-mean update along the traversed path."""
    for node, edge in path:
        edge.n += 1
        edge.q += (reward - edge.q) / edge.n
        node.n_select += 1
        child = graph.nodes.get(edge.child_key)
        if child is not None:
            child.n_reach += 1


def lucb_should_stop(node: SearchNode, c: float, min_visits: int = 2,
                     graph: Optional[SearchGraph] = None, ucd: bool = False) -> bool:
    """Leader's lower bound must clear the best challenger's upper bound.

    Requires the node fully expanded with every edge visited at least
    ``min_visits`` times; a single-action node stops immediately.
    """
    if not node.fully_expanded() or not node.edges:
        return False
    if len(node.edges) == 1:
        return node.edges[0].n >= min_visits
    if any(e.n < min_visits for e in node.edges):
        return False
    log_n = math.log(max(node.n_select, 2))

    def bound(e: Edge) -> float:
        denom = e.n
        if ucd and graph is not None:
            denom = max(graph.nodes[e.child_key].n_reach, e.n)
        return c * math.sqrt(log_n / denom)

    leader = max(node.edges, key=lambda e: e.q)
    challenger_score = -math.inf
    challenger = None
    for e in node.edges:
        if e is leader:
            continue
        s = e.q + bound(e)
        if s > challenger_score:
            challenger_score = s
            challenger = e
    return leader.q - bound(leader) > challenger.q + bound(challenger)


# ---------------------------------------------------------------------------
# rollout and evaluation


class ActionCache:
    """legal_actions memo keyed by the exact program text.

    Rollouts revisit the same partial programs constantly (states are
    normalized), and enumeration dominates rollout cost without this.
    """

    def __init__(self, max_len: int, cap: int = 60_000):
        self.max_len = max_len
        self.cap = cap
        self._memo: dict[tuple[str, bool], list[Action]] = {}

    def get(self, program: Program) -> list[Action]:
        key = (serialize(program), program.terminal)
        hit = self._memo.get(key)
        if hit is None:
            hit = legal_actions(program, self.max_len)
            if len(self._memo) >= self.cap:
                self._memo.clear()
            self._memo[key] = hit
        return hit


def rollout(state: Program, horizon: int, rng: np.random.Generator,
            max_len: int, cache: Optional[ActionCache] = None) -> Program:
    """Uniform random completion until TERMINATE, the horizon, or a dead end."""
    program = state
    for _ in range(horizon):
        if program.terminal:
            break
        actions = cache.get(program) if cache else legal_actions(program, max_len)
        if not actions:
            break
        choice = actions[int(rng.integers(len(actions)))]
        program = apply_action(program, choice, max_len)
        if choice.is_terminate:
            break
    return program


@dataclass
class EvaluatedPlayout:
    terminal: Program
    reward: float
    raw_reward: float
    discovered: bool


class StageEvaluator:
    """Evaluates terminal programs for one curriculum stage.

    Samples a fresh instance per playout, runs the search-time step-size
    grid, scores the weighted reward, and tests candidate programs
    against the stage target set.  Matching prefilters by normalized
    length, then compares canonical forms (cached per program), and only
    confirms a canonical match by held-out execution.
    """

    def __init__(self, stage, seed: int):
        self.stage = stage
        self.seed = seed
        self.weights: RewardWeights = stage.weights
        self.weight_sum = (stage.weights.w_acc + stage.weights.w_decay
                           + stage.weights.w_comp + stage.weights.w_cond)
        self.target_forms = [canonical_form(t) for t in stage.targets]
        self.target_lens = {len(eliminate_dead_code(t)) for t in stage.targets}
        self.exec_config: ExecConfig = stage.exec_config()
        self._match_cache: dict[bytes, bool] = {}

    def evaluate(self, terminal: Program, playout_idx: int) -> EvaluatedPlayout:
        try:
            inst = self.stage.sample_instance(int(np.random.SeedSequence(
                (self.seed, playout_idx, 17)).generate_state(1)[0]))
            _, trace = best_over_grid(
                terminal, inst, list(self.stage.eta_grid), self.stage.T,
                seed=self.seed + playout_idx, config=self.exec_config)
            raw = score_trace(trace, inst, self.weights).total
        except Exception:
            raw = 0.0
        reward = raw / self.weight_sum if self.weight_sum > 0 else 0.0
        return EvaluatedPlayout(terminal, reward, raw, self.matches_target(terminal))

    def matches_target(self, candidate: Program) -> bool:
        """Two-step equivalence against the target set, with caching."""
        if not self.target_forms or len(candidate) == 0:
            return False
        normalized = eliminate_dead_code(candidate)
        if len(normalized) not in self.target_lens:
            return False
        key = canonical_key(normalized)
        cached = self._match_cache.get(key)
        if cached is not None:
            return cached
        form = canonical_form(candidate)
        hit = False
        for t, tform in zip(self.stage.targets, self.target_forms):
            if form == tform and execution_equivalent(candidate, t):
                hit = True
                break
        if len(self._match_cache) > 100_000:
            self._match_cache.clear()
        self._match_cache[key] = hit
        return hit


# ---------------------------------------------------------------------------
# the stage search loop


def search_stage(stage, base: Program, config: SearchConfig):
    """Search one curriculum stage from ``base``; returns (program, stats).

    The returned program is the discovered target when verification
    succeeds, otherwise the best-reward terminal program seen.
    """
    graph = SearchGraph(config.mode, config.max_len, config.seed)
    root = graph.root_for(base)
    base_key = root.key
    evaluator = StageEvaluator(stage, config.seed)
    cache = ActionCache(config.max_len)
    stats = SearchStats()
    best_terminal: Optional[Program] = None
    best_reward = -math.inf
    depth = 0
    slice_used = 0
    stale = 0  # playouts since the root subtree last produced an expansion
    path_cap = 3 * config.max_len + 8

    for playout_idx in range(1, config.budget + 1):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, playout_idx)))
        path: list[tuple[SearchNode, Edge]] = []
        node = root
        # selection: descend through expanded nodes
        while (not node.terminal and node.fully_expanded() and node.edges
               and len(path) < path_cap):
            edge = _select_edge(node, graph, config)
            if edge is None:
                break
            path.append((node, edge))
            node = graph.nodes[edge.child_key]
        # expansion
        expanded = False
        if not node.terminal and node.untried:
            action = node.untried.pop(0)
            child = graph.expand(node, action)
            path.append((node, node.edges[-1]))
            node = child
            expanded = True
        # discovery check on the reached search state itself: recovery of a
        # target as a canonical state counts even if the rollout wanders on
        reached_hit = evaluator.matches_target(node.program)
        # rollout + evaluation
        terminal = rollout(node.program, config.rollout_horizon, rng,
                           config.max_len, cache)
        result = evaluator.evaluate(terminal, playout_idx)
        backpropagate(graph, path, result.reward)
        for pnode, _ in reversed(path):
            graph.refresh_exhausted(pnode)
        graph.refresh_exhausted(root)

        stats.playouts = playout_idx
        if result.raw_reward > best_reward and len(result.terminal) > 0:
            best_reward = result.raw_reward
            best_terminal = result.terminal
        if reached_hit and not result.discovered:
            result = EvaluatedPlayout(node.program, result.reward,
                                      result.raw_reward, True)
        if result.discovered and stats.tau is None:
            stats.tau = playout_idx
            stats.discovered = True
        stats.rows.append((playout_idx, depth, result.raw_reward, len(result.terminal),
                           graph.created, max(graph.expansions, 1),
                           graph.state_revisit_rate, int(result.discovered)))
        if result.discovered and config.stop_on_discovery:
            best_terminal = result.terminal
            break

        # root advancement: LUCB confidence, slice exhaustion, or staleness
        slice_used += 1
        stale = 0 if expanded else stale + 1
        stop = lucb_should_stop(root, config.c, config.lucb_min_visits,
                                graph=graph, ucd=config.mode == MCGS_UCD)
        force = (slice_used >= config.budget_slice
                 or stale >= max(20, len(root.edges) // 2)
                 or root.exhausted)
        if stop or force:
            candidates = [e for e in root.edges
                          if e.n > 0 and e.child_key != root.key
                          and not graph.nodes[e.child_key].exhausted]
            if candidates:
                leader = max(candidates, key=lambda e: e.q)
                root = graph.nodes[leader.child_key]
                depth += 1
            else:
                depth = config.max_depth  # nothing fruitful below; restart
            slice_used = 0
            stale = 0
            if root.terminal or depth >= config.max_depth or root.exhausted:
                base_node = graph.nodes[base_key]
                if stats.tau is not None or base_node.exhausted:
                    break  # the whole reachable space has been enumerated
                root = base_node
                depth = 0

    stats.unique_states = graph.created
    stats.total_visits = max(graph.expansions, 1)
    stats.revisit_rate = graph.state_revisit_rate
    return (best_terminal if best_terminal is not None else base), stats


def _budget_left(playout_idx: int, config: SearchConfig) -> int:
    return config.budget - playout_idx
