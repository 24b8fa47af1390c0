"""Branch and bound over LP relaxations with pluggable branching strategies."""

from __future__ import annotations

import heapq
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .lp import Basis, LinearProgram, LpSolution, Status, lp_resolve, lp_solve

logger = logging.getLogger(__name__)

INT_TOL = 1e-6
SB_EPS = 1e-6
INFEASIBLE_GAIN = 1e20
DEFAULT_ETA = 8


class PolicyContractError(RuntimeError):
    """A branching strategy returned something other than a candidate."""


@dataclass
class MipProblem:
    lp: LinearProgram
    integer_set: np.ndarray
    name: str = ""

    def __post_init__(self):
        I = np.unique(np.asarray(self.integer_set, dtype=np.int64))
        if I.size and (I[0] < 0 or I[-1] >= self.lp.n_vars):
            raise ValueError("integer_set out of range")
        for bnd in (self.lp.lower[I], self.lp.upper[I]):
            fin = bnd[np.isfinite(bnd)]
            if np.any(np.abs(fin - np.round(fin)) > 0):
                raise ValueError("integer variables need integral bounds")
        self.integer_set = I

    @property
    def objective_is_integral(self) -> bool:
        c = self.lp.c
        mask = np.zeros(self.lp.n_vars, dtype=bool)
        mask[self.integer_set] = True
        return bool(np.all(c[~mask] == 0) and np.all(c[mask] == np.round(c[mask])))


@dataclass
class Limits:
    node_limit: int | None = None
    time_limit: float | None = None
    gap_limit: float | None = None


class PseudoCostState:
    """Per-variable sums and counts of per-unit dual bound gains."""

    def __init__(self, n_vars: int, eta: int = DEFAULT_ETA):
        self.eta = eta
        self.down_sum = np.zeros(n_vars)
        self.down_count = np.zeros(n_vars, dtype=np.int64)
        self.up_sum = np.zeros(n_vars)
        self.up_count = np.zeros(n_vars, dtype=np.int64)

    def update(self, var: int, direction: str, gain: float, distance: float) -> None:
        if not math.isfinite(gain) or gain >= INFEASIBLE_GAIN or distance <= 0:
            return
        per_unit = max(gain, 0.0) / distance
        if direction == "down":
            self.down_sum[var] += per_unit
            self.down_count[var] += 1
        else:
            self.up_sum[var] += per_unit
            self.up_count[var] += 1

    def down_average(self, var: int) -> float:
        return self.down_sum[var] / self.down_count[var] if self.down_count[var] else 0.0

    def up_average(self, var: int) -> float:
        return self.up_sum[var] / self.up_count[var] if self.up_count[var] else 0.0

    def reliability(self, var: int) -> int:
        return int(min(self.down_count[var], self.up_count[var]))

    def is_reliable(self, var: int) -> bool:
        return self.reliability(var) >= self.eta


@dataclass
class BnbNode:
    id: int
    parent_id: int | None
    depth: int
    bound_changes: tuple
    dual_bound: float
    lower: np.ndarray
    upper: np.ndarray
    warm: Basis | None = None
    lp_solution: LpSolution | None = None
    # branching that created this node: (var, "down"/"up", distance, parent objective)
    origin: tuple | None = None
    from_lookahead: bool = False
    # prefix product / prefix sum of branching factors along the root path
    path_prod: float = 1.0
    path_sum: float = 1.0


@dataclass
class Event:
    t_ms: float
    nodes: int
    p: float | None
    d: float
    gap: float


@dataclass
class Checkpoint:
    budget: float
    p: float | None
    d: float
    gap: float
    nodes: int
    tse: float | None

    @property
    def omega(self) -> bool:
        return self.p is None


class SearchTree:
    """Open nodes, incumbent, bounds, counters and leaf statistics."""

    def __init__(self):
        self._heap: list = []
        self.best_first = False
        self.incumbent: np.ndarray | None = None
        self.p: float | None = None
        self.d = -math.inf
        self.created = 0
        self.solved = 0
        self.pruned = 0
        self.processed = 0
        self.branchings = 0
        self.depth_counts: dict[int, int] = {}
        self.events: list[Event] = []
        self._leaf_weight = 0.0
        self._leaf_weighted_size = 0.0
        self.leaves = 0

    def _key(self, node: BnbNode, prefer: int):
        if self.best_first:
            # equal bounds are common in bin packing; deeper nodes first keeps diving
            return (node.dual_bound, -node.depth, prefer, node.id)
        return (-node.depth, prefer, node.id)

    def push(self, node: BnbNode, prefer: int = 0) -> None:
        self.created += 1
        self.depth_counts[node.depth] = self.depth_counts.get(node.depth, 0) + 1
        heapq.heappush(self._heap, (self._key(node, prefer), prefer, node))

    def pop(self) -> BnbNode:
        return heapq.heappop(self._heap)[2]

    def switch_to_best_first(self) -> None:
        if self.best_first:
            return
        self.best_first = True
        self._heap = [(self._key(n, pref), pref, n) for _, pref, n in self._heap]
        heapq.heapify(self._heap)

    @property
    def open_nodes(self) -> list[BnbNode]:
        return [entry[2] for entry in self._heap]

    def __len__(self) -> int:
        return len(self._heap)

    def open_bound(self) -> float:
        if not self._heap:
            return math.inf
        return min(entry[2].dual_bound for entry in self._heap)

    def record_leaf(self, node: BnbNode) -> None:
        w = 1.0 / node.path_prod
        self._leaf_weight += w
        self._leaf_weighted_size += w * node.path_sum
        self.leaves += 1

    def leaf_estimate(self) -> float | None:
        if self._leaf_weight == 0:
            return None
        return self._leaf_weighted_size / self._leaf_weight


def relative_gap(p: float | None, d: float | None) -> float:
    """``|p - d| / min(|p|, |d|)``; +inf without an incumbent."""
    if p is None or d is None or not math.isfinite(p) or not math.isfinite(d):
        return math.inf
    diff = abs(p - d)
    if diff <= 1e-9 * max(1.0, abs(p)):
        return 0.0
    denom = min(abs(p), abs(d))
    if denom < 1e-12:
        return math.inf
    return diff / denom


def fractionality(value: float) -> float:
    return min(value - math.floor(value), math.ceil(value) - value)


def fractional_candidates(sol: LpSolution, integer_set) -> list[int]:
    x = sol.x
    return [int(i) for i in integer_set if fractionality(x[i]) > INT_TOL]


def tree_size_estimate(tree: SearchTree) -> float:
    """Weighted-backtrack estimate of the final tree size.

    Each finished leaf predicts the tree it would be if every level on its
    path branched like the observed path (sum of prefix products of branching
    factors). Leaves are weighted by the inverse of that product, so a fully
    explored tree is reproduced exactly. Without any finished leaf the raw
    created-node count is returned.
    """
    est = tree.leaf_estimate()
    if est is None or tree.processed < 2 and tree.leaves == 0:
        return float(tree.created)
    return est


@dataclass
class BranchingContext:
    mip: MipProblem
    node: BnbNode
    lp: LinearProgram
    solution: LpSolution
    candidates: list[int]
    pseudocosts: PseudoCostState
    rng: np.random.Generator
    tree: SearchTree
    lookahead: dict = field(default_factory=dict)

    def fraction(self, var: int) -> float:
        x = self.solution.x[var]
        return x - math.floor(x)


class BranchingStrategy(Protocol):
    name: str

    def select(self, ctx: BranchingContext) -> int: ...


def _child_gain(child: LpSolution, node_obj: float) -> float:
    if child.status == Status.INFEASIBLE:
        return INFEASIBLE_GAIN
    if child.status != Status.OPTIMAL:
        return 0.0
    return max(child.objective - node_obj, 0.0)


def strong_branch_score(ctx: BranchingContext, var: int) -> tuple[float, float, float]:
    """Solve both children of ``var`` and score them with the product rule."""
    if var not in ctx.candidates:
        raise ValueError(f"variable {var} is not a branching candidate")
    if var in ctx.lookahead:
        down_gain, up_gain, score, _, _ = ctx.lookahead[var]
        return down_gain, up_gain, score
    x = ctx.solution.x[var]
    lo, up = ctx.lp.lower[var], ctx.lp.upper[var]
    basis = ctx.solution.basis
    down = lp_resolve(ctx.lp, basis, [(var, lo, math.floor(x))])
    upc = lp_resolve(ctx.lp, basis, [(var, math.ceil(x), up)])
    node_obj = ctx.solution.objective
    dg, ug = _child_gain(down, node_obj), _child_gain(upc, node_obj)
    score = max(dg, SB_EPS) * max(ug, SB_EPS)
    ctx.lookahead[var] = (dg, ug, score, down, upc)
    return dg, ug, score


def _argmax_lowest(candidates, scores) -> int:
    best_var, best = candidates[0], scores[0]
    for v, s in zip(candidates[1:], scores[1:]):
        if s > best:
            best_var, best = v, s
    return best_var


def _record_lookahead(ctx: BranchingContext, var: int) -> None:
    dg, ug, _ = strong_branch_score(ctx, var)
    f = ctx.fraction(var)
    ctx.pseudocosts.update(var, "down", dg, f)
    ctx.pseudocosts.update(var, "up", ug, 1.0 - f)


def select_strong(ctx: BranchingContext) -> int:
    """Full strong branching: score every candidate, lowest index on ties."""
    if not ctx.candidates:
        raise ValueError("no branching candidates")
    if len(ctx.candidates) == 1:
        var = ctx.candidates[0]
        _record_lookahead(ctx, var)
        return var
    scores = []
    for var in ctx.candidates:
        _record_lookahead(ctx, var)
        scores.append(ctx.lookahead[var][2])
    return _argmax_lowest(ctx.candidates, scores)


def select_reliable_pseudocost(ctx: BranchingContext) -> int:
    """Pseudo-cost products, with strong branching on unreliable variables."""
    if not ctx.candidates:
        raise ValueError("no branching candidates")
    pc = ctx.pseudocosts
    scores = []
    for var in ctx.candidates:
        if not pc.is_reliable(var):
            _record_lookahead(ctx, var)
            scores.append(ctx.lookahead[var][2])
            continue
        f = ctx.fraction(var)
        down = pc.down_average(var) * f
        up = pc.up_average(var) * (1.0 - f)
        scores.append(max(down, SB_EPS) * max(up, SB_EPS))
    return _argmax_lowest(ctx.candidates, scores)


class StrongBranching:
    name = "sb"

    def select(self, ctx: BranchingContext) -> int:
        return select_strong(ctx)


class ReliablePseudoCost:
    name = "rpc"

    def select(self, ctx: BranchingContext) -> int:
        return select_reliable_pseudocost(ctx)


class RandomBranching:
    """Uniform choice among candidates, driven by the run seed."""

    name = "random"

    def select(self, ctx: BranchingContext) -> int:
        return int(ctx.candidates[int(ctx.rng.integers(len(ctx.candidates)))])


class FirstFractional:
    name = "first"

    def select(self, ctx: BranchingContext) -> int:
        return ctx.candidates[0]


def branch(tree: SearchTree, node: BnbNode, var: int, x_var: float,
           node_bound: float, next_id: int) -> tuple[BnbNode, BnbNode]:
    """Split ``node`` on ``var`` into ``x <= floor`` and ``x >= ceil`` children."""
    fl, ce = math.floor(x_var), math.ceil(x_var)
    if fl == ce:
        raise ValueError(f"variable {var} is integral at {x_var}")
    prod = node.path_prod * 2
    psum = node.path_sum + prod
    d_up = node.upper.copy()
    d_up[var] = fl
    down = BnbNode(next_id, node.id, node.depth + 1, node.bound_changes + ((var, "upper", fl),),
                   node_bound, node.lower, d_up, origin=(var, "down", x_var - fl, node_bound),
                   path_prod=prod, path_sum=psum)
    u_lo = node.lower.copy()
    u_lo[var] = ce
    up = BnbNode(next_id + 1, node.id, node.depth + 1, node.bound_changes + ((var, "lower", ce),),
                 node_bound, u_lo, node.upper, origin=(var, "up", ce - x_var, node_bound),
                 path_prod=prod, path_sum=psum)
    return down, up


@dataclass
class SolveResult:
    status: str  # optimal | infeasible | unbounded | node_limit | time_limit | gap_limit
    incumbent: np.ndarray | None
    p: float | None
    d: float
    gap: float
    nodes: int
    nodes_created: int
    branchings: int
    events: list[Event]
    checkpoints: list[Checkpoint]
    tse_trace: list[tuple[int, int, float | None]]
    time_s: float
    pseudocosts: PseudoCostState | None = None

    @property
    def exhausted(self) -> bool:
        return self.status in ("optimal", "infeasible")

    @property
    def omega(self) -> bool:
        return self.p is None


def _accept_incumbent(mip: MipProblem, x: np.ndarray) -> tuple[np.ndarray, float] | None:
    lp = mip.lp
    xr = x.copy()
    xr[mip.integer_set] = np.round(xr[mip.integer_set])
    if np.any(xr < lp.lower - 1e-9) or np.any(xr > lp.upper + 1e-9):
        return None
    if lp.n_rows:
        act = lp.A @ xr
        scale = 1.0 + np.abs(lp.A).max(axis=1).toarray().ravel()
        viol = act - lp.b
        for i, s in enumerate(lp.senses):
            tol = 1e-6 * scale[i]
            if (s == "L" and viol[i] > tol) or (s == "E" and abs(viol[i]) > tol):
                return None
    return xr, float(lp.c @ xr)


def solve(mip: MipProblem, strategy: BranchingStrategy, limits: Limits | None = None,
          seed: int = 0, checkpoints=(), checkpoint_unit: str = "nodes",
          pseudocosts: PseudoCostState | None = None) -> SolveResult:
    """Best-first branch and bound with depth-first plunging to the first incumbent.

    ``checkpoints`` are budget rungs (processed nodes or elapsed seconds, per
    ``checkpoint_unit``) at which a snapshot of (p, d, gap, nodes, tse) is taken.
    """
    limits = limits or Limits()
    rng = np.random.default_rng(seed)
    lp = mip.lp
    pc = pseudocosts if pseudocosts is not None else PseudoCostState(lp.n_vars)
    tree = SearchTree()
    integral_obj = mip.objective_is_integral
    rungs = sorted(float(r) for r in checkpoints)
    snaps: list[Checkpoint] = []
    tse_trace: list[tuple[int, int, float | None]] = []
    start = time.perf_counter()
    next_id = 1

    def elapsed() -> float:
        return time.perf_counter() - start

    def cutoff(bound: float) -> bool:
        if tree.p is None:
            return False
        if integral_obj:
            return bound > tree.p - 1 + 1e-6
        return bound >= tree.p - 1e-6

    def refresh_bounds() -> bool:
        ob = tree.open_bound()
        if tree.p is not None:
            ob = min(ob, tree.p)
        if not math.isfinite(ob) and not len(tree):
            ob = tree.p if tree.p is not None else math.inf
        new_d = max(tree.d, ob)
        changed = new_d != tree.d
        tree.d = new_d
        return changed

    def log_event() -> None:
        tree.events.append(Event(elapsed() * 1000.0, tree.processed, tree.p, tree.d,
                                 relative_gap(tree.p, tree.d)))

    def snapshot(budget: float) -> None:
        tse = tree.leaf_estimate()
        snaps.append(Checkpoint(budget, tree.p, tree.d, relative_gap(tree.p, tree.d),
                                tree.processed, tse))
        tse_trace.append((tree.processed, tree.created, tse))

    def take_due_snapshots(final: bool = False) -> None:
        while rungs:
            due = final
            if checkpoint_unit == "nodes":
                due = due or tree.processed >= rungs[0]
            else:
                due = due or elapsed() >= rungs[0]
            if not due:
                break
            snapshot(rungs.pop(0))

    root = BnbNode(0, None, 0, (), -math.inf, lp.lower.copy(), lp.upper.copy())
    tree.push(root)
    status = None
    while len(tree):
        if limits.node_limit is not None and tree.processed >= limits.node_limit:
            status = "node_limit"
            break
        if limits.time_limit is not None and elapsed() >= limits.time_limit:
            status = "time_limit"
            break
        if (limits.gap_limit is not None and tree.p is not None
                and relative_gap(tree.p, tree.d) <= limits.gap_limit):
            status = "gap_limit"
            break
        node = tree.pop()
        tree.processed += 1
        if cutoff(node.dual_bound):
            tree.pruned += 1
            tree.record_leaf(node)
        else:
            result = _process(mip, node, tree, strategy, pc, rng, cutoff, next_id)
            if result == "unbounded":
                status = "unbounded"
                break
            next_id += result
        if refresh_bounds():
            log_event()
        take_due_snapshots()

    if status is None:
        status = "optimal" if tree.p is not None else "infeasible"
        tree.d = tree.p if tree.p is not None else math.inf
    refresh_bounds()
    log_event()
    take_due_snapshots(final=True)
    tse_trace.append((tree.processed, tree.created, tree.leaf_estimate()))
    return SolveResult(
        status=status,
        incumbent=tree.incumbent,
        p=tree.p,
        d=tree.d,
        gap=relative_gap(tree.p, tree.d),
        nodes=tree.processed,
        nodes_created=tree.created,
        branchings=tree.branchings,
        events=tree.events,
        checkpoints=snaps,
        tse_trace=tse_trace,
        time_s=elapsed(),
        pseudocosts=pc,
    )


def _process(mip, node, tree, strategy, pc, rng, cutoff, next_id):
    """Bound, test and possibly branch one node. Returns ids consumed."""
    node_lp = mip.lp.with_bounds(node.lower, node.upper)
    sol = node.lp_solution
    if sol is None:
        sol = lp_resolve(node_lp, node.warm) if node.warm is not None else lp_solve(node_lp)
        if sol.status == Status.ITERATION_LIMIT:
            logger.warning("node %d: LP iteration limit, retrying cold", node.id)
            sol = lp_solve(node_lp)
        if node.origin is not None and not node.from_lookahead:
            var, direction, dist, parent_obj = node.origin
            gain = INFEASIBLE_GAIN if sol.status == Status.INFEASIBLE else sol.objective - parent_obj
            pc.update(var, direction, gain, dist)
    tree.solved += 1
    if sol.status == Status.UNBOUNDED:
        if node.id == 0:
            return "unbounded"
        logger.warning("node %d: unbounded LP below the root", node.id)
    if sol.status != Status.OPTIMAL:
        if sol.status == Status.ITERATION_LIMIT:
            logger.warning("node %d: LP failed, node dropped", node.id)
        tree.pruned += 1
        tree.record_leaf(node)
        return 0
    bound = max(sol.objective, node.dual_bound)
    node.dual_bound = bound
    if cutoff(bound):
        tree.pruned += 1
        tree.record_leaf(node)
        return 0
    cands = fractional_candidates(sol, mip.integer_set)
    if not cands:
        accepted = _accept_incumbent(mip, sol.x)
        if accepted is None:
            logger.warning("node %d: integral LP point fails the row check", node.id)
        else:
            xr, obj = accepted
            if tree.p is None or obj < tree.p - 1e-9:
                tree.incumbent, tree.p = xr, obj
                tree.switch_to_best_first()
        tree.record_leaf(node)
        return 0
    ctx = BranchingContext(mip, node, node_lp, sol, cands, pc, rng, tree)
    var = strategy.select(ctx)
    try:
        var = int(var)
    except (TypeError, ValueError):
        raise PolicyContractError(f"strategy {getattr(strategy, 'name', strategy)!r} returned {var!r}")
    if var not in cands:
        raise PolicyContractError(
            f"strategy {getattr(strategy, 'name', strategy)!r} chose {var}, not a candidate")
    down, up = branch(tree, node, var, sol.x[var], bound, next_id)
    down.warm = up.warm = sol.basis.stripped()
    if var in ctx.lookahead:
        _, _, _, dsol, usol = ctx.lookahead[var]
        for s in (dsol, usol):
            if s.basis is not None:
                s.basis = s.basis.stripped()
        down.lp_solution, up.lp_solution = dsol, usol
        down.from_lookahead = up.from_lookahead = True
    tree.branchings += 1
    tree.push(down, prefer=1)
    tree.push(up, prefer=0)
    return 2
