"""Bipartite variable/constraint encodings of a branch-and-bound node."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lp import LinearProgram, LpSolution, Status, VarStatus
from . import mip as _mip
from .mip import BranchingContext, PseudoCostState, fractionality

SCHEMA = "v1"
N_VAR_FEATS = 19
N_CONS_FEATS = 5

VAR_FEATURES = (
    "obj_coef", "lp_value_scaled", "fractionality", "has_lower", "has_upper",
    "at_lower", "at_upper", "reduced_cost", "basic", "nonbasic_lower",
    "nonbasic_upper", "nonbasic_free", "is_integer", "pc_up", "pc_down",
    "pc_reliability", "incumbent_value", "degree", "is_integral",
)
CONS_FEATURES = ("rhs", "dual", "tight", "degree", "is_equality")


class SchemaError(ValueError):
    pass


@dataclass
class BipartiteGraph:
    var_feats: np.ndarray  # (n, 19)
    cons_feats: np.ndarray  # (m, 5)
    edge_rows: np.ndarray  # constraint index per edge
    edge_vars: np.ndarray  # variable index per edge
    edge_vals: np.ndarray  # coefficient per edge
    candidates: np.ndarray  # boolean mask over variables
    schema: str = SCHEMA
    # graph id per variable row when several graphs are batched together
    var_graph: np.ndarray | None = None

    def __post_init__(self):
        if self.var_feats.ndim != 2 or self.var_feats.shape[1] != N_VAR_FEATS:
            raise SchemaError(f"variable features must be n x {N_VAR_FEATS}")
        if self.cons_feats.ndim != 2 or self.cons_feats.shape[1] != N_CONS_FEATS:
            raise SchemaError(f"constraint features must be m x {N_CONS_FEATS}")
        if self.candidates.shape != (self.n,):
            raise SchemaError("candidate mask must cover every variable")
        if self.var_graph is None:
            self.var_graph = np.zeros(self.n, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.var_feats.shape[0]

    @property
    def m(self) -> int:
        return self.cons_feats.shape[0]

    @property
    def n_graphs(self) -> int:
        return int(self.var_graph.max()) + 1 if self.n else 0

    @property
    def candidate_index(self) -> np.ndarray:
        return np.flatnonzero(self.candidates)


@dataclass
class AugmentedGraph:
    """Variables stacked over zero-padded constraints with a symmetric block adjacency."""

    H: np.ndarray  # (n + m, 19)
    adj_rows: np.ndarray
    adj_cols: np.ndarray
    adj_vals: np.ndarray
    n: int
    m: int
    candidates: np.ndarray  # mask over the first n rows
    schema: str = SCHEMA
    var_graph: np.ndarray | None = None

    def dense_adjacency(self) -> np.ndarray:
        N = self.n + self.m
        out = np.zeros((N, N))
        np.add.at(out, (self.adj_rows, self.adj_cols), self.adj_vals)
        return out


def encode_bipartite(lp: LinearProgram, sol: LpSolution, integer_set,
                     candidates=None, pseudocosts: PseudoCostState | None = None,
                     incumbent: np.ndarray | None = None) -> BipartiteGraph:
    """Build the 19 variable and 5 constraint features for one node LP."""
    if sol.status != Status.OPTIMAL:
        raise ValueError("node LP must be optimal to encode")
    n, m = lp.n_vars, lp.n_rows
    x, lo, up = sol.x, lp.lower, lp.upper
    c_norm = float(np.max(np.abs(lp.c), initial=0.0))
    is_int = np.zeros(n, dtype=bool)
    is_int[np.asarray(integer_set, dtype=np.int64)] = True
    if candidates is None:
        candidates = [i for i in np.flatnonzero(is_int) if fractionality(x[i]) > _mip.INT_TOL]
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(candidates, dtype=np.int64)] = True

    F = np.zeros((n, N_VAR_FEATS))
    F[:, 0] = lp.c / c_norm if c_norm > 0 else 0.0
    lo_fin, up_fin = np.isfinite(lo), np.isfinite(up)
    width = np.where(lo_fin & up_fin, up - lo, 0.0)
    scaled = np.divide(x - np.where(lo_fin, lo, 0.0), width, out=np.full(n, 0.5), where=width > 0)
    F[:, 1] = scaled
    F[:, 2] = 2.0 * np.minimum(x - np.floor(x), np.ceil(x) - x)
    F[:, 3] = lo_fin
    F[:, 4] = up_fin
    F[:, 5] = lo_fin & (np.abs(x - np.where(lo_fin, lo, 0.0)) <= _mip.INT_TOL)
    F[:, 6] = up_fin & (np.abs(x - np.where(up_fin, up, 0.0)) <= _mip.INT_TOL)
    F[:, 7] = sol.reduced_costs / (1.0 + c_norm)
    st = sol.basis.status[:n] if sol.basis is not None else np.full(n, int(VarStatus.BASIC))
    for k, code in enumerate((VarStatus.BASIC, VarStatus.AT_LOWER, VarStatus.AT_UPPER, VarStatus.FREE)):
        F[:, 8 + k] = st == int(code)
    F[:, 12] = is_int
    if pseudocosts is not None:
        dc, uc = pseudocosts.down_count, pseudocosts.up_count
        F[:, 13] = np.divide(pseudocosts.up_sum, uc, out=np.zeros(n), where=uc > 0)
        F[:, 14] = np.divide(pseudocosts.down_sum, dc, out=np.zeros(n), where=dc > 0)
        F[:, 15] = np.minimum(np.minimum(dc, uc) / pseudocosts.eta, 1.0)
    F[:, 16] = incumbent if incumbent is not None else -1.0
    A = lp.A
    col_deg = np.diff(A.indptr)
    F[:, 17] = col_deg / m if m else 0.0
    F[:, 18] = np.abs(x - np.round(x)) < _mip.INT_TOL

    G = np.zeros((m, N_CONS_FEATS))
    coo = A.tocoo()
    if m:
        row_norm = np.zeros(m)
        np.maximum.at(row_norm, coo.row, np.abs(coo.data))
        G[:, 0] = lp.b / (1.0 + row_norm)
        G[:, 1] = sol.duals / (1.0 + c_norm)
        slack = lp.b - A @ x
        G[:, 2] = np.abs(slack) <= _mip.INT_TOL
        G[:, 3] = np.bincount(coo.row, minlength=m) / n if n else 0.0
        G[:, 4] = np.array([s == "E" for s in lp.senses], dtype=float)

    order = np.lexsort((coo.col, coo.row))
    return BipartiteGraph(F, G, coo.row[order].astype(np.int64), coo.col[order].astype(np.int64),
                          coo.data[order].astype(float), mask)


def encode_context(ctx: BranchingContext) -> BipartiteGraph:
    return encode_bipartite(ctx.lp, ctx.solution, ctx.mip.integer_set, ctx.candidates,
                            ctx.pseudocosts, ctx.tree.incumbent if ctx.tree is not None else None)


def augment(bg: BipartiteGraph) -> AugmentedGraph:
    """Stack variables over zero-padded constraints; adjacency [[0, A^T], [A, 0]] in COO."""
    n, m = bg.n, bg.m
    pad = np.zeros((m, N_VAR_FEATS))
    pad[:, :N_CONS_FEATS] = bg.cons_feats
    H = np.vstack([bg.var_feats, pad])
    r = bg.edge_rows + n
    v = bg.edge_vars
    rows = np.concatenate([v, r])
    cols = np.concatenate([r, v])
    vals = np.concatenate([bg.edge_vals, bg.edge_vals])
    return AugmentedGraph(H, rows, cols, vals, n, m, bg.candidates.copy(), bg.schema,
                          bg.var_graph.copy())


def batch(graphs: list[BipartiteGraph]) -> BipartiteGraph:
    """Disjoint union; ``var_graph`` tells the original graph of each variable row."""
    if not graphs:
        raise ValueError("nothing to batch")
    schemas = {g.schema for g in graphs}
    if len(schemas) != 1:
        raise SchemaError(f"mixed feature schemas {sorted(schemas)}")
    n_off = np.cumsum([0] + [g.n for g in graphs])
    m_off = np.cumsum([0] + [g.m for g in graphs])
    return BipartiteGraph(
        np.vstack([g.var_feats for g in graphs]),
        np.vstack([g.cons_feats for g in graphs]),
        np.concatenate([g.edge_rows + m_off[k] for k, g in enumerate(graphs)]),
        np.concatenate([g.edge_vars + n_off[k] for k, g in enumerate(graphs)]),
        np.concatenate([g.edge_vals for g in graphs]),
        np.concatenate([g.candidates for g in graphs]),
        graphs[0].schema,
        np.concatenate([np.full(g.n, k, dtype=np.int64) for k, g in enumerate(graphs)]),
    )
