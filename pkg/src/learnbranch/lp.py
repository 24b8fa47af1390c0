"""Bounded-variable revised simplex.

Rows are ``A x (<= | =) b`` with box bounds ``l <= x <= u``.  Every row gets a
slack column so a basis always exists: ``A x + s = b`` with ``s`` in
``[0, inf)`` for LE rows and ``[0, 0]`` for EQ rows.

Cold solves run a composite primal simplex (phase 1 minimises the sum of
bound infeasibilities of the basic variables, phase 2 the objective).  Warm
re-solves after bound changes keep the previous basis and use the dual
simplex while the basis stays dual feasible.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

INF_SENTINEL = 1e20
FEAS_TOL = 1e-6
OPT_TOL = 1e-7
PIVOT_TOL = 1e-9
REFACTOR_EVERY = 100
DRIFT_TOL = 1e-8


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITERATION_LIMIT = "IterationLimit"


class VarStatus(enum.IntEnum):
    BASIC = 0
    AT_LOWER = 1
    AT_UPPER = 2
    FREE = 3  # nonbasic free variable parked at zero


def _clean_bound(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float).copy()
    v[v >= INF_SENTINEL] = np.inf
    v[v <= -INF_SENTINEL] = -np.inf
    return v


class LinearProgram:
    """``min c x  s.t.  A x (<=|=) b,  l <= x <= u``.

    Immutable after construction. ``senses`` holds ``'L'`` or ``'E'`` per row.
    Bounds beyond +-1e20 are read as infinite.
    """

    def __init__(self, c, A, b, senses=None, lower=None, upper=None):
        c = np.asarray(c, dtype=float)
        n = c.shape[0]
        A = sp.csc_matrix(A, dtype=float) if not sp.issparse(A) else A.tocsc().astype(float)
        if A.shape[1] != n:
            if A.shape == (0, 0):
                A = sp.csc_matrix((0, n))
            else:
                raise ValueError(f"A has {A.shape[1]} columns, expected {n}")
        A.eliminate_zeros()
        if not np.all(np.isfinite(A.data)):
            raise ValueError("non-finite coefficient in A")
        m = A.shape[0]
        b = np.asarray(b, dtype=float).reshape(m)
        if senses is None:
            senses = "L" * m
        senses = "".join(senses)
        if len(senses) != m or set(senses) - {"L", "E"}:
            raise ValueError("senses must be one 'L'/'E' per row")
        lower = np.zeros(n) if lower is None else _clean_bound(lower)
        upper = np.full(n, np.inf) if upper is None else _clean_bound(upper)
        if lower.shape != (n,) or upper.shape != (n,):
            raise ValueError("bound vectors must have length n_vars")
        self.c, self.A, self.b, self.senses = c, A, b, senses
        self.lower, self.upper = lower, upper
        for arr in (self.c, self.b, self.lower, self.upper):
            arr.setflags(write=False)
        self._cache: dict = {}

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @property
    def dense_A(self) -> np.ndarray:
        if "dense" not in self._cache:
            d = self.A.toarray()
            d.setflags(write=False)
            self._cache["dense"] = d
        return self._cache["dense"]

    @property
    def dense_with_slacks(self) -> np.ndarray:
        """``[A | I]``, shared by every bound-changed copy of this program."""
        if "full" not in self._cache:
            full = np.hstack([self.dense_A, np.eye(self.n_rows)])
            full.setflags(write=False)
            self._cache["full"] = full
        return self._cache["full"]

    def box_is_empty(self) -> bool:
        return bool(np.any(self.lower > self.upper))

    def with_bounds(self, lower, upper) -> "LinearProgram":
        lp = LinearProgram.__new__(LinearProgram)
        lp.c, lp.A, lp.b, lp.senses = self.c, self.A, self.b, self.senses
        lp.lower, lp.upper = _clean_bound(lower), _clean_bound(upper)
        lp.lower.setflags(write=False)
        lp.upper.setflags(write=False)
        lp._cache = self._cache
        return lp

    def with_changed_bounds(self, changes) -> "LinearProgram":
        lo, up = self.lower.copy(), self.upper.copy()
        for var, new_l, new_u in changes:
            lo[var], up[var] = new_l, new_u
        return self.with_bounds(lo, up)


@dataclass
class Basis:
    """Per-column status over structurals followed by slacks."""

    status: np.ndarray  # VarStatus codes, length n_vars + n_rows
    head: np.ndarray  # basic column per row position
    binv: np.ndarray | None = field(default=None, repr=False, compare=False)

    def copy(self) -> "Basis":
        return Basis(self.status.copy(), self.head.copy())

    def stripped(self) -> "Basis":
        """Same basis without the cached inverse (cheap to keep around)."""
        return Basis(self.status, self.head) if self.binv is not None else self

    @property
    def n_basic(self) -> int:
        return int(self.head.shape[0])


@dataclass
class LpSolution:
    status: Status
    x: np.ndarray
    duals: np.ndarray  # lambda >= 0 on LE rows; c + A^T lambda = reduced costs
    reduced_costs: np.ndarray
    objective: float
    basis: Basis | None
    iterations: int
    meta: dict = field(default_factory=dict)

    @property
    def slack_status(self) -> np.ndarray | None:
        if self.basis is None:
            return None
        return self.basis.status[self.x.shape[0]:]


_BASIC, _AT_LOWER, _AT_UPPER, _FREE = (int(v) for v in VarStatus)


class _Simplex:
    """Dense working state for one solve. Private to a single call."""

    def __init__(self, lp: LinearProgram):
        self.lp = lp
        n, m = lp.n_vars, lp.n_rows
        self.n, self.m = n, m
        self.N = n + m
        self.Af = lp.dense_with_slacks
        self.c = np.concatenate([lp.c, np.zeros(m)])
        eq = np.array([s == "E" for s in lp.senses], dtype=bool)
        self.lo = np.concatenate([lp.lower, np.zeros(m)])
        self.up = np.concatenate([lp.upper, np.where(eq, 0.0, np.inf)])
        self.b = lp.b
        self.x = np.zeros(self.N)
        self.status = np.zeros(self.N, dtype=np.int8)
        self.head = np.zeros(m, dtype=np.int64)
        self.Binv = np.eye(m)
        self.iterations = 0
        self.pivots_since_refactor = 0
        self.max_iter = 50 * (n + m) + 50
        self.stall_limit = 2 * (n + m)

    # -- basis management -------------------------------------------------

    def _place_nonbasic(self, cols: np.ndarray, prefer: np.ndarray | None = None) -> None:
        """Park ``cols`` at a finite bound, honouring ``prefer`` where it is usable."""
        lo, up = self.lo[cols], self.up[cols]
        lo_fin, up_fin = np.isfinite(lo), np.isfinite(up)
        default = np.where(lo_fin, _AT_LOWER, np.where(up_fin, _AT_UPPER, _FREE))
        if prefer is None:
            st = default
        else:
            ok = ((prefer == _AT_LOWER) & lo_fin) | ((prefer == _AT_UPPER) & up_fin)
            st = np.where(ok, prefer, default)
        self.status[cols] = st
        self.x[cols] = np.where(st == _AT_LOWER, lo, np.where(st == _AT_UPPER, up, 0.0))

    def slack_basis(self) -> None:
        self.head = np.arange(self.n, self.N)
        self._place_nonbasic(np.arange(self.n))
        self.status[self.head] = _BASIC
        self.Binv = np.eye(self.m)
        self._compute_basics()

    def load_basis(self, basis: Basis) -> bool:
        if basis.status.shape[0] != self.N or basis.head.shape[0] != self.m:
            return False
        self.head = basis.head.astype(np.int64).copy()
        nb = np.flatnonzero(basis.status != _BASIC)
        self._place_nonbasic(nb, basis.status[nb].astype(np.int64))
        self.status[self.head] = _BASIC
        if self.m and basis.binv is not None and basis.binv.shape == (self.m, self.m):
            self.Binv = basis.binv.copy()
        elif self.m:
            B = self.Af[:, self.head]
            try:
                self.Binv = np.linalg.inv(B)
                if np.abs(B @ self.Binv - np.eye(self.m)).max() > 1e-8:
                    return False
            except np.linalg.LinAlgError:
                return False
        self._compute_basics()
        return True

    def _compute_basics(self) -> None:
        if not self.m:
            return
        nb = self.status != _BASIC
        rhs = self.b - self.Af[:, nb] @ self.x[nb]
        self.x[self.head] = self.Binv @ rhs

    def _refactor(self) -> None:
        if self.m:
            self.Binv = np.linalg.inv(self.Af[:, self.head])
        self.pivots_since_refactor = 0
        self._compute_basics()

    def _pivot(self, r: int, q: int, w: np.ndarray, bound: float) -> None:
        """Replace basic position r by column q; w = Binv @ a_q.

        The leaving column becomes nonbasic at ``bound``.
        """
        leave = int(self.head[r])
        self.x[leave] = bound
        if self.lo[leave] == self.up[leave] or bound == self.lo[leave]:
            self.status[leave] = _AT_LOWER
        else:
            self.status[leave] = _AT_UPPER
        piv = w[r]
        row = self.Binv[r] / piv
        self.Binv -= np.outer(w, row)
        self.Binv[r] = row
        self.head[r] = q
        self.status[q] = _BASIC
        self.pivots_since_refactor += 1
        if self.pivots_since_refactor >= REFACTOR_EVERY:
            self._refactor()
        elif self.pivots_since_refactor % 10 == 0:
            nb = self.status != _BASIC
            resid = self.Af[:, self.head] @ self.x[self.head] - (self.b - self.Af[:, nb] @ self.x[nb])
            if np.max(np.abs(resid), initial=0.0) > DRIFT_TOL:
                self._refactor()

    # -- pricing helpers ----------------------------------------------------

    def _infeasibility(self) -> np.ndarray:
        xb = self.x[self.head]
        lo, up = self.lo[self.head], self.up[self.head]
        below = np.where(xb < lo - FEAS_TOL, lo - xb, 0.0)
        above = np.where(xb > up + FEAS_TOL, xb - up, 0.0)
        return below + above

    def _duals_for(self, cost: np.ndarray) -> np.ndarray:
        return cost[self.head] @ self.Binv if self.m else np.zeros(0)

    def _entering(self, d: np.ndarray, bland: bool) -> tuple[int, int]:
        """Pick an improving nonbasic column. Returns (col, direction)."""
        st = self.status
        fixed = self.lo == self.up
        can_up = ((st == _AT_LOWER) | (st == _FREE)) & ~fixed & (d < -OPT_TOL)
        can_dn = ((st == _AT_UPPER) | (st == _FREE)) & ~fixed & (d > OPT_TOL)
        elig = can_up | can_dn
        if not elig.any():
            return -1, 0
        if bland:
            q = int(np.flatnonzero(elig)[0])
        else:
            score = np.where(elig, np.abs(d), -1.0)
            q = int(np.argmax(score))
        return q, (1 if can_up[q] else -1)

    # -- primal simplex -----------------------------------------------------

    def primal(self) -> Status:
        best = (True, np.inf)
        stall = 0
        while True:
            infeas = self._infeasibility()
            phase1 = bool(np.any(infeas > 0))
            if phase1:
                xb = self.x[self.head]
                cost = np.zeros(self.N)
                cost[self.head] = np.where(xb < self.lo[self.head] - FEAS_TOL, -1.0,
                                           np.where(xb > self.up[self.head] + FEAS_TOL, 1.0, 0.0))
                obj = float(infeas.sum())
            else:
                cost = self.c
                obj = float(self.c @ self.x)
            if phase1 != best[0] or obj < best[1] - 1e-12:
                best, stall = (phase1, obj), 0
            else:
                stall += 1
            bland = stall > self.stall_limit
            y = self._duals_for(cost)
            d = cost - y @ self.Af if self.m else cost.copy()
            d[self.head] = 0.0
            q, direction = self._entering(d, bland)
            if q < 0:
                return Status.INFEASIBLE if phase1 else Status.OPTIMAL
            if self.iterations >= self.max_iter:
                return Status.ITERATION_LIMIT
            self.iterations += 1
            w = self.Binv @ self.Af[:, q] if self.m else np.zeros(0)
            # basic x_B moves by -direction * theta * w
            delta = -direction * w
            theta = self.up[q] - self.lo[q]  # bound flip
            r_best, to_bound = -1, None
            xb = self.x[self.head]
            lo_b, up_b = self.lo[self.head], self.up[self.head]
            cand = []
            for r in np.flatnonzero(np.abs(delta) > PIVOT_TOL):
                dr = delta[r]
                xr, lr, ur = xb[r], lo_b[r], up_b[r]
                if dr > 0:
                    if xr < lr - FEAS_TOL:  # infeasible below: stop when reaching lower
                        lim, bnd = (lr - xr) / dr, lr
                    elif xr > ur + FEAS_TOL or not np.isfinite(ur):
                        continue
                    else:
                        lim, bnd = max(ur - xr, 0.0) / dr, ur
                else:
                    if xr > ur + FEAS_TOL:
                        lim, bnd = (xr - ur) / -dr, ur
                    elif xr < lr - FEAS_TOL or not np.isfinite(lr):
                        continue
                    else:
                        lim, bnd = max(xr - lr, 0.0) / -dr, lr
                cand.append((lim, r, bnd))
            if cand:
                lim_min = min(c_[0] for c_ in cand)
                if lim_min < theta:
                    ties = [c_ for c_ in cand if c_[0] <= lim_min + 1e-12]
                    if bland:
                        pick = min(ties, key=lambda c_: self.head[c_[1]])
                    else:
                        pick = max(ties, key=lambda c_: (abs(delta[c_[1]]), -self.head[c_[1]]))
                    theta, r_best, to_bound = pick[0], pick[1], pick[2]
            if not np.isfinite(theta):
                if phase1:
                    # cannot happen for a bounded-below piecewise objective; treat as stuck
                    return Status.ITERATION_LIMIT
                return Status.UNBOUNDED
            step = direction * theta
            self.x[q] += step
            if self.m:
                self.x[self.head] += -step * w
            if r_best < 0:
                self.status[q] = _AT_UPPER if direction > 0 else _AT_LOWER
                self.x[q] = self.up[q] if direction > 0 else self.lo[q]
                continue
            self._pivot(r_best, q, w, to_bound)

    # -- dual simplex -------------------------------------------------------

    def dual_feasible(self) -> bool:
        y = self._duals_for(self.c)
        d = self.c - y @ self.Af if self.m else self.c.copy()
        st = self.status
        fixed = self.lo == self.up
        bad = (((st == _AT_LOWER) & (d < -OPT_TOL)) |
               ((st == _AT_UPPER) & (d > OPT_TOL)) |
               ((st == _FREE) & (np.abs(d) > OPT_TOL))) & ~fixed
        return not bad.any()

    def dual(self) -> Status:
        best = -np.inf
        stall = 0
        while True:
            infeas = self._infeasibility()
            if not np.any(infeas > 0):
                return Status.OPTIMAL
            y = self._duals_for(self.c)
            d = self.c - y @ self.Af
            d[self.head] = 0.0
            obj = float(self.c @ self.x)
            if obj > best + 1e-12:
                best, stall = obj, 0
            else:
                stall += 1
            bland = stall > self.stall_limit
            if bland:
                r = int(min(np.flatnonzero(infeas > 0), key=lambda i: self.head[i]))
            else:
                r = int(np.argmax(infeas))
            if self.iterations >= self.max_iter:
                return Status.ITERATION_LIMIT
            self.iterations += 1
            xr = self.x[self.head[r]]
            increase = xr < self.lo[self.head[r]]
            bound = self.lo[self.head[r]] if increase else self.up[self.head[r]]
            alpha = self.Binv[r] @ self.Af
            st = self.status
            movable = (st != _BASIC) & (self.lo != self.up)
            if increase:
                elig = movable & (((st == _AT_LOWER) & (alpha < -PIVOT_TOL)) |
                                  ((st == _AT_UPPER) & (alpha > PIVOT_TOL)) |
                                  ((st == _FREE) & (np.abs(alpha) > PIVOT_TOL)))
            else:
                elig = movable & (((st == _AT_LOWER) & (alpha > PIVOT_TOL)) |
                                  ((st == _AT_UPPER) & (alpha < -PIVOT_TOL)) |
                                  ((st == _FREE) & (np.abs(alpha) > PIVOT_TOL)))
            idx = np.flatnonzero(elig)
            if idx.size == 0:
                return Status.INFEASIBLE
            ratios = np.abs(d[idx]) / np.abs(alpha[idx])
            rmin = ratios.min()
            ties = idx[ratios <= rmin + 1e-12]
            if bland:
                q = int(ties[0])
            else:
                q = int(ties[np.argmax(np.abs(alpha[ties]))])
            w = self.Binv @ self.Af[:, q]
            t = (xr - bound) / w[r]
            self.x[q] += t
            self.x[self.head] -= t * w
            self._pivot(r, q, w, bound)

    # -- result -------------------------------------------------------------

    def result(self, status: Status, meta=None) -> LpSolution:
        n = self.n
        if status == Status.OPTIMAL and self.m:
            self._refactor()
        y = self._duals_for(self.c)
        d = self.c - y @ self.Af if self.m else self.c.copy()
        d[self.head] = 0.0
        x = self.x[:n].copy()
        basis = Basis(self.status.copy(), self.head.copy(),
                      self.Binv.copy() if status == Status.OPTIMAL and self.m else None)
        return LpSolution(
            status=status,
            x=x,
            duals=-y,
            reduced_costs=d[:n].copy(),
            objective=float(self.lp.c @ x) if status == Status.OPTIMAL else np.nan,
            basis=basis,
            iterations=self.iterations,
            meta=dict(meta or {}),
        )


def _empty_box_solution(lp: LinearProgram, meta=None) -> LpSolution:
    n, m = lp.n_vars, lp.n_rows
    return LpSolution(Status.INFEASIBLE, np.full(n, np.nan), np.zeros(m), np.zeros(n),
                      np.nan, None, 0, dict(meta or {}))


def lp_solve(lp: LinearProgram, max_iter: int | None = None) -> LpSolution:
    """Cold solve from the slack basis."""
    if lp.box_is_empty():
        return _empty_box_solution(lp)
    s = _Simplex(lp)
    if max_iter is not None:
        s.max_iter = max_iter
    s.slack_basis()
    return s.result(s.primal())


def lp_resolve(lp: LinearProgram, warm: Basis | None, changed_bounds=(),
               max_iter: int | None = None) -> LpSolution:
    """Re-solve ``lp`` with ``changed_bounds`` applied, starting from ``warm``.

    ``changed_bounds`` is a sequence of ``(var, new_lower, new_upper)``.
    """
    if changed_bounds:
        lp = lp.with_changed_bounds(changed_bounds)
    if lp.box_is_empty():
        return _empty_box_solution(lp, {"warm": True})
    if warm is None:
        sol = lp_solve(lp, max_iter)
        sol.meta["fallback"] = "no-basis"
        return sol
    s = _Simplex(lp)
    if max_iter is not None:
        s.max_iter = max_iter
    if not s.load_basis(warm):
        sol = lp_solve(lp, max_iter)
        sol.meta["fallback"] = "singular-basis"
        return sol
    if np.any(s._infeasibility() > 0) and s.dual_feasible():
        status = s.dual()
        method = "dual"
        if status == Status.OPTIMAL and not s.dual_feasible():
            status = s.primal()
            method = "dual+primal"
    else:
        status = s.primal()
        method = "primal"
    return s.result(status, {"warm": True, "method": method})


def dual_bound_certificate(lp: LinearProgram, sol: LpSolution) -> float:
    """Dual objective ``-b^T lambda + sum_j min_{x_j in [l_j,u_j]} d_j x_j``.

    ``d = c + A^T lambda`` are the reduced costs. A valid lower bound on the LP
    optimum for any lambda with the right row signs.
    """
    if sol.status != Status.OPTIMAL:
        raise ValueError(f"certificate needs an Optimal solution, got {sol.status.value}")
    lam = sol.duals
    d = lp.c + lp.A.T @ lam
    total = -float(lp.b @ lam)
    for j in range(lp.n_vars):
        dj = d[j]
        if abs(dj) <= 1e-12:
            continue
        bound = lp.lower[j] if dj > 0 else lp.upper[j]
        if not np.isfinite(bound):
            if abs(dj) <= OPT_TOL:
                total += dj * sol.x[j]
                continue
            return -np.inf
        total += dj * bound
    # LE rows need lambda >= 0; tiny negative values come from round-off
    for i, s in enumerate(lp.senses):
        if s == "L" and lam[i] < -OPT_TOL:
            return -np.inf
    return total


def to_mps(lp: LinearProgram, name: str = "LP") -> str:
    """Fixed-field MPS text. Column order is variable index order."""
    def num(v: float) -> str:
        return f"{v:.12g}"[:12]

    lines = [f"NAME          {name}", "ROWS", " N  OBJ"]
    for i, s in enumerate(lp.senses):
        lines.append(f" {s}  R{i}")
    lines.append("COLUMNS")
    A = lp.A
    for j in range(lp.n_vars):
        col = f"X{j}"
        entries = []
        if lp.c[j] != 0:
            entries.append(("OBJ", lp.c[j]))
        for k in range(A.indptr[j], A.indptr[j + 1]):
            entries.append((f"R{A.indices[k]}", A.data[k]))
        if not entries:
            entries.append(("OBJ", 0.0))
        for row, val in entries:
            lines.append(f"    {col:<8}  {row:<8}  {num(val):>12}")
    lines.append("RHS")
    for i in range(lp.n_rows):
        if lp.b[i] != 0:
            lines.append(f"    {'RHS':<8}  {'R' + str(i):<8}  {num(lp.b[i]):>12}")
    lines.append("BOUNDS")
    for j in range(lp.n_vars):
        lo, up = lp.lower[j], lp.upper[j]
        col = f"X{j}"
        if lo == up:
            lines.append(f" FX {'BND':<8}  {col:<8}  {num(lo):>12}")
            continue
        if not np.isfinite(lo) and not np.isfinite(up):
            lines.append(f" FR {'BND':<8}  {col:<8}")
            continue
        if not np.isfinite(lo):
            lines.append(f" MI {'BND':<8}  {col:<8}")
        elif lo != 0:
            lines.append(f" LO {'BND':<8}  {col:<8}  {num(lo):>12}")
        if np.isfinite(up):
            lines.append(f" UP {'BND':<8}  {col:<8}  {num(up):>12}")
    lines.append("ENDATA")
    return "\n".join(lines) + "\n"
