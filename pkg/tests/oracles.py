"""Independent reference computations used by the tests.

Nothing here imports the package's solver code, so agreement between the two is
meaningful.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


def eucl(a, b) -> int:
    d = math.hypot(a[0] - b[0], a[1] - b[1])
    return int(d + 0.5)


def _set_partitions(items, k):
    """All partitions of ``items`` into exactly ``k`` nonempty blocks."""
    if k == 0:
        if not items:
            yield []
        return
    if len(items) < k:
        return
    first, rest = items[0], items[1:]
    # first item starts a new block
    for part in _set_partitions(rest, k - 1):
        yield [[first]] + part
    # or joins an existing block
    for part in _set_partitions(rest, k):
        for b in range(len(part)):
            yield part[:b] + [[first] + part[b]] + part[b + 1:]


def _route_cost(coords, block):
    best = math.inf
    for perm in itertools.permutations(block):
        path = (0,) + perm + (0,)
        best = min(best, sum(eucl(coords[a], coords[b]) for a, b in zip(path, path[1:])))
    return best


def cvrp_brute_force(coords, demands, capacity, k):
    """Optimal cost over all partitions into k capacity-feasible routes, or None."""
    customers = list(range(1, len(coords)))
    best = None
    for part in _set_partitions(customers, k):
        if any(sum(demands[i] for i in b) > capacity for b in part):
            continue
        cost = sum(_route_cost(coords, b) for b in part)
        if best is None or cost < best:
            best = cost
    return best


def bpp_brute_force(sizes, capacity) -> int:
    """Fewest bins, by depth-first assignment of items to bins (largest first)."""
    sizes = sorted(sizes, reverse=True)
    best = [len(sizes)]

    def rec(i, loads):
        if len(loads) >= best[0]:
            return
        if i == len(sizes):
            best[0] = len(loads)
            return
        seen = set()
        for b in range(len(loads)):
            if loads[b] + sizes[i] <= capacity and loads[b] not in seen:
                seen.add(loads[b])
                loads[b] += sizes[i]
                rec(i + 1, loads)
                loads[b] -= sizes[i]
        loads.append(sizes[i])
        rec(i + 1, loads)
        loads.pop()

    if sizes:
        rec(0, [])
    else:
        best[0] = 0
    return best[0]


def tableau_simplex(c, A, b, senses, lower, upper, max_iter=5000):
    """Textbook dense two-phase tableau simplex with Bland's rule.

    Works on the standard form obtained by shifting finite lower bounds, splitting
    free variables, turning finite upper bounds into rows, and adding slack and
    artificial columns. Returns ``(status, objective)`` with status one of
    ``"Optimal"``, ``"Infeasible"``, ``"Unbounded"``.
    """
    c = np.asarray(c, float)
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    n = c.size
    if np.any(lower > upper):
        return "Infeasible", None
    # column transform: x_j = shift_j + sum(sign * y)
    cols, const = [], 0.0
    shift = np.zeros(n)
    for j in range(n):
        lo, up = lower[j], upper[j]
        if np.isfinite(lo):
            shift[j] = lo
            cols.append((j, 1.0))
        elif np.isfinite(up):
            shift[j] = up
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    ny = len(cols)
    T = np.zeros((A.shape[0], ny))
    cy = np.zeros(ny)
    for k, (j, s) in enumerate(cols):
        T[:, k] = s * A[:, j]
        cy[k] = s * c[j]
    const = float(c @ shift)
    rhs = b - A @ shift
    rows, rsense = [T[i] for i in range(A.shape[0])], list(senses)
    rrhs = list(rhs)
    for j in range(n):
        if np.isfinite(lower[j]) and np.isfinite(upper[j]):
            row = np.zeros(ny)
            k = next(k for k, (jj, s) in enumerate(cols) if jj == j)
            row[k] = 1.0
            rows.append(row)
            rsense.append("L")
            rrhs.append(upper[j] - lower[j])
    m = len(rows)
    M = np.array(rows).reshape(m, ny) if m else np.zeros((0, ny))
    rrhs = np.array(rrhs, float)
    # slacks
    n_slack = sum(1 for s in rsense if s == "L")
    S = np.zeros((m, n_slack))
    si = 0
    for i, s in enumerate(rsense):
        if s == "L":
            S[i, si] = 1.0
            si += 1
    full = np.hstack([M, S])
    neg = rrhs < 0
    full[neg] *= -1
    rrhs = np.where(neg, -rrhs, rrhs)
    N0 = full.shape[1]
    tab = np.hstack([full, np.eye(m), rrhs[:, None]])
    basis = list(range(N0, N0 + m))
    total = N0 + m

    def run(cost, allowed):
        for _ in range(max_iter):
            cb = cost[basis]
            red = cost[:total] - cb @ tab[:, :total]
            enter = next((j for j in range(total) if allowed[j] and red[j] < -1e-10), None)
            if enter is None:
                return "Optimal"
            col = tab[:, enter]
            ratios = [(tab[i, -1] / col[i], basis[i], i) for i in range(m) if col[i] > 1e-10]
            if not ratios:
                return "Unbounded"
            best = min(r[0] for r in ratios)
            leave = min((r for r in ratios if r[0] <= best + 1e-12), key=lambda r: r[1])[2]
            tab[leave] /= tab[leave, enter]
            for i in range(m):
                if i != leave and tab[i, enter] != 0:
                    tab[i] -= tab[i, enter] * tab[leave]
            basis[leave] = enter
        raise RuntimeError("tableau oracle iteration cap")

    phase1 = np.concatenate([np.zeros(N0), np.ones(m)])
    run(phase1, [True] * total)
    if phase1[basis] @ tab[:, -1] > 1e-7:
        return "Infeasible", None
    # drive artificials out where possible
    for i in range(m):
        if basis[i] >= N0:
            piv = next((j for j in range(N0) if abs(tab[i, j]) > 1e-9), None)
            if piv is not None:
                tab[i] /= tab[i, piv]
                for r in range(m):
                    if r != i and tab[r, piv] != 0:
                        tab[r] -= tab[r, piv] * tab[i]
                basis[i] = piv
    phase2 = np.concatenate([cy, np.zeros(n_slack), np.zeros(m)])
    allowed = [True] * N0 + [False] * m
    status = run(phase2, allowed)
    if status == "Unbounded":
        return "Unbounded", None
    obj = float(phase2[basis] @ tab[:, -1]) + const
    return "Optimal", obj


def fractional_reference(x, integer_set, tol=Fraction(1, 10**6)):
    """Exact-rational recomputation of the fractional candidate list."""
    out = []
    for i in sorted(integer_set):
        v = Fraction(float(x[i]))
        f = v - math.floor(v)
        if min(f, 1 - f) > tol:
            out.append(i)
    return out
