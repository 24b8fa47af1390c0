"""CVRP and bin-packing instances, their integer programs, and solution decoding."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .lp import LinearProgram
from .mip import Limits, MipProblem, ReliablePseudoCost, solve

logger = logging.getLogger(__name__)


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TourValidationError(ValueError):
    pass


@dataclass
class CvrpInstance:
    name: str
    coords: np.ndarray  # (n+1, 2), row 0 is the depot
    demands: np.ndarray  # (n+1,), demands[0] == 0
    capacity: float
    k: int | None = None
    comment: str = ""

    @property
    def n(self) -> int:
        return self.coords.shape[0] - 1

    @property
    def overloaded_customers(self) -> list[int]:
        return [i for i in range(1, self.n + 1) if self.demands[i] > self.capacity]


@dataclass
class BppInstance:
    name: str
    capacity: float
    sizes: np.ndarray
    best_known: int | None = None

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=float)
        if np.any(self.sizes <= 0) or np.any(self.sizes > self.capacity):
            raise ValueError(f"{self.name}: item sizes must lie in (0, capacity]")

    @property
    def n(self) -> int:
        return self.sizes.shape[0]


@dataclass
class VarMap:
    """Variable index <-> semantic role, e.g. ``("arc", i, j)`` or ``("assign", bin, item)``."""

    roles: list[tuple]
    index: dict[tuple, int] = field(default_factory=dict)

    def __post_init__(self):
        self.index = {r: i for i, r in enumerate(self.roles)}
        if len(self.index) != len(self.roles):
            raise ValueError("duplicate variable role")

    def __len__(self) -> int:
        return len(self.roles)

    def __getitem__(self, role: tuple) -> int:
        return self.index[role]


_NAME_RE = re.compile(r"-n(\d+)-k(\d+)")
_K_RE = re.compile(r"-k(\d+)(?:\D|$)")


def decode_name(name: str) -> tuple[int | None, int | None]:
    """``"A-n32-k5"`` -> ``(32, 5)``: node count (depot included) and fleet size."""
    m = _NAME_RE.search(name)
    if m:
        return int(m.group(1)), int(m.group(2))
    m = _K_RE.search(name)
    return None, (int(m.group(1)) if m else None)


def _num(tok: str, lineno: int, what: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"non-numeric {what} {tok!r}", lineno) from None


def parse_cvrplib(text: str) -> CvrpInstance:
    """Parse a TSPLIB/CVRPLIB ``.vrp`` file with EUC_2D coordinates."""
    header: dict[str, tuple[str, int]] = {}
    sections: dict[str, list[tuple[int, list[str]]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        upper = line.split()[0].rstrip(":").upper()
        if upper.endswith("_SECTION"):
            current = upper
            sections[current] = []
            continue
        if ":" in line:
            key, _, val = line.partition(":")
            header[key.strip().upper()] = (val.strip(), lineno)
            current = None
            continue
        if current is None:
            raise ParseError(f"unexpected line {line!r}", lineno)
        sections[current].append((lineno, line.split()))

    for key in ("NAME", "DIMENSION", "CAPACITY"):
        if key not in header:
            raise ParseError(f"missing {key}")
    for sec in ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION"):
        if sec not in sections:
            raise ParseError(f"missing {sec}")
    ewt = header.get("EDGE_WEIGHT_TYPE", ("EUC_2D", 0))[0].upper()
    if ewt != "EUC_2D":
        raise ParseError(f"unsupported EDGE_WEIGHT_TYPE {ewt}", header["EDGE_WEIGHT_TYPE"][1])
    name = header["NAME"][0]
    dim_s, dim_line = header["DIMENSION"]
    dim = int(_num(dim_s, dim_line, "DIMENSION"))
    cap_s, cap_line = header["CAPACITY"]
    capacity = _num(cap_s, cap_line, "CAPACITY")
    if capacity <= 0:
        raise ParseError("CAPACITY must be positive", cap_line)

    coords = {}
    for lineno, toks in sections["NODE_COORD_SECTION"]:
        if len(toks) != 3:
            raise ParseError("NODE_COORD_SECTION expects 'id x y'", lineno)
        nid = int(_num(toks[0], lineno, "node id"))
        coords[nid] = (_num(toks[1], lineno, "x"), _num(toks[2], lineno, "y"))
    if len(coords) != dim:
        raise ParseError(f"NODE_COORD_SECTION has {len(coords)} nodes, DIMENSION says {dim}",
                         sections["NODE_COORD_SECTION"][-1][0] if sections["NODE_COORD_SECTION"] else None)
    demands = {}
    for lineno, toks in sections["DEMAND_SECTION"]:
        if len(toks) != 2:
            raise ParseError("DEMAND_SECTION expects 'id demand'", lineno)
        nid = int(_num(toks[0], lineno, "node id"))
        demands[nid] = _num(toks[1], lineno, "demand")
        if demands[nid] < 0:
            raise ParseError("negative demand", lineno)
    if len(demands) != dim:
        raise ParseError(f"DEMAND_SECTION has {len(demands)} nodes, DIMENSION says {dim}",
                         sections["DEMAND_SECTION"][-1][0] if sections["DEMAND_SECTION"] else None)
    depots = []
    for lineno, toks in sections["DEPOT_SECTION"]:
        for tok in toks:
            v = int(_num(tok, lineno, "depot id"))
            if v == -1:
                break
            depots.append((v, lineno))
    if len(depots) != 1:
        raise ParseError("DEPOT_SECTION must name exactly one depot")
    depot, depot_line = depots[0]
    if depot not in coords:
        raise ParseError(f"depot {depot} has no coordinates", depot_line)
    if demands.get(depot, 0) != 0:
        raise ParseError(f"depot demand is {demands[depot]:g}, expected 0", depot_line)
    if set(coords) != set(demands):
        raise ParseError("node ids differ between NODE_COORD_SECTION and DEMAND_SECTION")
    order = [depot] + sorted(i for i in coords if i != depot)
    _, k = decode_name(name)
    if k is None and "VEHICLES" in header:
        k = int(_num(*header["VEHICLES"], "VEHICLES"))
    inst = CvrpInstance(
        name=name,
        coords=np.array([coords[i] for i in order], dtype=float),
        demands=np.array([demands[i] for i in order], dtype=float),
        capacity=capacity,
        k=k,
        comment=header.get("COMMENT", ("", 0))[0],
    )
    if inst.overloaded_customers:
        logger.warning("%s: customers %s exceed capacity", name, inst.overloaded_customers)
    return inst


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def emit_cvrplib(inst: CvrpInstance) -> str:
    lines = [f"NAME : {inst.name}"]
    if inst.comment:
        lines.append(f"COMMENT : {inst.comment}")
    lines += [
        "TYPE : CVRP",
        f"DIMENSION : {inst.n + 1}",
        "EDGE_WEIGHT_TYPE : EUC_2D",
        f"CAPACITY : {_fmt(inst.capacity)}",
        "NODE_COORD_SECTION",
    ]
    for i, (x, y) in enumerate(inst.coords, start=1):
        lines.append(f" {i} {_fmt(x)} {_fmt(y)}")
    lines.append("DEMAND_SECTION")
    for i, q in enumerate(inst.demands, start=1):
        lines.append(f"{i} {_fmt(q)}")
    lines += ["DEPOT_SECTION", " 1", " -1", "EOF"]
    return "\n".join(lines) + "\n"


def parse_orlib_bpp(text: str) -> list[BppInstance]:
    """OR-Library bin packing: count, then per problem ``id`` / ``capacity n best`` / n sizes."""
    lines = [(i, ln.strip()) for i, ln in enumerate(text.splitlines(), start=1) if ln.strip()]
    if not lines:
        raise ParseError("empty file")
    pos = 0

    def take() -> tuple[int, str]:
        nonlocal pos
        if pos >= len(lines):
            raise ParseError("unexpected end of file", lines[-1][0])
        item = lines[pos]
        pos += 1
        return item

    lineno, first = take()
    count = int(_num(first, lineno, "problem count"))
    out = []
    for _ in range(count):
        lineno, ident = take()
        lineno, spec = take()
        toks = spec.split()
        if len(toks) != 3:
            raise ParseError("expected 'capacity n best_known'", lineno)
        cap = _num(toks[0], lineno, "capacity")
        n = int(_num(toks[1], lineno, "item count"))
        best = int(_num(toks[2], lineno, "best known"))
        sizes = []
        for _ in range(n):
            lineno, tok = take()
            v = _num(tok, lineno, "item size")
            if v > cap:
                raise ParseError(f"item size {tok} exceeds capacity {toks[0]}", lineno)
            if v <= 0:
                raise ParseError("item size must be positive", lineno)
            sizes.append(v)
        out.append(BppInstance(ident, cap, np.array(sizes), best))
    if pos != len(lines):
        raise ParseError(f"file declares {count} problems but has trailing data", lines[pos][0])
    return out


def emit_orlib_bpp(instances: list[BppInstance]) -> str:
    lines = [f" {len(instances)}"]
    for inst in instances:
        best = inst.best_known if inst.best_known is not None else 0
        lines += [f" {inst.name}", f" {_fmt(inst.capacity)} {inst.n} {best}"]
        lines += [f"{_fmt(s)}" for s in inst.sizes]
    return "\n".join(lines) + "\n"


def euclidean_cost(inst: CvrpInstance, i: int, j: int) -> int:
    """TSPLIB EUC_2D: Euclidean distance rounded to the nearest integer."""
    if i == j:
        return 0
    dx, dy = inst.coords[i] - inst.coords[j]
    return int(math.floor(math.sqrt(dx * dx + dy * dy) + 0.5))


def cost_matrix(inst: CvrpInstance) -> np.ndarray:
    n1 = inst.n + 1
    return np.array([[euclidean_cost(inst, i, j) for j in range(n1)] for i in range(n1)], dtype=float)


def build_cvrp_mip(inst: CvrpInstance, k: int) -> tuple[MipProblem, VarMap]:
    """MTZ model: arc binaries, customer loads, degree and load-propagation rows."""
    if k < 1:
        raise ValueError("k must be at least 1")
    n, Q, q = inst.n, float(inst.capacity), inst.demands
    if q[1:].sum() > k * Q:
        logger.warning("%s: total demand %.0f exceeds k*Q = %.0f; model is infeasible",
                       inst.name, q[1:].sum(), k * Q)
    cost = cost_matrix(inst)
    roles = [("arc", i, j) for i in range(n + 1) for j in range(n + 1) if i != j]
    roles += [("load", i) for i in range(1, n + 1)]
    vm = VarMap(roles)
    nv = len(roles)
    c = np.zeros(nv)
    lo, up = np.zeros(nv), np.ones(nv)
    for (tag, *rest), idx in vm.index.items():
        if tag == "arc":
            c[idx] = cost[rest[0], rest[1]]
        else:
            lo[idx], up[idx] = q[rest[0]], Q
    rows, cols, vals, rhs, senses = [], [], [], [], []

    def add_row(entries, b, sense):
        r = len(rhs)
        for col, v in entries:
            rows.append(r)
            cols.append(col)
            vals.append(v)
        rhs.append(b)
        senses.append(sense)

    for i in range(1, n + 1):
        add_row([(vm["arc", i, j], 1.0) for j in range(n + 1) if j != i], 1.0, "E")
    for j in range(1, n + 1):
        add_row([(vm["arc", i, j], 1.0) for i in range(n + 1) if i != j], 1.0, "E")
    add_row([(vm["arc", 0, j], 1.0) for j in range(1, n + 1)], float(k), "E")
    add_row([(vm["arc", i, 0], 1.0) for i in range(1, n + 1)], float(k), "E")
    for i in range(1, n + 1):
        for j in range(1, n + 1):
            if i != j:
                add_row([(vm["load", i], 1.0), (vm["load", j], -1.0), (vm["arc", i, j], Q)],
                        Q - q[j], "L")
    A = sp.csc_matrix((vals, (rows, cols)), shape=(len(rhs), nv))
    lp = LinearProgram(c, A, rhs, "".join(senses), lo, up)
    integer = [idx for r, idx in vm.index.items() if r[0] == "arc"]
    return MipProblem(lp, np.array(integer), f"{inst.name}-k{k}"), vm


def build_bpp_mip(inst: BppInstance, max_bins: int | None = None,
                  symmetry_breaking: bool = True) -> tuple[MipProblem, VarMap]:
    """Bin-open binaries ``k_i`` then assignments ``x_ij`` (bin i, item j).

    ``symmetry_breaking`` adds the ``k_i >= k_{i+1}`` rows and caps assignments so
    that bins are labelled in order of their largest item. Neither excludes any
    bin count, so the optimum is unchanged.
    """
    n = inst.n
    B = n if max_bins is None else max_bins
    if B < 1:
        raise ValueError("max_bins must be at least 1")
    roles = [("open", i) for i in range(B)] + [("assign", i, j) for i in range(B) for j in range(n)]
    vm = VarMap(roles)
    nv = len(roles)
    c = np.zeros(nv)
    c[:B] = 1.0
    rows, cols, vals, rhs, senses = [], [], [], [], []
    r = 0
    for i in range(B):
        for j in range(n):
            rows.append(r)
            cols.append(vm["assign", i, j])
            vals.append(inst.sizes[j])
        rows.append(r)
        cols.append(vm["open", i])
        vals.append(-inst.capacity)
        rhs.append(0.0)
        senses.append("L")
        r += 1
    for j in range(n):
        for i in range(B):
            rows.append(r)
            cols.append(vm["assign", i, j])
            vals.append(1.0)
        rhs.append(1.0)
        senses.append("E")
        r += 1
    if symmetry_breaking:
        for i in range(B - 1):
            rows += [r, r]
            cols += [vm["open", i + 1], vm["open", i]]
            vals += [1.0, -1.0]
            rhs.append(0.0)
            senses.append("L")
            r += 1
    upper = np.ones(nv)
    if symmetry_breaking:
        # relabel bins by their largest item: the item of size rank r then sits in a bin <= r
        order = np.argsort(-inst.sizes, kind="stable")
        for rank, j in enumerate(order):
            for i in range(rank + 1, B):
                upper[vm["assign", i, int(j)]] = 0.0
    A = sp.csc_matrix((vals, (rows, cols)), shape=(r, nv))
    lp = LinearProgram(c, A, rhs, "".join(senses), np.zeros(nv), upper)
    return MipProblem(lp, np.arange(nv), inst.name), vm


@dataclass
class KminResult:
    k_min: int | None
    lower_bound: int
    proven: bool


def demand_lower_bound(demands, capacity: float) -> int:
    total = float(np.sum(demands))
    return int(math.ceil(total / capacity - 1e-9)) if total > 0 else 0


def min_vehicles(inst: CvrpInstance, strategy=None, limits: Limits | None = None,
                 seed: int = 0) -> KminResult:
    """Smallest fleet that can carry all demands: a bin packing over customer demands."""
    q = inst.demands[1:]
    if np.any(q > inst.capacity):
        raise ValueError(f"{inst.name}: a customer demand exceeds the capacity")
    lb = demand_lower_bound(q, inst.capacity)
    items = q[q > 0]
    if items.size == 0:
        return KminResult(0, 0, True)
    bpp = BppInstance(f"{inst.name}-kmin", inst.capacity, items)
    mip, _ = build_bpp_mip(bpp)
    res = solve(mip, strategy or ReliablePseudoCost(), limits, seed=seed)
    if res.status != "optimal":
        return KminResult(None if res.p is None else int(round(res.p)), lb, False)
    return KminResult(int(round(res.p)), lb, True)


def extract_tours(x: np.ndarray, vm: VarMap, inst: CvrpInstance, k: int | None = None,
                  objective: float | None = None) -> tuple[list[list[int]], float]:
    """Follow chosen arcs out of the depot and validate the resulting routes."""
    n = inst.n
    succ: dict[int, list[int]] = {i: [] for i in range(n + 1)}
    for role, idx in vm.index.items():
        if role[0] == "arc" and x[idx] > 0.5:
            succ[role[1]].append(role[2])
    for i in range(1, n + 1):
        if len(succ[i]) != 1:
            raise TourValidationError(f"customer {i} has out-degree {len(succ[i])}")
    tours, seen = [], set()
    for start in succ[0]:
        tour, cur = [0], start
        while cur != 0:
            if cur in seen:
                raise TourValidationError(f"customer {cur} visited twice")
            seen.add(cur)
            tour.append(cur)
            cur = succ[cur][0]
            if len(tour) > n + 1:
                raise TourValidationError("route does not return to the depot")
        tour.append(0)
        tours.append(tour)
    missing = set(range(1, n + 1)) - seen
    if missing:
        raise TourValidationError(f"subtour among customers {sorted(missing)}")
    for t in tours:
        load = inst.demands[t[1:-1]].sum()
        if load > inst.capacity + 1e-9:
            raise TourValidationError(f"route {t} carries {load:g} > capacity {inst.capacity:g}")
    if k is not None and len(tours) != k:
        raise TourValidationError(f"{len(tours)} routes, expected {k}")
    cost = float(sum(euclidean_cost(inst, a, b) for t in tours for a, b in zip(t, t[1:])))
    if objective is not None and abs(cost - objective) > 1e-6:
        raise TourValidationError(f"route cost {cost:g} != objective {objective:g}")
    return tours, cost


def extract_bins(x: np.ndarray, vm: VarMap, inst: BppInstance) -> list[list[int]]:
    bins: dict[int, list[int]] = {}
    for role, idx in vm.index.items():
        if role[0] == "assign" and x[idx] > 0.5:
            bins.setdefault(role[1], []).append(role[2])
    placed = sorted(j for items in bins.values() for j in items)
    if placed != list(range(inst.n)):
        raise TourValidationError("every item must sit in exactly one bin")
    for b, items in bins.items():
        if inst.sizes[items].sum() > inst.capacity + 1e-9:
            raise TourValidationError(f"bin {b} over capacity")
        if x[vm["open", b]] < 0.5:
            raise TourValidationError(f"bin {b} used but not open")
    return [bins[b] for b in sorted(bins)]


def random_cvrp(n: int, rng: np.random.Generator, capacity: int = 30,
                max_demand: int = 15, grid: int = 100, name: str | None = None) -> CvrpInstance:
    coords = rng.integers(0, grid + 1, size=(n + 1, 2)).astype(float)
    demands = np.concatenate([[0.0], rng.integers(1, max_demand + 1, size=n).astype(float)])
    return CvrpInstance(name or f"R-n{n + 1}", coords, demands, float(capacity))


def random_bpp(n_items: int, rng: np.random.Generator, capacity: int = 20,
               name: str | None = None) -> BppInstance:
    sizes = rng.integers(1, capacity + 1, size=n_items).astype(float)
    return BppInstance(name or f"rbpp_{n_items}", float(capacity), sizes)


def bundled(name: str) -> Path:
    """Path of a sample file shipped with the package."""
    return Path(__file__).with_name("data") / name
