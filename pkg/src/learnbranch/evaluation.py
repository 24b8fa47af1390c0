"""Strategy x instance x budget runs, gap/tree-size ratios, and CSV/SVG reports."""

from __future__ import annotations

import csv
import io
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from .mip import Limits, MipProblem, solve

logger = logging.getLogger(__name__)

KS = (0, 1, 2, 3)
DEFAULT_LADDER = (1000, 2000, 4000, 8000)

OK = "ok"
OMEGA_NUM = "omega_num"  # learned strategy had no incumbent: ratio is +inf
OMEGA_DEN = "omega_den"  # baseline had no incumbent: excluded from averages
ABSENT = "absent"  # checkpoint missing


@dataclass
class CheckpointRecord:
    budget: float
    p: float | None
    d: float
    gap: float
    nodes: int
    tse: float | None

    @property
    def omega(self) -> bool:
        return self.p is None


@dataclass
class RunRecord:
    strategy: str
    eval_instance: str
    train_instance: str | None = None  # set for learned strategies
    unit: str = "nodes"
    checkpoints: list[CheckpointRecord] = field(default_factory=list)
    status: str = ""
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def at(self, budget: float) -> CheckpointRecord | None:
        for c in self.checkpoints:
            if c.budget == budget:
                return c
        return None


def validate_ladder(ladder) -> tuple[float, ...]:
    ladder = tuple(float(b) for b in ladder)
    if len(ladder) != 4 or ladder[0] <= 0 or any(ladder[i] != ladder[0] * 2 ** i for i in range(4)):
        raise ValueError("budget ladder must be {b, 2b, 4b, 8b}")
    return ladder


def _run_cell(sname, strategy, train, iname, mip, ladder, seed, unit) -> RunRecord:
    rec = RunRecord(sname, iname, train, unit)
    limits = Limits(node_limit=int(ladder[-1])) if unit == "nodes" else Limits(time_limit=ladder[-1])
    try:
        res = solve(mip, strategy, limits, seed=seed, checkpoints=ladder, checkpoint_unit=unit)
    except Exception as exc:  # recorded, not raised: one bad cell must not sink the matrix
        logger.error("%s on %s failed: %s", sname, iname, exc)
        rec.error = f"{type(exc).__name__}: {exc}"
        return rec
    rec.status = res.status
    rec.checkpoints = [CheckpointRecord(c.budget, c.p, c.d, c.gap, c.nodes, c.tse)
                       for c in res.checkpoints]
    return rec


def run_matrix(strategies: dict, instances: dict[str, MipProblem], ladder=DEFAULT_LADDER,
               seed: int = 0, unit: str = "nodes", workers: int = 1) -> list[RunRecord]:
    """One solve per (strategy, instance), snapshotting at every ladder rung.

    ``strategies`` maps a key to a bare strategy, to ``(strategy, train_instance)``
    or to ``(strategy, train_instance, record_name)``; the record name defaults to
    the key. Failures become records with ``error`` set. Cells are independent,
    so ``workers > 1`` runs them in separate processes with identical results
    under node budgets.
    """
    ladder = validate_ladder(ladder)
    if unit not in ("nodes", "seconds"):
        raise ValueError("unit must be 'nodes' or 'seconds'")
    cells = []
    for key in sorted(strategies):
        entry = strategies[key] if isinstance(strategies[key], tuple) else (strategies[key],)
        strategy, train, sname = entry + (None, key)[len(entry) - 1:]
        for iname in sorted(instances):
            cells.append((sname, strategy, train, iname, instances[iname], ladder, seed, unit))
    if workers <= 1 or len(cells) <= 1:
        return [_run_cell(*c) for c in cells]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_cell, *c) for c in cells]
        return [f.result() for f in futures]


def find(records, strategy: str, eval_instance: str, train_instance: str | None = None) -> RunRecord | None:
    for r in records:
        if r.strategy == strategy and r.eval_instance == eval_instance and r.train_instance == train_instance:
            return r
    return None


@dataclass(frozen=True)
class Ratio:
    value: float | None
    flag: str


def gap_ratio(model_cp: CheckpointRecord | None, solver_cp: CheckpointRecord | None) -> Ratio:
    if model_cp is None or solver_cp is None:
        return Ratio(None, ABSENT)
    if solver_cp.omega:
        return Ratio(None, OMEGA_DEN)
    if model_cp.omega:
        return Ratio(math.inf, OMEGA_NUM)
    num, den = model_cp.gap, solver_cp.gap
    if den == 0:
        return Ratio(1.0 if num == 0 else math.inf, OK)
    return Ratio(num / den, OK)


def perf_ratio(model_rec: RunRecord | None, solver_rec: RunRecord | None, t: int, k: int) -> Ratio:
    """Model gap after ``t`` ladder units over baseline gap after ``2**k * t`` units."""
    if k not in KS:
        raise ValueError("k must be in 0..3")
    if t not in (1, 2, 4, 8) or t > 2 ** (3 - k):
        raise ValueError(f"t={t} is outside the ladder for k={k}")
    if model_rec is None or solver_rec is None or model_rec.failed or solver_rec.failed:
        return Ratio(None, ABSENT)
    base = _base(model_rec)
    return gap_ratio(model_rec.at(base * t), solver_rec.at(base * t * 2 ** k))


def _base(rec: RunRecord) -> float:
    return min(c.budget for c in rec.checkpoints) if rec.checkpoints else math.nan


@dataclass(frozen=True)
class Average:
    value: float | None
    count: int
    excluded: int


def _mean(values: list[Ratio]) -> Average:
    used = [r.value for r in values if r.value is not None]
    excluded = len(values) - len(used)
    if not used:
        return Average(None, 0, excluded)
    return Average(float(np.mean(used)), len(used), excluded)


def avg_over_eval(records, model: str, train: str, solver: str, eval_instances, t: int, k: int) -> Average:
    """Mean ratio over evaluation instances, skipping absent and baseline-Omega entries."""
    ratios = [perf_ratio(find(records, model, j, train), find(records, solver, j), t, k)
              for j in eval_instances]
    return _mean(ratios)


def avg_over_both(records, model: str, train_instances, solver: str, eval_instances,
                  t: int, k: int) -> Average:
    rows = [avg_over_eval(records, model, i, solver, eval_instances, t, k) for i in train_instances]
    used = [a.value for a in rows if a.value is not None]
    if not used:
        return Average(None, 0, len(rows))
    return Average(float(np.mean(used)), len(used), len(rows) - len(used))


def tse_ratio(model_rec: RunRecord | None, solver_rec: RunRecord | None) -> float | None:
    """Mean over rungs of the tree-size-estimate ratio; None when any estimate is missing."""
    if model_rec is None or solver_rec is None or model_rec.failed or solver_rec.failed:
        return None
    vals = []
    for c in model_rec.checkpoints:
        o = solver_rec.at(c.budget)
        if o is None or c.tse is None or o.tse is None or o.tse == 0:
            return None
        vals.append(c.tse / o.tse)
    return float(np.mean(vals)) if vals else None


def normalize(values: list[float | None]) -> list[float | None]:
    """Divide by the largest finite value so the overlay lives in [0, 1]."""
    finite = [v for v in values if v is not None and math.isfinite(v)]
    top = max(finite) if finite else 0.0
    out = []
    for v in values:
        if v is None or not math.isfinite(v):
            out.append(None)
        else:
            out.append(v / top if top > 0 else 0.0)
    return out


# -- tables -------------------------------------------------------------------

CSV_COLUMNS = ["solver", "model", "train_instance", "eval_instance", "k", "t", "value", "flag"]
TSE_COLUMNS = ["solver", "model", "train_instance", "eval_instance", "tse_ratio", "tse_normalized"]


def _fmt(v: float | None) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def _groups(records, solvers=None):
    models = sorted({(r.strategy, r.train_instance) for r in records if r.train_instance is not None})
    solver_names = sorted(solvers if solvers is not None else
                          {r.strategy for r in records if r.train_instance is None})
    evals = sorted({r.eval_instance for r in records})
    return models, solver_names, evals


def ratio_rows(records, solvers=None) -> list[list[str]]:
    models, solver_names, evals = _groups(records, solvers)
    rows = []
    for s in solver_names:
        for m, i in models:
            for j in evals:
                for k in KS:
                    for t in (1, 2, 4, 8):
                        if t > 2 ** (3 - k):
                            continue
                        r = perf_ratio(find(records, m, j, i), find(records, s, j), t, k)
                        rows.append([s, m, i, j, str(k), str(t), _fmt(r.value), r.flag])
    return rows


def tse_rows(records, solvers=None) -> list[list[str]]:
    models, solver_names, evals = _groups(records, solvers)
    rows = []
    for s in solver_names:
        for m, i in models:
            raw = [tse_ratio(find(records, m, j, i), find(records, s, j)) for j in evals]
            for j, v, nv in zip(evals, raw, normalize(raw)):
                rows.append([s, m, i, j, _fmt(v), _fmt(nv)])
    return rows


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def ratio_csv(records, solvers=None) -> str:
    return _csv(CSV_COLUMNS, ratio_rows(records, solvers))


def tse_csv(records, solvers=None) -> str:
    return _csv(TSE_COLUMNS, tse_rows(records, solvers))


# -- figures ------------------------------------------------------------------

GRAYS = ("#303030", "#606060", "#909090", "#c0c0c0")
W, H = 760, 340
LEFT, TOP, PLOT_H = 50, 40, 240


def figure_svg(records, solver: str, model: str, train: str, eval_instances=None, t: int = 1) -> str:
    """One panel: a column per evaluation instance, a bar per k, reference line at 1."""
    evals = sorted(eval_instances or {r.eval_instance for r in records})
    cols = [[perf_ratio(find(records, model, j, train), find(records, solver, j), t, k)
             for k in KS if t <= 2 ** (3 - k)] for j in evals]
    finite = [r.value for col in cols for r in col if r.value is not None and math.isfinite(r.value)]
    ymax = max(finite + [1.0]) * 1.15

    def y(v: float) -> float:
        return TOP + PLOT_H * (1.0 - min(v, ymax) / ymax)

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(W), height=str(H),
                     viewBox=f"0 0 {W} {H}")
    ET.SubElement(svg, "title").text = f"{model} trained on {train} vs {solver}"
    col_w = (W - LEFT - 20) / max(len(evals), 1)
    bar_w = col_w * 0.8 / 4

    means = []
    for col in cols:
        vals = [r.value for r in col if r.value is not None]
        means.append(float(np.mean(vals)) if vals and all(math.isfinite(v) for v in vals) else math.inf)
    best = int(np.argmin(means)) if means and math.isfinite(min(means)) else None

    for c, (j, col) in enumerate(zip(evals, cols)):
        x0 = LEFT + c * col_w
        if c == best:
            ET.SubElement(svg, "rect", {"class": "best-column", "x": f"{x0:.2f}", "y": str(TOP),
                                        "width": f"{col_w:.2f}", "height": str(PLOT_H),
                                        "fill": "#cfe8ff"})
        finite_col = [r.value for r in col if r.value is not None and math.isfinite(r.value)]
        if len(finite_col) >= 2:
            mu, sd = float(np.mean(finite_col)), float(np.std(finite_col))
            ET.SubElement(svg, "rect", {"class": "std-band", "x": f"{x0:.2f}",
                                        "y": f"{y(mu + sd):.2f}", "width": f"{col_w:.2f}",
                                        "height": f"{max(y(mu - sd) - y(mu + sd), 0):.2f}",
                                        "fill": "#f4b6b6", "fill-opacity": "0.5"})
        all_omega = bool(col) and all(r.flag in (OMEGA_NUM, OMEGA_DEN) for r in col)
        for k, r in enumerate(col):
            bx = x0 + col_w * 0.1 + k * bar_w
            v = r.value if r.value is not None else 0.0
            top = y(v) if math.isfinite(v) else TOP
            ET.SubElement(svg, "rect", {"class": "bar", "data-k": str(k), "data-flag": r.flag,
                                        "x": f"{bx:.2f}", "y": f"{top:.2f}", "width": f"{bar_w:.2f}",
                                        "height": f"{TOP + PLOT_H - top:.2f}", "fill": GRAYS[k]})
            if r.flag in (OMEGA_NUM, OMEGA_DEN) and not all_omega:
                cls = "omega" if r.flag == OMEGA_NUM else "omega-capped"
                ET.SubElement(svg, "text", {"class": cls, "x": f"{bx + bar_w / 2:.2f}",
                                            "y": f"{top - 3:.2f}", "text-anchor": "middle"}).text = "Ω"
        if all_omega:
            ET.SubElement(svg, "text", {"class": "omega-span", "x": f"{x0 + col_w / 2:.2f}",
                                        "y": str(TOP - 4), "text-anchor": "middle"}).text = "Ω"
        ET.SubElement(svg, "text", {"class": "column-label", "x": f"{x0 + col_w / 2:.2f}",
                                    "y": str(TOP + PLOT_H + 16), "text-anchor": "middle",
                                    "font-size": "10"}).text = j

    ET.SubElement(svg, "line", {"class": "ref-dashed", "x1": str(LEFT), "x2": str(W - 20),
                                "y1": f"{y(1.0):.2f}", "y2": f"{y(1.0):.2f}", "stroke": "black",
                                "stroke-dasharray": "6,4"})
    tse = normalize([tse_ratio(find(records, model, j, train), find(records, solver, j)) for j in evals])
    segment: list[str] = []
    segments = []
    for c, v in enumerate(tse):
        if v is None:
            if segment:
                segments.append(segment)
            segment = []
            continue
        segment.append(f"{LEFT + (c + 0.5) * col_w:.2f},{TOP + PLOT_H * (1.0 - v):.2f}")
    if segment:
        segments.append(segment)
    for seg in segments:
        ET.SubElement(svg, "polyline", {"class": "tse", "points": " ".join(seg), "fill": "none",
                                        "stroke": "#b03030"})
    ET.SubElement(svg, "text", {"class": "ged-unavailable", "x": str(W - 20), "y": str(TOP - 20),
                                "text-anchor": "end", "font-size": "10"}).text = "GED: unavailable"
    ET.indent(svg)
    return ET.tostring(svg, encoding="unicode") + "\n"


def emit_report(records, out_dir, solvers=None) -> list[str]:
    """Write ratios.csv, tse.csv and one SVG per (solver, model, train instance)."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    written = []

    def put(name, text):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        written.append(path)

    put("ratios.csv", ratio_csv(records, solvers))
    put("tse.csv", tse_csv(records, solvers))
    models, solver_names, evals = _groups(records, solvers)
    for s in solver_names:
        for m, i in models:
            put(f"fig_{s}_{m}_{i}.svg".replace(":", "-").replace("/", "-"),
                figure_svg(records, s, m, i, evals))
    return written


# -- record (de)serialisation --------------------------------------------------


def record_to_json(r: RunRecord) -> dict:
    return {
        "strategy": r.strategy, "eval_instance": r.eval_instance, "train_instance": r.train_instance,
        "unit": r.unit, "status": r.status, "error": r.error,
        "checkpoints": [{"budget": c.budget, "p": c.p, "d": _jnum(c.d),
                         "gap": None if c.p is None else _jnum(c.gap),
                         "nodes": c.nodes, "tse": c.tse} for c in r.checkpoints],
    }


def record_from_json(d: dict) -> RunRecord:
    return RunRecord(d["strategy"], d["eval_instance"], d.get("train_instance"), d.get("unit", "nodes"),
                     [CheckpointRecord(c["budget"], c["p"], _unjnum(c["d"]),
                                       math.inf if c["gap"] is None else _unjnum(c["gap"]),
                                       c["nodes"], c["tse"]) for c in d["checkpoints"]],
                     d.get("status", ""), d.get("error"))


def _jnum(v):
    """JSON has no infinities: encode them as strings."""
    if v is None or math.isfinite(v):
        return v
    return "inf" if v > 0 else "-inf"


def _unjnum(v):
    return float(v) if isinstance(v, str) else v
