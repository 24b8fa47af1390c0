"""Command-line entry point: solve, kmin, collect, train, eval, report, replay."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import __version__
from .config import (RunConfig, apply_overrides, apply_tolerances, load_config_file,
                     seed_from_env)
from .evaluation import emit_report, record_from_json, record_to_json, run_matrix
from .graph import SCHEMA
from .imitation import Dataset, collect, policy_strategy, split, train
from .mip import (FirstFractional, Limits, PseudoCostState, RandomBranching, ReliablePseudoCost,
                  StrongBranching, solve)
from .models import (BppInstance, CvrpInstance, ParseError, build_bpp_mip, build_cvrp_mip,
                     demand_lower_bound, extract_bins, extract_tours, min_vehicles,
                     parse_cvrplib, parse_orlib_bpp)
from .nn import DEFAULT_SPECS, ParameterStore

log = logging.getLogger("learnbranch")

EXIT_OK, EXIT_ERROR, EXIT_LIMIT_INCUMBENT, EXIT_LIMIT_OMEGA = 0, 1, 2, 3


class CliError(Exception):
    pass


# -- helpers --------------------------------------------------------------------


def load_instance(path: str) -> CvrpInstance | BppInstance:
    """A CVRPLIB file gives a CVRP; an OR-Library file gives its first bin-packing problem."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        if "NODE_COORD_SECTION" in text:
            return parse_cvrplib(text)
        return parse_orlib_bpp(text)[0]
    except (ParseError, IndexError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from None


def build_model(inst, cfg: RunConfig):
    if isinstance(inst, CvrpInstance):
        k = cfg.k or None
        if k is None:
            km = min_vehicles(inst)
            if km.k_min is None or not km.proven:
                raise CliError(f"{inst.name}: could not prove k_min")
            k = km.k_min
        mip, vm = build_cvrp_mip(inst, k)
        return mip, vm, k
    mip, vm = build_bpp_mip(inst, symmetry_breaking=cfg.symmetry_breaking)
    return mip, vm, None


def make_strategy(spec: str):
    if spec == "sb":
        return StrongBranching()
    if spec == "rpc":
        return ReliablePseudoCost()
    if spec == "random":
        return RandomBranching()
    if spec == "first":
        return FirstFractional()
    if spec.startswith("model:"):
        path = spec[len("model:"):].split("@", 1)[0]
        try:
            store = ParameterStore.load(path)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot load policy {path}: {exc}") from None
        return policy_strategy(store)
    raise CliError(f"unknown strategy {spec!r} (use sb, rpc, random, first or model:<path>)")


def parse_budget(text: str) -> Limits:
    if not text:
        return Limits()
    t = text.strip().lower()
    if t.endswith("nodes"):
        return Limits(node_limit=int(t[:-5]))
    if t.endswith("s"):
        return Limits(time_limit=float(t[:-1]))
    return Limits(node_limit=int(t))


def _jnum(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return None
    return v


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, command: str, args: dict, cfg: RunConfig, outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "args": args,
        "config": cfg.as_dict(),
        "schema": SCHEMA,
        "version": __version__,
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    write_json(out / "manifest.json", manifest)


# -- commands ---------------------------------------------------------------------


def cmd_solve(args, cfg: RunConfig) -> int:
    inst = load_instance(args.instance)
    mip, vm, k = build_model(inst, cfg)
    strategy = make_strategy(cfg.strategy)
    limits = parse_budget(cfg.budget)
    timed = limits.time_limit is not None
    res = solve(mip, strategy, limits, seed=cfg.seed, pseudocosts=PseudoCostState(mip.lp.n_vars, cfg.eta))
    out = Path(args.out)
    events = []
    for e in res.events:
        events.append(json.dumps({"t_ms": round(e.t_ms, 3) if timed else None, "nodes": e.nodes,
                                  "p": _jnum(e.p), "d": _jnum(e.d),
                                  "gap": None if e.p is None else _jnum(e.gap)}, sort_keys=True))
    write_text(out / "events.jsonl", "".join(line + "\n" for line in events))
    if isinstance(inst, CvrpInstance):
        if res.incumbent is not None:
            tours, cost = extract_tours(res.incumbent, vm, inst, k, res.p)
            solution = {"tours": tours, "cost": cost, "k": k}
        else:
            solution = {"tours": None, "cost": None, "k": k}
    else:
        bins = extract_bins(res.incumbent, vm, inst) if res.incumbent is not None else None
        solution = {"bins": bins, "n_bins": None if bins is None else len(bins)}
    write_json(out / "solution.json", solution)
    summary = {"instance": mip.name, "status": res.status, "p": _jnum(res.p), "d": _jnum(res.d),
               "gap": None if res.p is None else _jnum(res.gap), "nodes": res.nodes,
               "branchings": res.branchings, "strategy": cfg.strategy}
    write_json(out / "result.json", summary)
    write_manifest(out, "solve", {"instance": os.path.abspath(args.instance)}, cfg,
                   [out / "events.jsonl", out / "solution.json", out / "result.json"])
    print(f"{res.status} p={summary['p']} d={summary['d']} nodes={res.nodes}")
    if res.status in ("optimal", "infeasible"):
        return EXIT_OK
    if res.status == "unbounded":
        return EXIT_ERROR
    return EXIT_LIMIT_INCUMBENT if res.p is not None else EXIT_LIMIT_OMEGA


def cmd_kmin(args, cfg: RunConfig) -> int:
    inst = load_instance(args.instance)
    if isinstance(inst, BppInstance):
        import numpy as np
        inst = CvrpInstance(inst.name, np.zeros((inst.n + 1, 2)),
                            np.concatenate([[0.0], inst.sizes]), inst.capacity)
    res = min_vehicles(inst, limits=parse_budget(cfg.budget), seed=cfg.seed)
    bound = demand_lower_bound(inst.demands[1:], inst.capacity)
    print(f"k_min={res.k_min if res.k_min is not None else 'unknown'} bound={bound}"
          + ("" if res.proven else " (not proven)"))
    if args.out:
        out = Path(args.out)
        write_json(out / "kmin.json", {"instance": inst.name, "k_min": res.k_min, "bound": bound,
                                        "proven": res.proven})
        write_manifest(out, "kmin", {"instance": os.path.abspath(args.instance)}, cfg,
                       [out / "kmin.json"])
    return EXIT_OK if res.proven else EXIT_LIMIT_INCUMBENT


def cmd_collect(args, cfg: RunConfig) -> int:
    inst = load_instance(args.instance)
    mip, _, _ = build_model(inst, cfg)
    ds = collect(mip, cfg.n_samples, cfg.mix_prob, cfg.seed,
                 node_limit=cfg.collect_node_limit or None, eta=cfg.eta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / ("dataset.jsonl.gz" if args.gzip else "dataset.jsonl")
    ds.save(path)
    write_manifest(out, "collect", {"instance": os.path.abspath(args.instance), "gzip": args.gzip},
                   cfg, [path])
    print(f"collected {len(ds)} samples -> {path}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    ds = Dataset.load(args.dataset)
    if ds.tags is None:
        ds = split(ds, cfg.validation_fraction, cfg.seed)
    spec = DEFAULT_SPECS[cfg.arch]
    if cfg.d:
        spec = spec.scaled(cfg.d)
    res = train(ds, spec, cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed,
                time_limit=cfg.train_time_limit or None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.params.save(out / "params.bin")
    # wall-clock figures stay out of the files so reruns are byte-identical
    metrics = [{k: v for k, v in row.items() if k != "elapsed_s"} for row in res.metrics]
    write_json(out / "metrics.json", {"best_epoch": res.best_epoch, "aborted": res.aborted,
                                      "epochs": [{k: _jnum(v) for k, v in m.items()} for m in metrics]})
    write_manifest(out, "train", {"dataset": os.path.abspath(args.dataset)}, cfg,
                   [out / "params.bin", out / "metrics.json"])
    best = res.metrics[res.best_epoch]
    print(f"best epoch {res.best_epoch}: validation accuracy {best['val_acc']:.3f}")
    return EXIT_ERROR if res.aborted else EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    instances = {}
    for path in args.instance:
        inst = load_instance(path)
        mip, _, _ = build_model(inst, cfg)
        instances[inst.name] = mip
    strategies = {}
    for entry in args.strategies:
        strat = make_strategy(entry)
        if entry.startswith("model:"):
            path, _, train_name = entry[len("model:"):].partition("@")
            train_name = train_name or Path(path).parent.name or Path(path).stem
            strategies[f"{strat.store.spec.arch}@{train_name}"] = (strat, train_name,
                                                                   strat.store.spec.arch)
        else:
            strategies[entry] = (strat, None, entry)
    records = run_matrix(strategies, instances, cfg.ladder, cfg.seed,
                         cfg.ladder_unit, workers=cfg.workers)
    out = Path(args.out)
    lines = [json.dumps(record_to_json(r), sort_keys=True) for r in records]
    write_text(out / "records.jsonl", "".join(line + "\n" for line in lines))
    write_manifest(out, "eval", {"instance": [os.path.abspath(p) for p in args.instance],
                                 "strategies": args.strategies}, cfg, [out / "records.jsonl"])
    failed = sum(r.failed for r in records)
    print(f"{len(records)} runs, {failed} failed")
    return EXIT_ERROR if failed else EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    try:
        with open(args.records, encoding="utf-8") as fh:
            records = [record_from_json(json.loads(line)) for line in fh if line.strip()]
    except OSError as exc:
        raise CliError(f"cannot read {args.records}: {exc.strerror or exc}") from None
    out = Path(args.out)
    written = [Path(p) for p in emit_report(records, out)]
    write_manifest(out, "report", {"records": os.path.abspath(args.records)}, cfg, written)
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


def cmd_replay(args, _cfg: RunConfig) -> int:
    """Re-run a manifest into a fresh directory and compare every output hash."""
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = RunConfig(**{**manifest["config"], "ladder": tuple(manifest["config"]["ladder"])})
    apply_tolerances(cfg)
    ns = argparse.Namespace(**manifest["args"], out=args.out)
    if manifest["command"] == "eval":
        ns.strategies = manifest["args"]["strategies"]
    rc = COMMANDS[manifest["command"]](ns, cfg)
    if rc not in (EXIT_OK, EXIT_LIMIT_INCUMBENT, EXIT_LIMIT_OMEGA):
        return rc
    out = Path(args.out)
    mismatched = [name for name, digest in manifest["outputs"].items()
                  if not (out / name).exists() or _sha256(out / name) != digest]
    if mismatched:
        print(f"replay differs in: {', '.join(sorted(mismatched))}", file=sys.stderr)
        return EXIT_ERROR
    print(f"replay reproduced {len(manifest['outputs'])} files byte-for-byte")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "kmin": cmd_kmin, "collect": cmd_collect, "train": cmd_train,
            "eval": cmd_eval, "report": cmd_report, "replay": cmd_replay}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="learnbranch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, instance=True, out_required=True):
        if instance:
            p.add_argument("--instance", required=True, help="CVRPLIB .vrp or OR-Library bin-packing file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--config", help="key=value file overriding defaults")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="single override, repeatable")
        p.add_argument("--workers", type=int)

    p = sub.add_parser("solve", help="solve one instance")
    common(p)
    p.add_argument("--strategy", help="sb | rpc | random | first | model:<path>")
    p.add_argument("--budget", help="<n>nodes or <n>s")
    p.add_argument("--k", type=int, help="fleet size (default: k_min)")

    p = sub.add_parser("kmin", help="minimum fleet size and the demand bound")
    common(p, out_required=False)
    p.add_argument("--budget")

    p = sub.add_parser("collect", help="record strong-branching samples")
    common(p)
    p.add_argument("--n-samples", type=int, dest="n_samples")
    p.add_argument("--mix-prob", type=float, dest="mix_prob")
    p.add_argument("--gzip", action="store_true")
    p.add_argument("--k", type=int)

    p = sub.add_parser("train", help="fit a policy to a dataset")
    common(p, instance=False)
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch", choices=sorted(DEFAULT_SPECS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--d", type=int)

    p = sub.add_parser("eval", help="run the strategy x instance matrix")
    common(p, instance=False)
    p.add_argument("--instance", action="append", required=True)
    p.add_argument("--strategy", action="append", dest="strategies", required=True,
                   help="repeatable; model:<path>[@train_instance] for learned policies")
    p.add_argument("--ladder", help="comma-separated rungs b,2b,4b,8b")
    p.add_argument("--k", type=int)

    p = sub.add_parser("report", help="ratio tables and figures from eval records")
    common(p, instance=False)
    p.add_argument("--records", required=True)

    p = sub.add_parser("replay", help="re-run a manifest and verify its outputs")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


FLAG_KEYS = ("seed", "strategy", "budget", "k", "workers", "n_samples", "mix_prob", "arch",
             "epochs", "d", "ladder")


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, cfg)
    pairs = {}
    for item in getattr(args, "set", []) or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = val.strip()
    cfg = apply_overrides(cfg, pairs)
    flags = {k: getattr(args, k) for k in FLAG_KEYS if getattr(args, k, None) is not None}
    if "ladder" in flags:
        flags["ladder"] = tuple(int(x) for x in flags["ladder"].split(","))
    cfg = dataclasses.replace(cfg, **flags)
    return seed_from_env(cfg)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig() if args.command == "replay" else resolve_config(args)
        apply_tolerances(cfg)
        return COMMANDS[args.command](args, cfg)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
