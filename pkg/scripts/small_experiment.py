"""Desk-scale version of the full pipeline.

Collect strong-branching samples on a few small CVRPs, train one policy per
architecture on each, run every policy and the classical rules over a set of
evaluation instances under a node ladder, then write the ratio tables and
figures. Defaults finish in a few minutes on one core.

    python scripts/small_experiment.py --out runs/small
    python scripts/small_experiment.py --out runs/small --set n_samples=1000 --set epochs=10
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from learnbranch.config import RunConfig, apply_overrides, apply_tolerances
from learnbranch.evaluation import emit_report, record_to_json, run_matrix
from learnbranch.imitation import PolicyStrategy, collect, random_baseline, split, train
from learnbranch.mip import RandomBranching, ReliablePseudoCost, StrongBranching
from learnbranch.models import build_cvrp_mip, bundled, min_vehicles, parse_cvrplib, random_cvrp
from learnbranch.nn import DEFAULT_SPECS

log = logging.getLogger("small_experiment")


def cvrp_mip(inst):
    return build_cvrp_mip(inst, min_vehicles(inst).k_min)[0]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--n-train", type=int, default=2, help="training instances")
    ap.add_argument("--n-eval", type=int, default=4, help="random evaluation instances (plus the bundled sample)")
    ap.add_argument("--customers", type=int, default=6)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    defaults = RunConfig(n_samples=400, epochs=8, d=16, ladder=(25, 50, 100, 200), workers=1)
    cfg = apply_overrides(defaults, dict(kv.split("=", 1) for kv in args.set))
    apply_tolerances(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    train_insts = {f"T{i}": cvrp_mip(random_cvrp(args.customers, rng, name=f"T{i}-n{args.customers + 1}"))
                   for i in range(args.n_train)}
    eval_insts = {f"E{i}": cvrp_mip(random_cvrp(args.customers + 1, rng, name=f"E{i}-n{args.customers + 2}"))
                  for i in range(args.n_eval)}
    sample = parse_cvrplib(bundled("LB-n9-k2.vrp").read_text())
    eval_insts[sample.name] = cvrp_mip(sample)

    strategies = {"sb": StrongBranching(), "rpc": ReliablePseudoCost(), "random": RandomBranching()}
    summary = {"config": cfg.as_dict(), "training": []}
    for tname, mip in train_insts.items():
        t = time.perf_counter()
        ds = split(collect(mip, cfg.n_samples, cfg.mix_prob, cfg.seed, eta=cfg.eta),
                   cfg.validation_fraction, cfg.seed)
        log.info("%s: %d samples in %.0fs", tname, len(ds), time.perf_counter() - t)
        ds.save(out / f"dataset_{tname}.jsonl.gz")
        for arch in ("gcnn", "sage", "gat"):
            spec = DEFAULT_SPECS[arch].scaled(cfg.d) if cfg.d else DEFAULT_SPECS[arch]
            res = train(ds, spec, cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed)
            res.params.save(out / f"params_{arch}_{tname}.bin")
            best = res.metrics[res.best_epoch]
            summary["training"].append({"arch": arch, "train_instance": tname, "best_epoch": res.best_epoch,
                                        "val_acc": best["val_acc"],
                                        "random_baseline": random_baseline(ds.validation)})
            log.info("%s on %s: validation accuracy %.3f (random %.3f)", arch, tname, best["val_acc"],
                     random_baseline(ds.validation))
            strategies[f"{arch}@{tname}"] = (PolicyStrategy(res.params), tname, arch)

    records = run_matrix(strategies, eval_insts, cfg.ladder, cfg.seed, cfg.ladder_unit, cfg.workers)
    (out / "records.jsonl").write_text("".join(json.dumps(record_to_json(r), sort_keys=True) + "\n"
                                               for r in records))
    written = emit_report(records, out / "report", solvers=["sb", "rpc", "random"])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d report files under %s", len(written), out / "report")


if __name__ == "__main__":
    main()
