"""Rebuild the scripted evaluation matrix bundled as ``data/fixture_records.jsonl``.

Every run has dual bound 64 and incumbent 64 * (1 + gap), so gaps are exact
binary fractions and the ratio tables can be worked out by hand. ``None`` marks
a rung without an incumbent.
"""

import argparse
import json
from pathlib import Path

LADDER = (1000, 2000, 4000, 8000)
D = 64.0

# (strategy, train instance, eval instance): (gaps, tree-size estimates)
RUNS = {
    ("sb", None, "E1"): ([.5, .25, .125, .0625], [100, 200, 400, 800]),
    ("sb", None, "E2"): ([None, .5, .25, .125], [None, 50, 50, 50]),
    ("gcnn", "T1", "E1"): ([.25, .125, .125, .0625], [200, 200, 400, 1600]),
    ("gcnn", "T1", "E2"): ([None, .25, .25, .125], [None, 100, 100, 100]),
    ("gcnn", "T2", "E1"): ([.5, .25, .125, .0625], [100, 200, 400, 800]),
    ("gcnn", "T2", "E2"): ([.5, .5, .25, .125], [50, 50, 50, 50]),
}


def records():
    for (strategy, train, inst), (gaps, tses) in RUNS.items():
        cps = [{"budget": b, "d": D, "gap": g, "nodes": b, "p": None if g is None else D * (1 + g), "tse": t}
               for b, g, t in zip(LADDER, gaps, tses)]
        yield {"checkpoints": cps, "error": None, "eval_instance": inst, "status": "node_limit",
               "strategy": strategy, "train_instance": train, "unit": "nodes"}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).parents[1] / "src/learnbranch/data/fixture_records.jsonl"))
    args = ap.parse_args()
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records())
    Path(args.out).write_text(text)
    print(f"wrote {len(RUNS)} records to {args.out}")


if __name__ == "__main__":
    main()
