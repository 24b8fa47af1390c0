"""Strong-branching sample collection, datasets, and supervised training of policies."""

from __future__ import annotations

import gzip
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .graph import SCHEMA, BipartiteGraph, SchemaError, batch, encode_context
from .mip import (DEFAULT_ETA, BranchingContext, Limits, MipProblem, PseudoCostState,
                  select_reliable_pseudocost, select_strong, solve)
from .nn import AdamState, ParameterStore, PolicySpec, adam_step, forward, forward_backward
from .nn import autodiff as ad

logger = logging.getLogger(__name__)

TRAIN, VALIDATION = "train", "validation"


@dataclass
class BranchSample:
    graph: BipartiteGraph
    candidates: list[int]
    target: int  # position in ``candidates``
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.target < len(self.candidates):
            raise ValueError("target must index into the candidate list")
        if list(np.flatnonzero(self.graph.candidates)) != list(self.candidates):
            raise ValueError("candidate list disagrees with the graph mask")

    @property
    def target_var(self) -> int:
        return self.candidates[self.target]

    def to_json(self) -> dict:
        g = self.graph
        return {
            "schema": g.schema,
            "vars": g.var_feats.tolist(),
            "cons": g.cons_feats.tolist(),
            "edges": [[int(r), int(v), float(c)] for r, v, c in zip(g.edge_rows, g.edge_vars, g.edge_vals)],
            "candidates": [int(c) for c in self.candidates],
            "target": int(self.target),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "BranchSample":
        n = len(rec["vars"])
        edges = np.array(rec["edges"], dtype=float).reshape(-1, 3)
        mask = np.zeros(n, dtype=bool)
        mask[np.asarray(rec["candidates"], dtype=np.int64)] = True
        cons = np.array(rec["cons"], dtype=float).reshape(-1, 5)
        graph = BipartiteGraph(np.array(rec["vars"], dtype=float).reshape(n, -1), cons,
                               edges[:, 0].astype(np.int64), edges[:, 1].astype(np.int64),
                               edges[:, 2].copy(), mask, rec["schema"])
        return cls(graph, list(rec["candidates"]), int(rec["target"]), dict(rec.get("meta", {})))


@dataclass
class Dataset:
    samples: list[BranchSample]
    tags: list[str] | None = None
    schema: str = SCHEMA
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def _tagged(self, tag: str) -> list[BranchSample]:
        if self.tags is None:
            raise ValueError("dataset has not been split")
        return [s for s, t in zip(self.samples, self.tags) if t == tag]

    @property
    def train(self) -> list[BranchSample]:
        return self._tagged(TRAIN)

    @property
    def validation(self) -> list[BranchSample]:
        return self._tagged(VALIDATION)

    def to_jsonl(self) -> str:
        lines = []
        for k, s in enumerate(self.samples):
            rec = s.to_json()
            if self.tags is not None:
                rec["split"] = self.tags[k]
            lines.append(json.dumps(rec, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    def save(self, path) -> None:
        data = self.to_jsonl().encode()
        if str(path).endswith(".gz"):
            # mtime=0 keeps the container byte-identical across runs
            with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
                fh.write(data)
        else:
            with open(path, "wb") as fh:
                fh.write(data)

    @classmethod
    def load(cls, path) -> "Dataset":
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "rt") as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        schemas = {r["schema"] for r in recs}
        if len(schemas) > 1:
            raise SchemaError(f"mixed schemas in {path}: {sorted(schemas)}")
        tags = [r["split"] for r in recs] if recs and all("split" in r for r in recs) else None
        return cls([BranchSample.from_json(r) for r in recs], tags,
                   schemas.pop() if schemas else SCHEMA)


class _Enough(Exception):
    pass


class MixedStrategy:
    """Coin flip per branching between strong branching (recorded) and reliability pseudo-cost."""

    name = "mixed"

    def __init__(self, mix_prob: float, sink: list, n_samples: int, provenance: dict):
        self.mix_prob = mix_prob
        self.sink = sink
        self.n_samples = n_samples
        self.provenance = provenance

    def select(self, ctx: BranchingContext) -> int:
        if ctx.rng.random() < self.mix_prob:
            graph = encode_context(ctx)
            var = select_strong(ctx)
            meta = dict(self.provenance, node=ctx.node.id, depth=ctx.node.depth)
            self.sink.append(BranchSample(graph, list(ctx.candidates), ctx.candidates.index(var), meta))
            if len(self.sink) >= self.n_samples:
                raise _Enough
            return var
        return select_reliable_pseudocost(ctx)


def collect(mip: MipProblem, n_samples: int, mix_prob: float = 0.5, seed: int = 0,
            node_limit: int | None = None, max_restarts: int = 10_000,
            eta: int = DEFAULT_ETA) -> Dataset:
    """Run mixed-strategy solves, restarting with fresh seeds, until ``n_samples`` are recorded."""
    if not 0.0 <= mix_prob <= 1.0:
        raise ValueError("mix_prob must lie in [0, 1]")
    samples: list[BranchSample] = []
    if mix_prob == 0.0 or n_samples <= 0:
        if mix_prob == 0.0:
            logger.warning("mix_prob is 0: strong branching never runs, dataset is empty")
        return Dataset(samples, seed=seed)
    limits = Limits(node_limit=node_limit)
    for restart in range(max_restarts):
        strat = MixedStrategy(mix_prob, samples, n_samples,
                              {"instance": mip.name, "seed": seed, "restart": restart})
        try:
            res = solve(mip, strat, limits, seed=[seed, restart],
                        pseudocosts=PseudoCostState(mip.lp.n_vars, eta))
        except _Enough:
            break
        if res.branchings == 0:
            logger.warning("%s is solved without branching; no samples can be collected", mip.name)
            break
    else:
        logger.warning("stopped after %d restarts with %d samples", max_restarts, len(samples))
    return Dataset(samples[:n_samples], seed=seed)


def split(dataset: Dataset, validation_fraction: float = 0.1, seed: int = 0) -> Dataset:
    """Seeded shuffle, then tag a validation share; the sample order is kept."""
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError("validation_fraction must lie in (0, 1)")
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least two samples to split")
    n_val = min(max(1, int(round(validation_fraction * n))), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    tags = [TRAIN] * n
    for k in order[:n_val]:
        tags[int(k)] = VALIDATION
    return Dataset(list(dataset.samples), tags, dataset.schema, dataset.seed)


def _batched(samples: list[BranchSample]) -> tuple[BipartiteGraph, np.ndarray]:
    graph = batch([s.graph for s in samples])
    offsets = np.cumsum([0] + [s.graph.n for s in samples[:-1]])
    targets = np.array([off + s.target_var for off, s in zip(offsets, samples)], dtype=np.int64)
    return graph, targets


def evaluate(store: ParameterStore, samples: list[BranchSample], batch_size: int = 256) -> tuple[float, float]:
    """Mean candidate NLL and top-1 accuracy (lowest index wins ties)."""
    if not samples:
        return math.nan, math.nan
    total_loss, hits = 0.0, 0
    params = store.tensors(requires_grad=False)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        graph, targets = _batched(chunk)
        logits = forward(store.spec, graph, params)
        loss = ad.candidate_nll(logits, graph.candidates, graph.var_graph, targets)
        total_loss += float(loss.value) * len(chunk)
        z = np.where(graph.candidates, logits.value, -np.inf)
        off = 0
        for s, t in zip(chunk, targets):
            n = s.graph.n
            hits += int(off + int(np.argmax(z[off:off + n])) == t)
            off += n
    return total_loss / len(samples), hits / len(samples)


def random_baseline(samples: list[BranchSample]) -> float:
    """Expected accuracy of picking a candidate uniformly at random."""
    return float(np.mean([1.0 / len(s.candidates) for s in samples])) if samples else math.nan


@dataclass
class TrainResult:
    params: ParameterStore
    metrics: list[dict]
    best_epoch: int
    aborted: bool = False


def train(dataset: Dataset, spec: PolicySpec, epochs: int = 20, batch_size: int = 32,
          lr: float = 1e-3, seed: int = 0, time_limit: float | None = None) -> TrainResult:
    """Minimise candidate NLL on the train split; keep the epoch with the best validation accuracy.

    Validation samples are only ever evaluated, never passed to the optimiser.
    """
    if dataset.schema != spec.schema:
        raise SchemaError(f"dataset schema {dataset.schema!r} != policy schema {spec.schema!r}")
    if dataset.tags is None:
        dataset = split(dataset, seed=seed)
    train_set, val_set = dataset.train, dataset.validation
    if not train_set:
        raise ValueError("empty training split")
    store = ParameterStore.initialize(spec, seed)
    state = AdamState(lr=lr)
    rng = np.random.default_rng([seed, 1])
    start = time.perf_counter()

    def record(epoch: int, train_loss: float) -> dict:
        vl, va = evaluate(store, val_set)
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": vl, "val_acc": va,
               "elapsed_s": time.perf_counter() - start}
        logger.info("epoch %d train %.4f val %.4f acc %.3f", epoch, train_loss, vl, va)
        return row

    metrics = [record(0, evaluate(store, train_set)[0])]
    best, best_acc, best_epoch = store.copy(), metrics[0]["val_acc"], 0
    aborted = False
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for b in range(0, len(order), batch_size):
            chunk = [train_set[int(k)] for k in order[b:b + batch_size]]
            graph, targets = _batched(chunk)
            loss, grads = forward_backward(store, graph, targets)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                logger.error("non-finite loss at epoch %d; keeping the last finite checkpoint", epoch)
                aborted = True
                break
            adam_step(store, grads, state)
            losses.append(loss * len(chunk))
        if aborted:
            break
        metrics.append(record(epoch, float(np.sum(losses)) / len(train_set)))
        acc = metrics[-1]["val_acc"]
        if acc > best_acc or (math.isnan(best_acc) and not math.isnan(acc)):
            best, best_acc, best_epoch = store.copy(), acc, epoch
        if time_limit is not None and time.perf_counter() - start > time_limit:
            logger.warning("training time limit reached after epoch %d", epoch)
            break
    return TrainResult(best, metrics, best_epoch, aborted)


class PolicyStrategy:
    """Branch on the argmax of a trained policy's masked logits."""

    def __init__(self, store: ParameterStore, name: str | None = None):
        if store.spec.schema != SCHEMA:
            raise SchemaError(f"policy expects schema {store.spec.schema!r}, encoder produces {SCHEMA!r}")
        self.store = store
        self.name = name or f"policy:{store.spec.arch}"
        self._params = store.tensors(requires_grad=False)

    def select(self, ctx: BranchingContext) -> int:
        graph = encode_context(ctx)
        z = forward(self.store.spec, graph, self._params).value
        z = np.where(graph.candidates, z, -np.inf)
        if not np.any(np.isfinite(z)):
            # degenerate parameters (e.g. NaN) fall back to the first candidate
            return ctx.candidates[0]
        return int(np.argmax(z))


def policy_strategy(store: ParameterStore, name: str | None = None) -> PolicyStrategy:
    return PolicyStrategy(store, name)
