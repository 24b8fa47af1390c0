import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from learnbranch.graph import N_CONS_FEATS, N_VAR_FEATS, BipartiteGraph, SchemaError, encode_context
from learnbranch.imitation import (BranchSample, Dataset, MixedStrategy, PolicyStrategy, collect,
                                   evaluate, random_baseline, split, train)
from learnbranch.mip import FirstFractional, StrongBranching, solve
from learnbranch.models import build_cvrp_mip, random_cvrp
from learnbranch.nn import DEFAULT_SPECS, ParameterStore

from oracles import cvrp_brute_force


def small_cvrp(n=5, seed=3, k=2):
    inst = random_cvrp(n, np.random.default_rng(seed))
    return inst, build_cvrp_mip(inst, k)[0]


def separable_sample(rng, n=6):
    """The target is the only candidate whose third feature is high."""
    m = 2
    mask = np.zeros(n, dtype=bool)
    cands = sorted(rng.choice(n, size=3, replace=False).tolist())
    mask[cands] = True
    target = int(rng.integers(3))
    X = rng.normal(scale=0.1, size=(n, N_VAR_FEATS))
    X[:, 2] = -2.0
    X[cands[target], 2] = 2.0
    rows = np.repeat(np.arange(m), n)
    cols = np.tile(np.arange(n), m)
    g = BipartiteGraph(X, rng.normal(size=(m, N_CONS_FEATS)), rows, cols, np.ones(m * n), mask)
    return BranchSample(g, cands, target)


def separable_dataset(count=40, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset([separable_sample(rng) for _ in range(count)])


# -- collection -----------------------------------------------------------------------


def test_full_mix_records_every_branching():
    _, mip = small_cvrp()
    sink = []
    res = solve(mip, MixedStrategy(1.0, sink, 10**9, {}))
    assert res.branchings > 0 and len(sink) == res.branchings
    for s in sink:
        assert s.target_var in s.candidates


def test_recorded_target_is_strong_branching_choice():
    _, mip = small_cvrp()
    sb_choices, mixed = [], []
    res_sb = solve(mip, _Tap(StrongBranching(), sb_choices))
    res_mix = solve(mip, MixedStrategy(1.0, mixed, 10**9, {}))
    assert [s.target_var for s in mixed] == sb_choices
    assert res_sb.p == res_mix.p


class _Tap:
    def __init__(self, inner, log):
        self.inner, self.log, self.name = inner, log, inner.name

    def select(self, ctx):
        v = self.inner.select(ctx)
        self.log.append(v)
        return v


def test_zero_mix_gives_empty_dataset_with_warning(caplog):
    _, mip = small_cvrp()
    with caplog.at_level(logging.WARNING):
        ds = collect(mip, 50, mix_prob=0.0)
    assert len(ds) == 0
    assert any("mix_prob" in r.message for r in caplog.records)


def test_mix_prob_out_of_range():
    _, mip = small_cvrp()
    with pytest.raises(ValueError):
        collect(mip, 5, mix_prob=1.5)


def test_collection_is_deterministic():
    _, mip = small_cvrp()
    a = collect(mip, 200, mix_prob=0.5, seed=4)
    b = collect(mip, 200, mix_prob=0.5, seed=4)
    assert len(a) == 200
    assert a.to_jsonl() == b.to_jsonl()
    c = collect(mip, 200, mix_prob=0.5, seed=5)
    assert c.to_jsonl() != a.to_jsonl()


def test_samples_encode_their_node():
    _, mip = small_cvrp()
    ds = collect(mip, 10, mix_prob=1.0, seed=0)
    for s in ds.samples:
        assert s.graph.n == mip.lp.n_vars and s.graph.m == mip.lp.n_rows
        assert s.meta["instance"] == mip.name


# -- datasets -------------------------------------------------------------------------


def test_dataset_jsonl_and_gzip_roundtrip(tmp_path):
    ds = split(separable_dataset(12), 0.25, seed=1)
    for name in ("d.jsonl", "d.jsonl.gz"):
        ds.save(tmp_path / name)
        again = Dataset.load(tmp_path / name)
        assert again.to_jsonl() == ds.to_jsonl()
        assert again.tags == ds.tags
    first = (tmp_path / "d.jsonl.gz").read_bytes()
    ds.save(tmp_path / "d.jsonl.gz")
    assert (tmp_path / "d.jsonl.gz").read_bytes() == first


def test_mixed_schema_file_rejected(tmp_path):
    ds = separable_dataset(2)
    lines = ds.to_jsonl().splitlines()
    lines[1] = lines[1].replace(f'"schema": "{ds.schema}"', '"schema": "v0"')
    (tmp_path / "x.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError):
        Dataset.load(tmp_path / "x.jsonl")


def test_split_ten_samples():
    ds = split(separable_dataset(10), 0.2, seed=3)
    assert len(ds.train) == 8 and len(ds.validation) == 2
    assert split(separable_dataset(10), 0.2, seed=3).tags == ds.tags


@settings(max_examples=1000, deadline=None)
@given(st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_partitions(n, frac, seed):
    ds = Dataset([object()] * n)  # contents are irrelevant to the split
    out = split(ds, frac, seed)
    val = {k for k, t in enumerate(out.tags) if t == "validation"}
    tr = {k for k, t in enumerate(out.tags) if t == "train"}
    assert val and tr and not val & tr and len(val | tr) == n


def test_random_baseline():
    ds = separable_dataset(5)
    assert random_baseline(ds.samples) == pytest.approx(1 / 3)


# -- training -------------------------------------------------------------------------


@pytest.mark.parametrize("arch", ["gcnn", "sage", "gat"])
def test_separable_data_is_learned(arch):
    ds = split(separable_dataset(40), 0.25, seed=0)
    res = train(ds, DEFAULT_SPECS[arch].scaled(16), epochs=50, batch_size=8, lr=1e-2, seed=0)
    assert evaluate(res.params, ds.samples)[1] == 1.0


def test_zero_epochs_returns_initialisation():
    spec = DEFAULT_SPECS["gcnn"].scaled(8)
    res = train(separable_dataset(10), spec, epochs=0, seed=6)
    assert res.params.to_bytes() == ParameterStore.initialize(spec, 6).to_bytes()
    assert len(res.metrics) == 1 and res.best_epoch == 0


def test_first_epoch_does_not_increase_loss():
    ds = split(separable_dataset(40), 0.25, seed=0)
    res = train(ds, DEFAULT_SPECS["sage"].scaled(8), epochs=1, batch_size=8, lr=1e-2, seed=0)
    assert res.metrics[1]["val_loss"] <= res.metrics[0]["val_loss"]


def test_training_is_deterministic():
    ds = split(separable_dataset(20), 0.25, seed=0)
    spec = DEFAULT_SPECS["gat"].scaled(8)
    a = train(ds, spec, epochs=3, seed=2)
    b = train(ds, spec, epochs=3, seed=2)
    assert a.params.to_bytes() == b.params.to_bytes()


def test_schema_mismatch_refused():
    ds = separable_dataset(4)
    ds.schema = "v0"
    with pytest.raises(SchemaError):
        train(ds, DEFAULT_SPECS["gcnn"].scaled(8), epochs=1)


# -- policy as a branching strategy -------------------------------------------------------


def test_zero_policy_branches_like_first_fractional():
    _, mip = small_cvrp()
    store = ParameterStore.zeros(DEFAULT_SPECS["gcnn"].scaled(8))
    a, b = [], []
    ra = solve(mip, _Tap(PolicyStrategy(store), a))
    rb = solve(mip, _Tap(FirstFractional(), b))
    assert a == b and ra.nodes == rb.nodes and ra.p == rb.p


def test_policy_select_is_pure():
    _, mip = small_cvrp()
    store = ParameterStore.initialize(DEFAULT_SPECS["sage"].scaled(8), 1)
    policy = PolicyStrategy(store)

    class Twice:
        name = "twice"

        def select(self, ctx):
            before = encode_context(ctx).var_feats.copy()
            v1, v2 = policy.select(ctx), policy.select(ctx)
            assert v1 == v2 and v1 in ctx.candidates
            np.testing.assert_array_equal(encode_context(ctx).var_feats, before)
            return v1
    solve(mip, Twice())


@pytest.mark.parametrize("seed", range(3))
def test_policy_solve_reaches_true_optimum(seed):
    inst, mip = small_cvrp(seed=seed + 20)
    store = ParameterStore.initialize(DEFAULT_SPECS["gcnn"].scaled(8), seed)
    res = solve(mip, PolicyStrategy(store))
    expected = cvrp_brute_force(inst.coords, inst.demands, inst.capacity, 2)
    if expected is None:
        assert res.status == "infeasible"
    else:
        assert res.status == "optimal" and res.p == pytest.approx(expected)
