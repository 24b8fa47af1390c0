import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from learnbranch.graph import N_CONS_FEATS, N_VAR_FEATS, BipartiteGraph, SchemaError, augment, batch
from learnbranch.nn import (DEFAULT_SPECS, AdamState, ParameterStore, PolicySpec, adam_step, forward,
                            forward_backward, loss_only, predict)
from learnbranch.nn import autodiff as ad
from learnbranch.nn.policies import attention_weights

ARCHS = ["gcnn", "sage", "gat"]


def toy_graph(rng, n=None, m=None, density=0.6):
    n = n or int(rng.integers(2, 6))
    m = m or int(rng.integers(1, 4))
    A = rng.normal(size=(m, n)) * (rng.random((m, n)) < density)
    A[0, 0] = A[0, 0] or 1.0
    rows, cols = np.nonzero(A)
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=min(n, max(2, n // 2)), replace=False)] = True
    return BipartiteGraph(rng.normal(size=(n, N_VAR_FEATS)), rng.normal(size=(m, N_CONS_FEATS)),
                          rows.astype(np.int64), cols.astype(np.int64), A[rows, cols], mask)


def perturbed_store(spec, seed):
    """Glorot weights plus nonzero biases and gains so every parameter matters."""
    store = ParameterStore.initialize(spec, seed)
    rng = np.random.default_rng(seed + 1)
    for v in store.values.values():
        v += 0.1 * rng.normal(size=v.shape)
    return store


# -- numpy reference implementations ------------------------------------------------


def np_ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def relu(x):
    return np.maximum(x, 0.0)


def ref_gcnn(bg, V, layers=1):
    hx = relu(np_ln(bg.var_feats, V["var_ln.gain"], V["var_ln.bias"]) @ V["var_embed.W"].T + V["var_embed.b"])
    hc = relu(np_ln(bg.cons_feats, V["cons_ln.gain"], V["cons_ln.bias"]) @ V["cons_embed.W"].T + V["cons_embed.b"])
    he = [a * V["edge_lift.gain"] + V["edge_lift.bias"] for a in bg.edge_vals]

    def half(prefix, src, dst, src_of_edge, dst_of_edge, n_dst):
        agg = np.zeros((n_dst, dst.shape[1]))
        for e in range(len(he)):
            s, t = src_of_edge[e], dst_of_edge[e]
            pre = (V[f"{prefix}.src.W"] @ src[s] + V[f"{prefix}.src.b"] + V[f"{prefix}.edge.W"] @ he[e]
                   + V[f"{prefix}.dst.W"] @ dst[t])
            hid = relu(V[f"{prefix}.hidden.W"] @ pre + V[f"{prefix}.hidden.b"])
            out = V[f"{prefix}.out.W"] @ hid + V[f"{prefix}.out.b"]
            agg[t] += np_ln(out, V[f"{prefix}.msg_ln.gain"], V[f"{prefix}.msg_ln.bias"])
        return np.array([V[f"{prefix}.self.W"] @ dst[t] + V[f"{prefix}.self.b"] + V[f"{prefix}.agg.W"] @ agg[t]
                         for t in range(n_dst)])

    for l in range(layers):
        hc = half(f"conv{l}.c", hx, hc, bg.edge_vars, bg.edge_rows, bg.m)
        hx = half(f"conv{l}.v", hc, hx, bg.edge_rows, bg.edge_vars, bg.n)
    hid = relu(hx @ V["head.hidden.W"].T + V["head.hidden.b"])
    return (hid @ V["head.out.W"].T + V["head.out.b"])[:, 0]


def neighbours(ag):
    N = ag.n + ag.m
    nb = [[] for _ in range(N)]
    for r, c, v in zip(ag.adj_rows, ag.adj_cols, ag.adj_vals):
        nb[r].append((c, v))
    return nb


def ref_sage(bg, V, layers):
    ag = augment(bg)
    nb = neighbours(ag)
    h = ag.H @ V["lift.W"].T + V["lift.b"]
    for l in range(layers):
        new = []
        for i in range(len(h)):
            m = np.mean([h[j] for j, _ in nb[i]], axis=0) if nb[i] else np.zeros(h.shape[1])
            new.append(relu(V[f"layer{l}.self.W"] @ h[i] + V[f"layer{l}.self.b"] + V[f"layer{l}.nb.W"] @ m))
        h = np.array(new)
    return (h[:bg.n] @ V["readout.W"].T + V["readout.b"])[:, 0]


def ref_gat(bg, V, spec):
    ag = augment(bg)
    nb = neighbours(ag)
    d = spec.d
    h = ag.H @ V["lift.W"].T + V["lift.b"]
    for l in range(spec.layers):
        new = []
        for i in range(len(h)):
            heads = []
            for k in range(spec.heads[l]):
                w = V[f"layer{l}.head{k}.w_a"]
                if not nb[i]:
                    heads.append(np.zeros(d))
                    continue
                s = []
                for j, _ in nb[i]:
                    z = w[:d] @ h[i] + w[d:] @ h[j]
                    s.append(z if z > 0 else spec.slope * z)
                s = np.array(s)
                a = np.exp(s - s.max())
                a /= a.sum()
                heads.append(relu(sum(a[t] * aij * h[j] for t, (j, aij) in enumerate(nb[i]))))
            m = np.mean(heads, axis=0)
            new.append(relu(V[f"layer{l}.self.W"] @ h[i] + V[f"layer{l}.self.b"] + V[f"layer{l}.nb.W"] @ m))
        h = np.array(new)
    return (h[:bg.n] @ V["readout.W"].T + V["readout.b"])[:, 0]


# -- autodiff primitives -----------------------------------------------------------


def test_layernorm_constant_and_pair():
    one, zero = ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4))
    out = ad.layernorm(ad.Tensor(np.full((1, 4), 3.0)), one, zero)
    np.testing.assert_array_equal(out.value, 0.0)
    pair = ad.layernorm(ad.Tensor(np.array([[1.0, -1.0]])), ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)))
    np.testing.assert_allclose(pair.value, [[1, -1]], atol=1e-5)


def test_layernorm_two_pass_oracle():
    x = np.random.default_rng(0).normal(size=8)
    mean = sum(x) / 8
    var = sum((v - mean) ** 2 for v in x) / 8
    expected = [(v - mean) / math.sqrt(var + 1e-5) for v in x]
    got = ad.layernorm(ad.Tensor(x[None, :]), ad.Tensor(np.ones(8)), ad.Tensor(np.zeros(8))).value[0]
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_candidate_nll_equal_logits_is_ln2():
    logits = ad.Tensor(np.array([0.7, 0.7, 5.0]))
    loss = ad.candidate_nll(logits, np.array([True, True, False]), np.zeros(3, dtype=np.int64), np.array([0]))
    assert loss.value == pytest.approx(math.log(2))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=6), st.integers(0, 100))
def test_candidate_nll_permutation_symmetry(values, seed):
    z = np.array(values)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(z))
    mask = np.ones(len(z), dtype=bool)
    g = np.zeros(len(z), dtype=np.int64)
    a = ad.candidate_nll(ad.Tensor(z), mask, g, np.array([0])).value
    inv = int(np.flatnonzero(perm == 0)[0])
    b = ad.candidate_nll(ad.Tensor(z[perm]), mask, g, np.array([inv])).value
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_segment_mean_empty_segment_is_zero():
    x = ad.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = ad.segment_mean(x, np.array([0, 0]), 3)
    np.testing.assert_array_equal(out.value, [[2, 3], [0, 0], [0, 0]])


# -- forward passes against references -----------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_gcnn_matches_unrolled(seed):
    bg = toy_graph(np.random.default_rng(seed), n=3, m=2)
    spec = DEFAULT_SPECS["gcnn"].scaled(6)
    store = perturbed_store(spec, seed)
    got = forward(spec, bg, store.tensors(False)).value
    np.testing.assert_allclose(got, ref_gcnn(bg, store.values), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_sage_matches_unrolled(seed):
    bg = toy_graph(np.random.default_rng(seed), n=2, m=1, density=1.0)
    spec = PolicySpec("sage", 5, 2)
    store = perturbed_store(spec, seed)
    got = forward(spec, bg, store.tensors(False)).value
    np.testing.assert_allclose(got, ref_sage(bg, store.values, 2), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_gat_matches_unrolled(seed):
    bg = toy_graph(np.random.default_rng(seed), n=2, m=1, density=1.0)
    spec = PolicySpec("gat", 5, 1, 0.2, (2,))
    store = perturbed_store(spec, seed)
    got = forward(spec, bg, store.tensors(False)).value
    np.testing.assert_allclose(got, ref_gat(bg, store.values, spec), rtol=0, atol=1e-10)


@pytest.mark.parametrize("arch", ARCHS)
def test_default_depth_matches_reference(arch):
    bg = toy_graph(np.random.default_rng(9), n=4, m=3)
    spec = DEFAULT_SPECS[arch].scaled(4)
    store = perturbed_store(spec, 3)
    got = forward(spec, bg, store.tensors(False)).value
    ref = {"gcnn": lambda: ref_gcnn(bg, store.values, spec.layers),
           "sage": lambda: ref_sage(bg, store.values, spec.layers),
           "gat": lambda: ref_gat(bg, store.values, spec)}[arch]()
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-10)


def test_gat_single_neighbour_weight_is_coefficient():
    bg = toy_graph(np.random.default_rng(0), n=1, m=1, density=1.0)
    ag = augment(bg)
    spec = PolicySpec("gat", 4, 1, 0.2, (1,))
    store = perturbed_store(spec, 0)
    P = store.tensors(False)
    h = ad.linear(ad.Tensor(ag.H), P["lift.W"], P["lift.b"])
    alpha = attention_weights(h, P["layer0.head0.w_a"], ag, 0.2, 4)
    np.testing.assert_allclose(alpha.value, ag.adj_vals, rtol=0, atol=1e-15)


@pytest.mark.parametrize("arch", ARCHS)
def test_zero_parameters_pick_lowest_candidate(arch):
    bg = toy_graph(np.random.default_rng(4), n=5, m=2)
    store = ParameterStore.zeros(DEFAULT_SPECS[arch].scaled(4))
    assert predict(store, bg) == int(np.flatnonzero(bg.candidates)[0])


@pytest.mark.parametrize("arch", ARCHS)
def test_no_edges_makes_constraints_irrelevant(arch):
    rng = np.random.default_rng(1)
    bg = toy_graph(rng, n=4, m=2)
    empty = np.zeros(0, dtype=np.int64)
    g1 = BipartiteGraph(bg.var_feats, bg.cons_feats, empty, empty, np.zeros(0), bg.candidates)
    g2 = BipartiteGraph(bg.var_feats, rng.normal(size=bg.cons_feats.shape), empty, empty, np.zeros(0),
                        bg.candidates)
    spec = DEFAULT_SPECS[arch].scaled(4)
    P = perturbed_store(spec, 2).tensors(False)
    np.testing.assert_allclose(forward(spec, g1, P).value, forward(spec, g2, P).value, rtol=0, atol=1e-12)


def test_schema_mismatch_rejected():
    bg = toy_graph(np.random.default_rng(0))
    bg.schema = "v0"
    spec = DEFAULT_SPECS["sage"].scaled(4)
    with pytest.raises(SchemaError):
        forward(spec, bg, ParameterStore.zeros(spec).tensors())


# -- gradients ---------------------------------------------------------------------


def fd_check(store, graph, targets, eps=1e-5):
    loss, grads = forward_backward(store, graph, targets)
    worst = 0.0
    for name, val in store.values.items():
        flat = val.reshape(-1)
        gflat = grads[name].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = loss_only(store, graph, targets)
            flat[k] = orig - eps
            down = loss_only(store, graph, targets)
            flat[k] = orig
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(gflat[k] - fd) / max(abs(gflat[k]), abs(fd), 1e-6))
    return worst


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("seed", range(2))
def test_gradients_match_finite_differences(arch, seed):
    bg = toy_graph(np.random.default_rng(seed + 10))
    store = perturbed_store(DEFAULT_SPECS[arch].scaled(8), seed)
    target = int(np.flatnonzero(bg.candidates)[-1])
    assert fd_check(store, bg, [target]) < 1e-4


def test_batched_gradient_is_mean_of_singles():
    rng = np.random.default_rng(5)
    g1, g2 = toy_graph(rng), toy_graph(rng)
    store = perturbed_store(DEFAULT_SPECS["sage"].scaled(4), 0)
    t1, t2 = int(g1.candidate_index[0]), int(g2.candidate_index[-1])
    l1, d1 = forward_backward(store, g1, [t1])
    l2, d2 = forward_backward(store, g2, [t2])
    lb, db = forward_backward(store, batch([g1, g2]), [t1, g1.n + t2])
    assert lb == pytest.approx((l1 + l2) / 2)
    for k in db:
        np.testing.assert_allclose(db[k], (d1[k] + d2[k]) / 2, atol=1e-12)


# -- Adam ----------------------------------------------------------------------------


def _scalar_store(w):
    spec = PolicySpec("sage", 1, 1)
    store = ParameterStore.zeros(spec)
    store.values["lift.b"][0] = w
    return store


def test_adam_zero_gradient_keeps_parameters():
    store = perturbed_store(DEFAULT_SPECS["sage"].scaled(4), 0)
    before = {k: v.copy() for k, v in store.values.items()}
    adam_step(store, {k: np.zeros_like(v) for k, v in store.values.items()}, AdamState())
    for k in before:
        np.testing.assert_array_equal(store.values[k], before[k])


def test_adam_first_step_by_hand():
    store = _scalar_store(2.0)
    g = {k: np.zeros_like(v) for k, v in store.values.items()}
    g["lift.b"][0] = 0.4
    adam_step(store, g, AdamState(lr=0.01))
    m = 0.1 * 0.4 / (1 - 0.9)
    v = 0.001 * 0.16 / (1 - 0.999)
    assert store.values["lift.b"][0] == pytest.approx(2.0 - 0.01 * m / (math.sqrt(v) + 1e-8), abs=1e-15)


def test_adam_duplicate_batch_is_scale_invariant():
    # f(w) = (w - 3)^2 / 2: a batch holding the same sample twice doubles the summed gradient,
    # which bias-corrected Adam normalises away
    def run(mult):
        store, state = _scalar_store(0.0), AdamState(lr=0.05)
        for _ in range(2):
            w = store.values["lift.b"][0]
            g = {k: np.zeros_like(v) for k, v in store.values.items()}
            g["lift.b"][0] = mult * (w - 3.0)
            adam_step(store, g, state)
        return store.values["lift.b"][0]
    assert run(2.0) == pytest.approx(run(1.0), abs=1e-6)


# -- storage ---------------------------------------------------------------------------


@pytest.mark.parametrize("arch", ARCHS)
def test_parameter_bytes_roundtrip(arch, tmp_path):
    store = ParameterStore.initialize(DEFAULT_SPECS[arch].scaled(4), 7)
    blob = store.to_bytes()
    again = ParameterStore.from_bytes(blob)
    assert again.to_bytes() == blob and again.spec == store.spec
    store.save(tmp_path / "p.bin")
    assert ParameterStore.load(tmp_path / "p.bin").to_bytes() == blob
    with pytest.raises(ValueError):
        ParameterStore.from_bytes(b"nope" + blob)


def test_initialisation_is_seeded():
    a = ParameterStore.initialize(DEFAULT_SPECS["gat"].scaled(4), 1).to_bytes()
    b = ParameterStore.initialize(DEFAULT_SPECS["gat"].scaled(4), 1).to_bytes()
    c = ParameterStore.initialize(DEFAULT_SPECS["gat"].scaled(4), 2).to_bytes()
    assert a == b != c
