"""GCNN, GraphSAGE and GAT branching policies over the encoded node graph."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from ..graph import (N_CONS_FEATS, N_VAR_FEATS, SCHEMA, AugmentedGraph, BipartiteGraph,
                     SchemaError, augment)
from . import autodiff as ad
from .autodiff import Tensor

ARCHITECTURES = ("gcnn", "sage", "gat")
MAGIC = b"LBPARAM1"


@dataclass(frozen=True)
class PolicySpec:
    arch: str
    d: int
    layers: int
    slope: float = 0.2
    heads: tuple[int, ...] = ()
    schema: str = SCHEMA

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.d < 1 or self.layers < 1:
            raise ValueError("d and layers must be at least 1")
        if self.arch == "gat":
            heads = tuple(int(k) for k in self.heads)
            if len(heads) != self.layers or min(heads) < 1:
                raise ValueError("GAT needs one positive head count per layer")
            object.__setattr__(self, "heads", heads)
        elif self.heads:
            raise ValueError("head counts only apply to GAT")

    def scaled(self, d: int) -> "PolicySpec":
        return PolicySpec(self.arch, d, self.layers, self.slope, self.heads, self.schema)


DEFAULT_SPECS = {
    "gcnn": PolicySpec("gcnn", 64, 1, 0.2),
    "sage": PolicySpec("sage", 64, 5),
    "gat": PolicySpec("gat", 128, 2, 0.2, (2, 4)),
}


def _layout(spec: PolicySpec) -> list[tuple[str, tuple, str]]:
    """(name, shape, init kind) in declaration order; kinds: glorot, zeros, ones."""
    d, L = spec.d, spec.layers
    out: list[tuple[str, tuple, str]] = []

    def lin(name, fan_out, fan_in, bias=True):
        out.append((f"{name}.W", (fan_out, fan_in), "glorot"))
        if bias:
            out.append((f"{name}.b", (fan_out,), "zeros"))

    def ln(name, width):
        out.append((f"{name}.gain", (width,), "ones"))
        out.append((f"{name}.bias", (width,), "zeros"))

    if spec.arch == "gcnn":
        ln("var_ln", N_VAR_FEATS)
        lin("var_embed", d, N_VAR_FEATS)
        ln("cons_ln", N_CONS_FEATS)
        lin("cons_embed", d, N_CONS_FEATS)
        out.append(("edge_lift.gain", (d,), "glorot"))
        out.append(("edge_lift.bias", (d,), "zeros"))
        for l in range(L):
            for side in ("c", "v"):
                p = f"conv{l}.{side}"
                lin(f"{p}.src", d, d, bias=True)
                lin(f"{p}.edge", d, d, bias=False)
                lin(f"{p}.dst", d, d, bias=False)
                lin(f"{p}.hidden", d, d)
                lin(f"{p}.out", d, d)
                ln(f"{p}.msg_ln", d)
                lin(f"{p}.self", d, d)
                lin(f"{p}.agg", d, d, bias=False)
        lin("head.hidden", d, d)
        lin("head.out", 1, d)
    else:
        lin("lift", d, N_VAR_FEATS)
        for l in range(L):
            if spec.arch == "gat":
                for k in range(spec.heads[l]):
                    out.append((f"layer{l}.head{k}.w_a", (2 * d,), "glorot"))
            lin(f"layer{l}.self", d, d)
            lin(f"layer{l}.nb", d, d, bias=False)
        lin("readout", 1, d)
    return out


def _fans(shape: tuple) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[1], shape[0]
    return shape[0], 1


class ParameterStore:
    """Named parameter arrays in a fixed declaration order."""

    def __init__(self, spec: PolicySpec, values: dict[str, np.ndarray], seed: int | None = None):
        layout = _layout(spec)
        names = [n for n, _, _ in layout]
        if list(values) != names:
            raise SchemaError("parameter names do not match the architecture")
        for name, shape, _ in layout:
            if values[name].shape != shape:
                raise SchemaError(f"{name}: shape {values[name].shape}, expected {shape}")
        self.spec = spec
        self.values = {k: np.asarray(v, dtype=float) for k, v in values.items()}
        self.seed = seed

    @classmethod
    def initialize(cls, spec: PolicySpec, seed: int) -> "ParameterStore":
        rng = np.random.default_rng(seed)
        values = {}
        for name, shape, kind in _layout(spec):
            if kind == "glorot":
                fi, fo = _fans(shape)
                lim = math.sqrt(6.0 / (fi + fo))
                values[name] = rng.uniform(-lim, lim, size=shape)
            elif kind == "ones":
                values[name] = np.ones(shape)
            else:
                values[name] = np.zeros(shape)
        return cls(spec, values, seed)

    @classmethod
    def zeros(cls, spec: PolicySpec) -> "ParameterStore":
        return cls(spec, {n: np.zeros(s) for n, s, _ in _layout(spec)}, None)

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.spec, {k: v.copy() for k, v in self.values.items()}, self.seed)

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.values.items()}

    def to_bytes(self) -> bytes:
        header = {
            "arch": self.spec.arch,
            "spec": {**asdict(self.spec), "heads": list(self.spec.heads)},
            "schema": self.spec.schema,
            "seed": self.seed,
            "tensors": [[k, list(v.shape)] for k, v in self.values.items()],
        }
        hb = json.dumps(header, sort_keys=True).encode()
        body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self.values.values())
        return MAGIC + struct.pack("<I", len(hb)) + hb + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParameterStore":
        if data[:len(MAGIC)] != MAGIC:
            raise ValueError("not a parameter file")
        (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
        start = len(MAGIC) + 4
        header = json.loads(data[start:start + hlen])
        s = header["spec"]
        spec = PolicySpec(s["arch"], s["d"], s["layers"], s["slope"], tuple(s["heads"]), s["schema"])
        pos = start + hlen
        values = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            values[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
        if pos != len(data):
            raise ValueError("trailing bytes in parameter file")
        return cls(spec, values, header["seed"])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# -- forward passes ----------------------------------------------------------


def _half_conv(P, prefix, src_h, dst_h, edge_h, src_idx, dst_idx, n_dst):
    """Messages from source nodes along edges, summed at destinations, then updated."""
    pre = ad.add(ad.add(ad.gather(ad.linear(src_h, P[f"{prefix}.src.W"], P[f"{prefix}.src.b"]), src_idx),
                        ad.linear(edge_h, P[f"{prefix}.edge.W"])),
                 ad.gather(ad.linear(dst_h, P[f"{prefix}.dst.W"]), dst_idx))
    hid = ad.relu(ad.linear(pre, P[f"{prefix}.hidden.W"], P[f"{prefix}.hidden.b"]))
    msg = ad.layernorm(ad.linear(hid, P[f"{prefix}.out.W"], P[f"{prefix}.out.b"]),
                       P[f"{prefix}.msg_ln.gain"], P[f"{prefix}.msg_ln.bias"])
    agg = ad.segment_sum(msg, dst_idx, n_dst)
    return ad.add(ad.linear(dst_h, P[f"{prefix}.self.W"], P[f"{prefix}.self.b"]),
                  ad.linear(agg, P[f"{prefix}.agg.W"]))


def gcnn_forward(bg: BipartiteGraph, P: dict[str, Tensor], spec: PolicySpec) -> Tensor:
    """Embed, then per layer a constraint-side and a variable-side half convolution."""
    hx = ad.relu(ad.linear(ad.layernorm(Tensor(bg.var_feats), P["var_ln.gain"], P["var_ln.bias"]),
                           P["var_embed.W"], P["var_embed.b"]))
    hc = ad.relu(ad.linear(ad.layernorm(Tensor(bg.cons_feats), P["cons_ln.gain"], P["cons_ln.bias"]),
                           P["cons_embed.W"], P["cons_embed.b"]))
    # a layer norm over one scalar is constant, so edges get an affine lift instead
    he = ad.add(ad.mul(Tensor(bg.edge_vals[:, None]), P["edge_lift.gain"]), P["edge_lift.bias"])
    for l in range(spec.layers):
        hc = _half_conv(P, f"conv{l}.c", hx, hc, he, bg.edge_vars, bg.edge_rows, bg.m)
        hx = _half_conv(P, f"conv{l}.v", hc, hx, he, bg.edge_rows, bg.edge_vars, bg.n)
    hid = ad.relu(ad.linear(hx, P["head.hidden.W"], P["head.hidden.b"]))
    out = ad.linear(hid, P["head.out.W"], P["head.out.b"])
    return ad.take(out, (slice(None), 0))


def _update(P, l, h, m):
    return ad.relu(ad.add(ad.linear(h, P[f"layer{l}.self.W"], P[f"layer{l}.self.b"]),
                          ad.linear(m, P[f"layer{l}.nb.W"])))


def _readout(P, h, n):
    out = ad.linear(h, P["readout.W"], P["readout.b"])
    return ad.take(out, (slice(0, n), 0))


def sage_forward(ag: AugmentedGraph, P: dict[str, Tensor], spec: PolicySpec) -> Tensor:
    """Linear lift, then mean-over-neighbours message passing on the block graph."""
    N = ag.n + ag.m
    h = ad.linear(Tensor(ag.H), P["lift.W"], P["lift.b"])
    for l in range(spec.layers):
        m = ad.segment_mean(ad.gather(h, ag.adj_cols), ag.adj_rows, N)
        h = _update(P, l, h, m)
    return _readout(P, h, ag.n)


def attention_weights(h: Tensor, w_a: Tensor, ag: AugmentedGraph, slope: float, d: int) -> Tensor:
    """Per-edge softmax over each row's neighbours, rescaled by the coefficient."""
    N = ag.n + ag.m
    s_self = ad.matmul(h, ad.take(w_a, slice(0, d)))
    s_nb = ad.matmul(h, ad.take(w_a, slice(d, 2 * d)))
    e = ad.leaky_relu(ad.add(ad.gather(s_self, ag.adj_rows), ad.gather(s_nb, ag.adj_cols)), slope)
    alpha = ad.segment_softmax(e, ag.adj_rows, N)
    return ad.mul(alpha, Tensor(ag.adj_vals))


def gat_forward(ag: AugmentedGraph, P: dict[str, Tensor], spec: PolicySpec) -> Tensor:
    N, d = ag.n + ag.m, spec.d
    h = ad.linear(Tensor(ag.H), P["lift.W"], P["lift.b"])
    for l in range(spec.layers):
        nb_h = ad.gather(h, ag.adj_cols)
        heads = []
        for k in range(spec.heads[l]):
            alpha = attention_weights(h, P[f"layer{l}.head{k}.w_a"], ag, spec.slope, d)
            weighted = ad.mul(nb_h, _col(alpha))
            heads.append(ad.relu(ad.segment_sum(weighted, ag.adj_rows, N)))
        m = heads[0]
        for extra in heads[1:]:
            m = ad.add(m, extra)
        m = ad.scale(m, 1.0 / len(heads))
        h = _update(P, l, h, m)
    return _readout(P, h, ag.n)


def _col(v: Tensor) -> Tensor:
    """(E,) -> (E, 1) view for broadcasting against rows."""
    return Tensor(v.value[:, None], parents=(v,), back=lambda g: v._accumulate(g.sum(axis=1)))


def forward(spec: PolicySpec, graph, P: dict[str, Tensor]) -> Tensor:
    """Logits over the graph's variables for any architecture."""
    if graph.schema != spec.schema:
        raise SchemaError(f"graph schema {graph.schema!r} != policy schema {spec.schema!r}")
    if spec.arch == "gcnn":
        if isinstance(graph, AugmentedGraph):
            raise TypeError("GCNN consumes the bipartite form")
        return gcnn_forward(graph, P, spec)
    ag = graph if isinstance(graph, AugmentedGraph) else augment(graph)
    return sage_forward(ag, P, spec) if spec.arch == "sage" else gat_forward(ag, P, spec)


def masked_logits(store: ParameterStore, graph) -> np.ndarray:
    z = forward(store.spec, graph, store.tensors(requires_grad=False)).value
    return np.where(graph.candidates, z, -np.inf)


def predict(store: ParameterStore, graph) -> int:
    """Highest-scoring candidate; the lowest index wins ties."""
    if not graph.candidates.any():
        raise ValueError("graph has no candidates")
    return int(np.argmax(masked_logits(store, graph)))


def forward_backward(store: ParameterStore, graph: BipartiteGraph, targets) -> tuple[float, dict[str, np.ndarray]]:
    """Mean candidate negative log likelihood and its gradient for every parameter.

    ``targets`` gives one variable row per graph in ``graph`` (a batch or a single graph).
    """
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if targets.shape[0] != graph.n_graphs:
        raise ValueError("need exactly one target per graph")
    if not np.all(graph.candidates[targets]):
        raise ValueError("every target must be a branching candidate")
    P = store.tensors(requires_grad=True)
    logits = forward(store.spec, graph, P)
    loss = ad.candidate_nll(logits, graph.candidates, graph.var_graph, targets)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in P.items()}
    return float(loss.value), grads


def loss_only(store: ParameterStore, graph: BipartiteGraph, targets) -> float:
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    logits = forward(store.spec, graph, store.tensors(requires_grad=False))
    return float(ad.candidate_nll(logits, graph.candidates, graph.var_graph, targets).value)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place (descending the loss)."""
    state.step += 1
    t = state.step
    for name, p in store.values.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
