"""Differentiable graph-attention kernels and a gradient-checking harness.

Single-head graph attention: for an edge u -> v the logit is
leaky_relu(a . [W h_v || W h_u]) with slope 0.2, softmaxed over v's in-edges
(a self-loop is always added at model time, so isolated nodes attend to
themselves), and messages W h_u are combined with those weights. The typed
variant keeps one projection per node type and one (attention vector,
relation matrix) pair per edge type, aggregates per edge type, and sums the
per-type results; with all banks tied and a single node/edge type it
reproduces the untyped layer exactly.

The full model runs two layers (ELU between them, nothing after the second)
and concatenates each node's input features back onto its final state.

Reverse-mode gradients come from torch autograd; ``check_gradients``
validates every registered differentiable op against central finite
differences at float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .graph import (
    KIND_CASE,
    KIND_CHARGE,
    EDGE_CASE_CASE,
    EDGE_CASE_CHARGE,
    EDGE_CHARGE_CHARGE,
    MODE_HETEROGENEOUS,
    MODE_HOMOGENEOUS,
    CaseLinkGraph,
    edge_type_for,
)

LEAKY_SLOPE = 0.2

DEFAULT_NODE_TYPES = (KIND_CASE, KIND_CHARGE)
DEFAULT_EDGE_TYPES = (EDGE_CASE_CASE, EDGE_CHARGE_CHARGE, EDGE_CASE_CHARGE)


class ShapeError(Exception):
    pass


def _apply_activation(x: torch.Tensor, activation: str | None) -> torch.Tensor:
    if activation is None:
        return x
    if activation == "elu":
        return torch.nn.functional.elu(x)
    raise ValueError(f"unknown activation {activation!r}")


def segment_softmax(logits: torch.Tensor, dst: torch.Tensor, n: int) -> torch.Tensor:
    """Softmax of per-edge logits within each destination node's edge group.

    The per-group max is detached before subtraction; softmax is invariant to
    the shift, so gradients are unaffected while the exp stays stable.
    """
    m = torch.full((n,), -math.inf, dtype=logits.dtype)
    m = m.scatter_reduce(0, dst, logits.detach(), reduce="amax", include_self=False)
    ex = torch.exp(logits - m[dst])
    denom = torch.zeros(n, dtype=logits.dtype).index_add(0, dst, ex)
    return ex / denom[dst]


@dataclass
class GatLayerParams:
    weight: torch.Tensor  # (d_in, d_out)
    attn: torch.Tensor    # (2 * d_out,)

    def named(self, prefix: str) -> dict[str, torch.Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.attn": self.attn}


@dataclass
class HgtLayerParams:
    node_weight: dict[str, torch.Tensor]  # node type -> (d_in, d_out)
    edge_attn: dict[str, torch.Tensor]    # edge type -> (2 * d_out,)
    edge_rel: dict[str, torch.Tensor]     # edge type -> (d_out, d_out)

    def named(self, prefix: str) -> dict[str, torch.Tensor]:
        out = {}
        for t, w in self.node_weight.items():
            out[f"{prefix}.node_weight.{t}"] = w
        for t, a in self.edge_attn.items():
            out[f"{prefix}.edge_attn.{t}"] = a
        for t, m in self.edge_rel.items():
            out[f"{prefix}.edge_rel.{t}"] = m
        return out


def gat_pass(h: torch.Tensor, src: torch.Tensor, dst: torch.Tensor,
             params: GatLayerParams, activation: str | None = "elu",
             return_attention: bool = False):
    """One attention layer over explicit (src, dst) message edges.

    Callers must include self-loops in the edge arrays if they want them;
    every destination node needs at least one incoming edge.
    """
    n, d_in = h.shape
    if params.weight.shape[0] != d_in:
        raise ShapeError(
            f"weight expects input dim {params.weight.shape[0]}, states have {d_in}"
        )
    d_out = params.weight.shape[1]
    if params.attn.shape != (2 * d_out,):
        raise ShapeError(f"attention vector must have shape ({2 * d_out},)")
    z = h @ params.weight
    logits = torch.nn.functional.leaky_relu(
        (z[dst] * params.attn[:d_out]).sum(-1) + (z[src] * params.attn[d_out:]).sum(-1),
        LEAKY_SLOPE,
    )
    alpha = segment_softmax(logits, dst, n)
    out = torch.zeros_like(z).index_add(0, dst, alpha.unsqueeze(-1) * z[src])
    out = _apply_activation(out, activation)
    if return_attention:
        return out, alpha
    return out


def _with_self_loops(src: torch.Tensor, dst: torch.Tensor, n: int):
    loops = torch.arange(n, dtype=torch.int64)
    return torch.cat([src, loops]), torch.cat([dst, loops])


def _edge_tensors(graph: CaseLinkGraph) -> tuple[torch.Tensor, torch.Tensor]:
    src, dst = graph.edge_arrays()
    return _with_self_loops(torch.from_numpy(src), torch.from_numpy(dst), graph.n_nodes)


def gat_layer(states: torch.Tensor, graph: CaseLinkGraph, params: GatLayerParams,
              activation: str | None = "elu",
              return_attention: bool = False):
    """Graph attention over all stored edges plus model-time self-loops."""
    if states.shape[0] != graph.n_nodes:
        raise ShapeError(f"states have {states.shape[0]} rows, graph has {graph.n_nodes} nodes")
    src, dst = _edge_tensors(graph)
    return gat_pass(states, src, dst, params, activation, return_attention)


def self_loop_type(kind: str) -> str:
    return f"{kind}-{kind}"


def hgt_layer(states: torch.Tensor, graph: CaseLinkGraph, params: HgtLayerParams,
              activation: str | None = "elu") -> torch.Tensor:
    """Typed attention: per-node-type projections, per-edge-type attention
    vectors and relation matrices; per-type aggregates are summed.

    Self-loops join the edge type matching the node's own kind (case-case or
    charge-charge), so a single-typed graph with tied banks collapses to the
    untyped layer.
    """
    if graph.mode != MODE_HETEROGENEOUS:
        raise ValueError("hgt_layer needs a heterogeneous graph")
    n = graph.n_nodes
    if states.shape[0] != n:
        raise ShapeError(f"states have {states.shape[0]} rows, graph has {n} nodes")
    kinds = graph.node_kinds
    for kind in set(kinds):
        if kind not in params.node_weight:
            raise KeyError(f"no node-type bank for kind {kind!r}")

    d_out = next(iter(params.node_weight.values())).shape[1]
    z = torch.zeros(n, d_out, dtype=states.dtype)
    for kind, weight in params.node_weight.items():
        mask = torch.tensor([k == kind for k in kinds], dtype=states.dtype)
        if mask.any():
            z = z + mask.unsqueeze(-1) * (states @ weight)

    typed = {
        t: (torch.from_numpy(s), torch.from_numpy(d))
        for t, (s, d) in graph.typed_edge_arrays().items()
    }
    # Route each node's self-loop into the edge family of its own kind.
    for kind in set(kinds):
        loop_t = self_loop_type(kind)
        loops = torch.tensor([i for i, k in enumerate(kinds) if k == kind],
                             dtype=torch.int64)
        s, d = typed.get(loop_t, (torch.zeros(0, dtype=torch.int64),) * 2)
        typed[loop_t] = (torch.cat([s, loops]), torch.cat([d, loops]))

    out = torch.zeros(n, d_out, dtype=states.dtype)
    for etype in sorted(typed):
        if etype not in params.edge_attn or etype not in params.edge_rel:
            raise KeyError(f"no edge-type bank for type {etype!r}")
        src, dst = typed[etype]
        attn, rel = params.edge_attn[etype], params.edge_rel[etype]
        msg = z[src] @ rel
        logits = torch.nn.functional.leaky_relu(
            (z[dst] * attn[:d_out]).sum(-1) + (msg * attn[d_out:]).sum(-1),
            LEAKY_SLOPE,
        )
        alpha = segment_softmax(logits, dst, n)
        out = out.index_add(0, dst, alpha.unsqueeze(-1) * msg)
    return _apply_activation(out, activation)


@dataclass
class ModelParams:
    mode: str
    layers: list  # two GatLayerParams or two HgtLayerParams
    seed: int
    dtype: torch.dtype = torch.float32

    def named(self) -> dict[str, torch.Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layer{i}"))
        return out

    def tensors(self) -> list[torch.Tensor]:
        return list(self.named().values())

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "ModelParams":
        def cp(t: torch.Tensor) -> torch.Tensor:
            return t.detach().clone()

        layers = []
        for layer in self.layers:
            if isinstance(layer, GatLayerParams):
                layers.append(GatLayerParams(cp(layer.weight), cp(layer.attn)))
            else:
                layers.append(HgtLayerParams(
                    {k: cp(v) for k, v in layer.node_weight.items()},
                    {k: cp(v) for k, v in layer.edge_attn.items()},
                    {k: cp(v) for k, v in layer.edge_rel.items()},
                ))
        return ModelParams(self.mode, layers, self.seed, self.dtype)


def _glorot(shape: tuple[int, ...], gen: torch.Generator, dtype: torch.dtype) -> torch.Tensor:
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[1] if len(shape) > 1 else 1
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return torch.empty(shape, dtype=dtype).uniform_(-limit, limit, generator=gen)


def init_gat_layer(d_in: int, d_out: int, gen: torch.Generator,
                   dtype: torch.dtype) -> GatLayerParams:
    return GatLayerParams(
        weight=_glorot((d_in, d_out), gen, dtype),
        attn=_glorot((2 * d_out,), gen, dtype),
    )


def init_hgt_layer(d_in: int, d_out: int, gen: torch.Generator, dtype: torch.dtype,
                   node_types=DEFAULT_NODE_TYPES,
                   edge_types=DEFAULT_EDGE_TYPES) -> HgtLayerParams:
    return HgtLayerParams(
        node_weight={t: _glorot((d_in, d_out), gen, dtype) for t in node_types},
        edge_attn={t: _glorot((2 * d_out,), gen, dtype) for t in edge_types},
        edge_rel={t: _glorot((d_out, d_out), gen, dtype) for t in edge_types},
    )


def tie_hgt_banks(gat: GatLayerParams, node_types=DEFAULT_NODE_TYPES,
                  edge_types=DEFAULT_EDGE_TYPES) -> HgtLayerParams:
    """Banks that make the typed layer compute exactly the untyped one:
    shared projection and attention vector, identity relation matrices."""
    d_out = gat.weight.shape[1]
    eye = torch.eye(d_out, dtype=gat.weight.dtype)
    return HgtLayerParams(
        node_weight={t: gat.weight for t in node_types},
        edge_attn={t: gat.attn for t in edge_types},
        edge_rel={t: eye.clone() for t in edge_types},
    )


def init_caselink_params(in_dim: int, hidden_dim: int, out_dim: int, mode: str,
                         seed: int, dtype: torch.dtype = torch.float32,
                         node_types=DEFAULT_NODE_TYPES,
                         edge_types=DEFAULT_EDGE_TYPES) -> ModelParams:
    gen = torch.Generator().manual_seed(seed)
    dims = [(in_dim, hidden_dim), (hidden_dim, out_dim)]
    if mode == MODE_HOMOGENEOUS:
        layers = [init_gat_layer(a, b, gen, dtype) for a, b in dims]
    elif mode == MODE_HETEROGENEOUS:
        layers = [init_hgt_layer(a, b, gen, dtype, node_types, edge_types)
                  for a, b in dims]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ModelParams(mode=mode, layers=layers, seed=seed, dtype=dtype)


def initial_states(graph: CaseLinkGraph, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(graph.features)).to(dtype)


def caselink_forward(graph: CaseLinkGraph, params: ModelParams,
                     states: torch.Tensor | None = None) -> torch.Tensor:
    """Two attention layers then a residual concatenation [h2_v || x_v].

    Output width = layer-2 dim + input dim for every node.
    """
    x = initial_states(graph, params.dtype) if states is None else states
    layer_fn = hgt_layer if params.mode == MODE_HETEROGENEOUS else gat_layer
    if params.mode == MODE_HETEROGENEOUS and graph.mode != MODE_HETEROGENEOUS:
        raise ValueError("heterogeneous params on a homogeneous graph")
    h = layer_fn(x, graph, params.layers[0], activation="elu")
    h = layer_fn(h, graph, params.layers[1], activation=None)
    return torch.cat([h, x], dim=1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_DTYPE_NAMES = {torch.float32: "float32", torch.float64: "float64"}
_NAME_DTYPES = {v: k for k, v in _DTYPE_NAMES.items()}


def _tensor_doc(t: torch.Tensor) -> dict:
    return {"shape": list(t.shape), "data": [float(x) for x in t.detach().reshape(-1)]}


def _tensor_from_doc(doc: dict, dtype: torch.dtype) -> torch.Tensor:
    return torch.tensor(doc["data"], dtype=dtype).reshape(doc["shape"])


def save_params(params: ModelParams, path: str | Path) -> None:
    """JSON tensor dump with a shape manifest; reloads bit-exactly."""
    layers = []
    for layer in params.layers:
        if isinstance(layer, GatLayerParams):
            layers.append({"kind": "gat", "weight": _tensor_doc(layer.weight),
                           "attn": _tensor_doc(layer.attn)})
        else:
            layers.append({
                "kind": "hgt",
                "node_weight": {t: _tensor_doc(w) for t, w in layer.node_weight.items()},
                "edge_attn": {t: _tensor_doc(a) for t, a in layer.edge_attn.items()},
                "edge_rel": {t: _tensor_doc(m) for t, m in layer.edge_rel.items()},
            })
    doc = {"mode": params.mode, "seed": params.seed,
           "dtype": _DTYPE_NAMES[params.dtype], "layers": layers}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_params(path: str | Path) -> ModelParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    dtype = _NAME_DTYPES[doc["dtype"]]
    layers = []
    for ld in doc["layers"]:
        if ld["kind"] == "gat":
            layers.append(GatLayerParams(
                weight=_tensor_from_doc(ld["weight"], dtype),
                attn=_tensor_from_doc(ld["attn"], dtype),
            ))
        else:
            layers.append(HgtLayerParams(
                node_weight={t: _tensor_from_doc(d, dtype)
                             for t, d in ld["node_weight"].items()},
                edge_attn={t: _tensor_from_doc(d, dtype)
                           for t, d in ld["edge_attn"].items()},
                edge_rel={t: _tensor_from_doc(d, dtype)
                          for t, d in ld["edge_rel"].items()},
            ))
    return ModelParams(mode=doc["mode"], layers=layers, seed=doc["seed"], dtype=dtype)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

# op id -> builder(seed) -> (named leaf tensors, scalar loss closure)
GRAD_CHECK_OPS: dict[str, Callable[[int], tuple[dict[str, torch.Tensor], Callable[[], torch.Tensor]]]] = {}


def register_grad_check(op_id: str):
    def deco(builder):
        GRAD_CHECK_OPS[op_id] = builder
        return builder
    return deco


@dataclass
class GradCheckReport:
    op_id: str
    trials: int
    seed: int
    max_rel_err: float
    per_trial: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"op_id": self.op_id, "trials": self.trials, "seed": self.seed,
                "max_rel_err": self.max_rel_err, "per_trial": self.per_trial}


def _finite_difference(loss_fn, leaves: dict[str, torch.Tensor],
                       h: float = 1e-6) -> dict[str, torch.Tensor]:
    grads = {}
    for name, tensor in leaves.items():
        grad = torch.zeros_like(tensor)
        flat, gflat = tensor.view(-1), grad.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
            up = loss_fn().item()
            with torch.no_grad():
                flat[i] = orig - h
            down = loss_fn().item()
            with torch.no_grad():
                flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = grad
    return grads


def _relative_error(analytic: dict[str, torch.Tensor],
                    numeric: dict[str, torch.Tensor]) -> float:
    worst_abs = 0.0
    scale = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        worst_abs = max(worst_abs, float((a - n).abs().max()) if a.numel() else 0.0)
        if a.numel():
            scale = max(scale, float(a.abs().max()), float(n.abs().max()))
    if worst_abs == 0.0:
        return 0.0
    return worst_abs / max(scale, 1e-8)


def check_gradients(op_id: str, trials: int = 10, seed: int = 0) -> GradCheckReport:
    """Compare autograd against central finite differences at float64.

    Builders construct a fresh random instance per trial; the reported value
    is the worst relative error over all trials and parameter entries.
    """
    # Side-effect imports: sibling modules register their differentiable ops.
    from . import casegnn as _casegnn  # noqa: F401
    from . import training as _training  # noqa: F401
    if op_id not in GRAD_CHECK_OPS:
        raise KeyError(f"no gradient check registered for {op_id!r}")
    builder = GRAD_CHECK_OPS[op_id]
    per_trial = []
    for trial in range(trials):
        leaves, loss_fn = builder(seed + trial)
        for t in leaves.values():
            t.requires_grad_(True)
        loss = loss_fn()
        loss.backward()
        analytic = {
            name: (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t))
            for name, t in leaves.items()
        }
        for t in leaves.values():
            t.grad = None
        numeric = _finite_difference(loss_fn, leaves)
        per_trial.append(_relative_error(analytic, numeric))
    return GradCheckReport(op_id=op_id, trials=trials, seed=seed,
                           max_rel_err=max(per_trial) if per_trial else 0.0,
                           per_trial=per_trial)


def random_test_graph(seed: int, n_case: int = 5, n_charge: int = 3, dim: int = 5,
                      mode: str = MODE_HOMOGENEOUS, edge_prob: float = 0.45) -> CaseLinkGraph:
    """Small random case-charge graph for checks and tests (not a fixture of
    any dataset): features are standard normal, edges independent coin flips."""
    import random as _random

    rng = _random.Random(seed)
    node_ids = [f"case{i}" for i in range(n_case)] + [f"charge{i}" for i in range(n_charge)]
    node_kinds = [KIND_CASE] * n_case + [KIND_CHARGE] * n_charge
    undirected = set()
    for i in range(len(node_ids)):
        for j in range(i + 1, len(node_ids)):
            if rng.random() < edge_prob:
                undirected.add((i, j, edge_type_for(node_kinds[i], node_kinds[j])))
    edges = sorted([(u, v, t) for u, v, t in undirected]
                   + [(v, u, t) for u, v, t in undirected])
    features = np.array([[rng.gauss(0, 1) for _ in range(dim)] for _ in node_ids])
    return CaseLinkGraph(mode=mode, node_ids=node_ids, node_kinds=node_kinds,
                         features=features, edges=edges)


def _probe_matrix(shape: tuple[int, ...], seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed * 7919 + 13)
    return torch.empty(shape, dtype=torch.float64).uniform_(-1, 1, generator=gen)


@register_grad_check("gat_layer")
def _build_gat_check(seed: int):
    g = random_test_graph(seed, n_case=6, n_charge=0, dim=5)
    gen = torch.Generator().manual_seed(seed)
    params = init_gat_layer(5, 4, gen, torch.float64)
    probe = _probe_matrix((g.n_nodes, 4), seed)
    states = initial_states(g, torch.float64)

    def loss_fn():
        return (gat_layer(states, g, params, activation="elu") * probe).sum()

    return params.named("gat"), loss_fn


@register_grad_check("hgt_layer")
def _build_hgt_check(seed: int):
    g = random_test_graph(seed, n_case=4, n_charge=3, dim=5, mode=MODE_HETEROGENEOUS)
    gen = torch.Generator().manual_seed(seed)
    params = init_hgt_layer(5, 4, gen, torch.float64)
    probe = _probe_matrix((g.n_nodes, 4), seed)
    states = initial_states(g, torch.float64)

    def loss_fn():
        return (hgt_layer(states, g, params, activation="elu") * probe).sum()

    return params.named("hgt"), loss_fn


@register_grad_check("caselink_forward")
def _build_forward_check(seed: int):
    g = random_test_graph(seed, n_case=5, n_charge=2, dim=5)
    params = init_caselink_params(5, 4, 3, MODE_HOMOGENEOUS, seed, torch.float64)
    probe = _probe_matrix((g.n_nodes, 3 + 5), seed)

    def loss_fn():
        return (caselink_forward(g, params) * probe).sum()

    return params.named(), loss_fn


@register_grad_check("zero_probe")
def _build_zero_check(seed: int):
    # The loss multiplies the leaf by zero; both gradient routes must be
    # exactly zero.
    leaf = _probe_matrix((3, 3), seed)

    def loss_fn():
        return (leaf * 0.0).sum() + 1.5

    return {"unused": leaf}, loss_fn
