"""Construction of the case-charge graph in homogeneous and heterogeneous form.

Three edge families:

- case-case: per-case BM25 top-k most similar other cases
- charge-charge: charge-description embedding cosine >= delta
- case-charge: the charge's name occurs (case-insensitively) in the case text

Node kinds and edge types are always stored for auditing; the ``mode`` flag
decides whether the model reads them (heterogeneous) or ignores them
(homogeneous). The edge set is undirected and kept closed under endpoint
swap; self-loops are a model-time concern and are never stored.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import lexical
from .corpus import CaseDocument, ChargeEntry, normalize_ws
from .encoders import EmbeddingStore

KIND_CASE = "case"
KIND_CHARGE = "charge"

EDGE_CASE_CASE = "case-case"
EDGE_CHARGE_CHARGE = "charge-charge"
EDGE_CASE_CHARGE = "case-charge"

MODE_HOMOGENEOUS = "homogeneous"
MODE_HETEROGENEOUS = "heterogeneous"


class GraphError(Exception):
    pass


def edge_type_for(kind_u: str, kind_v: str) -> str:
    if kind_u == KIND_CASE and kind_v == KIND_CASE:
        return EDGE_CASE_CASE
    if kind_u == KIND_CHARGE and kind_v == KIND_CHARGE:
        return EDGE_CHARGE_CHARGE
    return EDGE_CASE_CHARGE


@dataclass(frozen=True)
class CaseLinkGraph:
    mode: str
    node_ids: list[str]
    node_kinds: list[str]
    features: np.ndarray  # (n_nodes, dim) float64
    edges: list[tuple[int, int, str]]  # directed index pairs, closed under swap

    def __post_init__(self):
        if self.mode not in (MODE_HOMOGENEOUS, MODE_HETEROGENEOUS):
            raise GraphError(f"unknown graph mode {self.mode!r}")
        if len(self.node_ids) != len(self.node_kinds):
            raise GraphError("node_ids / node_kinds length mismatch")
        if self.features.shape[0] != len(self.node_ids):
            raise GraphError("feature matrix row count != node count")

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def index_of(self, node_id: str) -> int:
        try:
            return self._index[node_id]
        except AttributeError:
            object.__setattr__(self, "_index", {nid: i for i, nid in enumerate(self.node_ids)})
            return self._index[node_id]

    def has_node(self, node_id: str) -> bool:
        try:
            self.index_of(node_id)
            return True
        except KeyError:
            return False

    def case_indices(self) -> list[int]:
        return [i for i, k in enumerate(self.node_kinds) if k == KIND_CASE]

    def validate(self) -> None:
        """Exhaustive structural checks: typed endpoints, swap closure, no
        self-loops, disjoint case/charge id spaces."""
        kinds_by_id: dict[str, str] = {}
        for nid, kind in zip(self.node_ids, self.node_kinds):
            if nid in kinds_by_id:
                raise GraphError(f"node id {nid!r} appears with kinds "
                                 f"{kinds_by_id[nid]!r} and {kind!r}")
            kinds_by_id[nid] = kind
        edge_set = {(u, v, t) for u, v, t in self.edges}
        for u, v, t in self.edges:
            if u == v:
                raise GraphError(f"stored self-loop at node {self.node_ids[u]!r}")
            expected = edge_type_for(self.node_kinds[u], self.node_kinds[v])
            if t != expected:
                raise GraphError(
                    f"edge ({self.node_ids[u]!r}, {self.node_ids[v]!r}) typed "
                    f"{t!r}, endpoints say {expected!r}"
                )
            if (v, u, t) not in edge_set:
                raise GraphError(
                    f"edge ({self.node_ids[u]!r}, {self.node_ids[v]!r}) lacks "
                    "its swapped counterpart"
                )

    def undirected_edges(self) -> set[tuple[int, int, str]]:
        return {(min(u, v), max(u, v), t) for u, v, t in self.edges}

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) index arrays over all stored (directed) edges."""
        if not self.edges:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        src = np.array([u for u, _, _ in self.edges], dtype=np.int64)
        dst = np.array([v for _, v, _ in self.edges], dtype=np.int64)
        return src, dst

    def typed_edge_arrays(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        grouped: dict[str, tuple[list[int], list[int]]] = {}
        for u, v, t in self.edges:
            grouped.setdefault(t, ([], []))[0].append(u)
            grouped[t][1].append(v)
        return {
            t: (np.array(us, dtype=np.int64), np.array(vs, dtype=np.int64))
            for t, (us, vs) in grouped.items()
        }


def build_graph(pool: list[CaseDocument], charges: list[ChargeEntry],
                case_emb: EmbeddingStore, charge_emb: EmbeddingStore,
                k: int = 5, delta: float = 0.9,
                mode: str = MODE_HOMOGENEOUS,
                bm25_k1: float = 1.5, bm25_b: float = 0.75) -> CaseLinkGraph:
    """Build the case-charge graph for one case pool.

    Node order is cases sorted by id, then charges sorted by name; both
    embedding stores must share the same dimensionality and cover every node.
    """
    if not 0.0 < delta <= 1.0:
        raise GraphError(f"delta must be in (0, 1], got {delta}")
    by_id: dict[str, CaseDocument] = {}
    for doc in pool:
        by_id.setdefault(doc.id, doc)
    case_ids = sorted(by_id)
    charge_names = sorted({c.name for c in charges})
    if len(charge_names) != len(charges):
        raise GraphError("duplicate charge names")
    collisions = set(case_ids) & set(charge_names)
    if collisions:
        raise GraphError(f"case and charge id spaces overlap: {sorted(collisions)}")
    if charges and case_emb.dim != charge_emb.dim:
        raise GraphError(
            f"case embeddings (dim {case_emb.dim}) and charge embeddings "
            f"(dim {charge_emb.dim}) disagree"
        )

    node_ids = case_ids + charge_names
    node_kinds = [KIND_CASE] * len(case_ids) + [KIND_CHARGE] * len(charge_names)
    rows = [case_emb.get(cid) for cid in case_ids]      # raises naming missing id
    rows += [charge_emb.get(name) for name in charge_names]
    features = np.stack(rows) if rows else np.zeros((0, case_emb.dim))
    index = {nid: i for i, nid in enumerate(node_ids)}

    undirected: set[tuple[int, int, str]] = set()

    # case-case: per-case BM25 top-k
    if len(case_ids) > 1:
        bm25 = lexical.build_index([by_id[c] for c in case_ids], k1=bm25_k1, b=bm25_b)
        for a, b_ in lexical.top_k_pairs(bm25, [by_id[c] for c in case_ids], k):
            undirected.add((index[a], index[b_], EDGE_CASE_CASE))

    # charge-charge: cosine >= delta
    for i, name_i in enumerate(charge_names):
        vec_i = charge_emb.get(name_i)
        norm_i = np.linalg.norm(vec_i)
        for name_j in charge_names[i + 1:]:
            vec_j = charge_emb.get(name_j)
            denom = norm_i * np.linalg.norm(vec_j)
            if denom == 0:
                continue
            if float(vec_i @ vec_j) / denom >= delta:
                undirected.add((index[name_i], index[name_j], EDGE_CHARGE_CHARGE))

    # case-charge: charge name mentioned in the case text
    lowered = {cid: normalize_ws(by_id[cid].text).lower() for cid in case_ids}
    for name in charge_names:
        needle = name.lower()
        for cid in case_ids:
            if needle in lowered[cid]:
                undirected.add((index[cid], index[name], EDGE_CASE_CHARGE))

    # Canonical edge order (both directions, sorted) so summation order in
    # the model is identical for built and reloaded graphs.
    edges = sorted(
        [(u, v, t) for u, v, t in undirected] + [(v, u, t) for u, v, t in undirected]
    )

    g = CaseLinkGraph(mode=mode, node_ids=node_ids, node_kinds=node_kinds,
                      features=features, edges=edges)
    g.validate()
    return g


def collapse_to_homogeneous(g: CaseLinkGraph) -> CaseLinkGraph:
    """Same topology and features, homogeneous mode. Idempotent: kinds and
    edge types stay recorded for auditing either way."""
    return replace(g, mode=MODE_HOMOGENEOUS)


@dataclass(frozen=True)
class GraphStats:
    n_nodes: dict[str, int]
    n_edges: dict[str, int]  # undirected counts per type
    degree_histogram: dict[int, int]
    isolated_nodes: list[str]

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "n_edges": self.n_edges,
            "degree_histogram": {str(k): v for k, v in sorted(self.degree_histogram.items())},
            "isolated_nodes": self.isolated_nodes,
        }


def graph_stats(g: CaseLinkGraph) -> GraphStats:
    node_counts = Counter(g.node_kinds)
    edge_counts = Counter(t for _, _, t in g.undirected_edges())
    degree = Counter()
    for u, _, _ in g.edges:
        degree[u] += 1
    hist = Counter(degree.get(i, 0) for i in range(g.n_nodes))
    isolated = sorted(g.node_ids[i] for i in range(g.n_nodes) if degree.get(i, 0) == 0)
    return GraphStats(
        n_nodes={k: node_counts.get(k, 0) for k in (KIND_CASE, KIND_CHARGE)},
        n_edges={t: edge_counts.get(t, 0)
                 for t in (EDGE_CASE_CASE, EDGE_CHARGE_CHARGE, EDGE_CASE_CHARGE)},
        degree_histogram=dict(hist),
        isolated_nodes=isolated,
    )


def save_graph(g: CaseLinkGraph, path: str | Path, feature_path: str | Path) -> None:
    """Topology as JSON plus features as a referenced embedding store file."""
    path, feature_path = Path(path), Path(feature_path)
    store = EmbeddingStore(
        dim=g.dim, vectors={nid: g.features[i] for i, nid in enumerate(g.node_ids)}
    )
    store.save(feature_path)
    doc = {
        "mode": g.mode,
        "nodes": [{"id": nid, "kind": kind} for nid, kind in zip(g.node_ids, g.node_kinds)],
        "edges": sorted(
            [g.node_ids[u], g.node_ids[v], t] for u, v, t in g.undirected_edges()
        ),
        "feature_store": feature_path.name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_graph(path: str | Path) -> CaseLinkGraph:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    store = EmbeddingStore.load(path.parent / doc["feature_store"])
    node_ids = [n["id"] for n in doc["nodes"]]
    node_kinds = [n["kind"] for n in doc["nodes"]]
    index = {nid: i for i, nid in enumerate(node_ids)}
    edges: list[tuple[int, int, str]] = []
    for u_id, v_id, t in doc["edges"]:
        u, v = index[u_id], index[v_id]
        edges.append((u, v, t))
        edges.append((v, u, t))
    features = np.stack([store.get(nid) for nid in node_ids]) if node_ids else \
        np.zeros((0, store.dim))
    g = CaseLinkGraph(mode=doc["mode"], node_ids=node_ids, node_kinds=node_kinds,
                      features=features, edges=sorted(edges))
    g.validate()
    return g
