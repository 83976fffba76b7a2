"""Per-case text graphs aggregated into case embeddings.

Each case yields two text-attributed graphs, one from the fact view and one
from the issue view. Nodes are the distinct subject/object strings of
rule-extracted relation triplets; a virtual node is wired to every other
node and carries the corresponding view embedding, acting as the readout.
Two attention layers per graph produce a fact and an issue embedding whose
concatenation is the case representation, trained with the same contrastive
objective as the downstream graph model and emitted as its initial node
features.

Triplet extraction is deliberately lightweight: a token is verb-ish if it is
on a fixed word list or carries a past/progressive suffix, and consecutive
runs of the remaining tokens (minus stopwords) form the subject/object spans
around it. No fidelity to any particular information-extraction tool is
claimed; the extractor is deterministic and pluggable.
"""

from __future__ import annotations

import random
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import lexical, neural
from .corpus import DatasetSplit, tokenize
from .encoders import EmbeddingStore, ToyHashEncoder
from .promptcase import CaseViews, split_sentences, view_slice
from .training import TrainConfig, TrainingDiverged, info_nce, sample_negatives

VIRTUAL_NODE_ID = "__virtual__"

VERBISH_WORDS = frozenset({
    "is", "are", "was", "were", "be", "been", "being", "has", "have", "had",
    "held", "found", "made", "gave", "took", "saw", "said", "did", "does",
    "do", "went", "came", "brought", "sought", "won", "lost", "paid", "met",
    "sued", "ruled", "denied", "upheld", "set", "struck", "overturned",
})

STOPWORDS = frozenset({
    "the", "a", "an", "of", "to", "in", "on", "by", "for", "with", "at",
    "from", "as", "and", "or", "that", "this", "it", "its", "not", "no",
})


def _is_verbish(token: str) -> bool:
    if token in VERBISH_WORDS:
        return True
    if len(token) >= 5 and token.endswith("ed"):
        return True
    if len(token) >= 6 and token.endswith("ing"):
        return True
    return False


def extract_triplets(text: str) -> list[tuple[str, str, str]]:
    """(subject, relation, object) triples from consecutive noun-ish spans
    linked by a verb-ish token, sentence by sentence. Deterministic."""
    triplets = []
    for sentence in split_sentences(text):
        tokens = tokenize(sentence)
        spans: list[tuple[int, int]] = []  # [start, end) runs of non-verbish tokens
        start = None
        for i, tok in enumerate(tokens + ["__end__"]):
            verbish = _is_verbish(tok) or tok == "__end__"
            if verbish:
                if start is not None:
                    spans.append((start, i))
                    start = None
            elif start is None:
                start = i

        def span_text(span: tuple[int, int]) -> str:
            return " ".join(t for t in tokens[span[0]:span[1]] if t not in STOPWORDS)

        for i, tok in enumerate(tokens):
            if not _is_verbish(tok):
                continue
            left = next((s for s in spans if s[1] == i), None)
            right = next((s for s in spans if s[0] == i + 1), None)
            if left is None or right is None:
                continue
            subj, obj = span_text(left), span_text(right)
            if subj and obj:
                triplets.append((subj, tok, obj))
    return triplets


@dataclass(frozen=True)
class TextGraph:
    """Text-attributed graph for one view of one case; node 0 is virtual."""

    tag: str  # "fact" | "issue"
    node_ids: list[str]
    node_texts: list[str]
    features: np.ndarray  # (n, dim) float64
    relation_edges: list[tuple[int, int]]  # directed subj -> obj pairs

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def virtual_degree(self) -> int:
        return self.n_nodes - 1

    def message_arrays(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Symmetrized edges (relations + virtual wiring) plus self-loops."""
        n = self.n_nodes
        src, dst = [], []
        for u, v in self.relation_edges:
            src += [u, v]
            dst += [v, u]
        for i in range(1, n):
            src += [0, i]
            dst += [i, 0]
        src += list(range(n))
        dst += list(range(n))
        return (torch.tensor(src, dtype=torch.int64),
                torch.tensor(dst, dtype=torch.int64))


def build_text_graph(views_embedding: np.ndarray, triplets: list[tuple[str, str, str]],
                     encoder: ToyHashEncoder, tag: str) -> TextGraph:
    """One node per distinct subject/object string plus the virtual node.

    The virtual node's feature is the view-embedding block matching ``tag``;
    entity node features come from the encoder. The relation strings only
    induce edges, they are not embedded.
    """
    if tag not in ("fact", "issue"):
        raise ValueError(f"tag must be fact or issue, got {tag!r}")
    dim = encoder.dim
    virtual_feature = view_slice(views_embedding, tag, dim)
    node_ids = [VIRTUAL_NODE_ID]
    node_texts = [""]
    rows = [np.asarray(virtual_feature, dtype=np.float64)]
    index: dict[str, int] = {}
    edges = []
    for subj, _, obj in triplets:
        for name in (subj, obj):
            if name not in index:
                index[name] = len(node_ids)
                node_ids.append(name)
                node_texts.append(name)
                rows.append(encoder.encode(name))
        edges.append((index[subj], index[obj]))
    return TextGraph(tag=tag, node_ids=node_ids, node_texts=node_texts,
                     features=np.stack(rows), relation_edges=edges)


@dataclass(frozen=True)
class CaseGraphPair:
    case_id: str
    fact: TextGraph
    issue: TextGraph


def build_case_graphs(views: CaseViews, views_embedding: np.ndarray,
                      encoder: ToyHashEncoder) -> CaseGraphPair:
    return CaseGraphPair(
        case_id=views.case_id,
        fact=build_text_graph(views_embedding, extract_triplets(views.fact_text),
                              encoder, "fact"),
        issue=build_text_graph(views_embedding, extract_triplets(views.issue_text),
                               encoder, "issue"),
    )


@dataclass
class CaseGnnParams:
    fact_layers: list[neural.GatLayerParams]
    issue_layers: list[neural.GatLayerParams]
    seed: int
    dtype: torch.dtype = torch.float32

    def named(self) -> dict[str, torch.Tensor]:
        out = {}
        for tag, layers in (("fact", self.fact_layers), ("issue", self.issue_layers)):
            for i, layer in enumerate(layers):
                out.update(layer.named(f"{tag}.layer{i}"))
        return out

    def tensors(self) -> list[torch.Tensor]:
        return list(self.named().values())

    def requires_grad_(self, flag: bool = True) -> "CaseGnnParams":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "CaseGnnParams":
        def cp(layer):
            return neural.GatLayerParams(layer.weight.detach().clone(),
                                         layer.attn.detach().clone())
        return CaseGnnParams([cp(l) for l in self.fact_layers],
                             [cp(l) for l in self.issue_layers],
                             self.seed, self.dtype)


def init_casegnn_params(in_dim: int, hidden_dim: int, out_dim: int, seed: int,
                        dtype: torch.dtype = torch.float32) -> CaseGnnParams:
    gen = torch.Generator().manual_seed(seed)
    dims = [(in_dim, hidden_dim), (hidden_dim, out_dim)]
    return CaseGnnParams(
        fact_layers=[neural.init_gat_layer(a, b, gen, dtype) for a, b in dims],
        issue_layers=[neural.init_gat_layer(a, b, gen, dtype) for a, b in dims],
        seed=seed,
        dtype=dtype,
    )


def _encode_graph(g: TextGraph, layers: list[neural.GatLayerParams],
                  dtype: torch.dtype) -> torch.Tensor:
    h = torch.from_numpy(np.ascontiguousarray(g.features)).to(dtype)
    src, dst = g.message_arrays()
    h = neural.gat_pass(h, src, dst, layers[0], activation="elu")
    h = neural.gat_pass(h, src, dst, layers[1], activation=None)
    return h[0]  # virtual-node readout


def casegnn_forward(fact_graph: TextGraph, issue_graph: TextGraph,
                    params: CaseGnnParams) -> torch.Tensor:
    """[fact embedding || issue embedding], length 2 * layer-2 dim."""
    return torch.cat([
        _encode_graph(fact_graph, params.fact_layers, params.dtype),
        _encode_graph(issue_graph, params.issue_layers, params.dtype),
    ])


def train_casegnn(train_split: DatasetSplit, case_graphs: dict[str, CaseGraphPair],
                  config: TrainConfig, bm25: lexical.Bm25Index | None = None,
                  ) -> tuple[CaseGnnParams, EmbeddingStore, list[dict]]:
    """Contrastive training over per-case graphs; emits embeddings for every
    case in ``case_graphs`` (train and test alike) from the final parameters.

    Hard negatives reuse the BM25 miner over the training candidates.
    """
    torch.set_num_threads(1)
    missing = [d.id for d in train_split.all_cases() if d.id not in case_graphs]
    if missing:
        raise ValueError(f"no text graphs for: {', '.join(missing[:5])}")
    rng = random.Random(config.seed)
    torch.manual_seed(config.seed)
    if bm25 is None:
        bm25 = lexical.build_index(train_split.candidates)

    sample = next(iter(case_graphs.values()))
    in_dim = sample.fact.features.shape[1]
    params = init_casegnn_params(in_dim, config.hidden_dim, config.out_dim,
                                 config.seed).requires_grad_(True)
    optimizer = torch.optim.Adam(params.tensors(), lr=config.lr,
                                 weight_decay=config.weight_decay)

    queries = [q for q in train_split.queries if train_split.relevant(q.id)]
    if not queries:
        warnings.warn("no labeled queries; emitting embeddings from initial params")
    pool_ids = [c.id for c in train_split.candidates]

    def embed(case_id: str) -> torch.Tensor:
        pair = case_graphs[case_id]
        return casegnn_forward(pair.fact, pair.issue, params)

    log: list[dict] = []
    for epoch in range(config.epochs):
        order = list(queries)
        rng.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            losses = []
            for q in chunk:
                pos = rng.choice(sorted(train_split.relevant(q.id)))
                easy, hard = sample_negatives(q, train_split.labels, pool_ids,
                                              config.n_easy, config.n_hard,
                                              bm25, rng)
                losses.append(info_nce(
                    embed(q.id), embed(pos),
                    [embed(i) for i in easy], [embed(i) for i in hard],
                    config.tau,
                ))
            if not losses:
                continue
            optimizer.zero_grad()
            loss = torch.stack(losses).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        log.append({"epoch": epoch,
                    "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None})

    with torch.no_grad():
        vectors = {
            cid: embed(cid).detach().to(torch.float64).numpy()
            for cid in sorted(case_graphs)
        }
    store = EmbeddingStore(dim=2 * config.out_dim, vectors=vectors)
    return params, store, log


def save_casegnn_params(params: CaseGnnParams, path) -> None:
    import json
    from pathlib import Path

    doc = {
        "seed": params.seed,
        "dtype": "float64" if params.dtype == torch.float64 else "float32",
        "fact_layers": [{"weight": neural._tensor_doc(l.weight),
                         "attn": neural._tensor_doc(l.attn)} for l in params.fact_layers],
        "issue_layers": [{"weight": neural._tensor_doc(l.weight),
                          "attn": neural._tensor_doc(l.attn)} for l in params.issue_layers],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_casegnn_params(path) -> CaseGnnParams:
    import json
    from pathlib import Path

    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    dtype = torch.float64 if doc["dtype"] == "float64" else torch.float32

    def layer(d):
        return neural.GatLayerParams(
            weight=neural._tensor_from_doc(d["weight"], dtype),
            attn=neural._tensor_from_doc(d["attn"], dtype),
        )

    return CaseGnnParams(
        fact_layers=[layer(d) for d in doc["fact_layers"]],
        issue_layers=[layer(d) for d in doc["issue_layers"]],
        seed=doc["seed"],
        dtype=dtype,
    )


@neural.register_grad_check("casegnn_forward")
def _build_casegnn_check(seed: int):
    rng = random.Random(seed)
    encoder = ToyHashEncoder(6)
    views_emb = np.array([rng.gauss(0, 1) for _ in range(18)])
    words = ["court", "appeal", "claim", "party", "order", "motion"]

    def sentence() -> str:
        return (f"{rng.choice(words)} {rng.choice(words)} dismissed "
                f"{rng.choice(words)}. {rng.choice(words)} granted {rng.choice(words)}.")

    fact = build_text_graph(views_emb, extract_triplets(sentence()), encoder, "fact")
    issue = build_text_graph(views_emb, extract_triplets(sentence()), encoder, "issue")
    params = init_casegnn_params(6, 5, 4, seed, torch.float64)
    probe = torch.empty(8, dtype=torch.float64).uniform_(
        -1, 1, generator=torch.Generator().manual_seed(seed + 99))

    def loss_fn():
        return (casegnn_forward(fact, issue, params) * probe).sum()

    return params.named(), loss_fn
