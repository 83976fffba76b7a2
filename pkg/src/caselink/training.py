"""Contrastive training objective, negative sampling, and inference scoring.

The per-query loss is the temperature-scaled contrastive loss over one
positive, n_easy random negatives and n_hard BM25-mined negatives, with
cosine similarity throughout:

    -log[ exp(s+/t) / (exp(s+/t) + sum_i exp(s_easy_i/t) + sum_j exp(s_hard_j/t)) ]

A degree-regularization term sums the pairwise cosines between selected case
rows and the whole case pool (self-pairs included), discouraging node states
from collapsing toward a regime where every case looks connected to every
other. The combined objective is batch-mean contrastive loss plus
lambda * the regularizer. The optimizer is Adam; early stopping watches
NDCG@5 on a held-out slice of the training queries.
"""

from __future__ import annotations

import math
import random
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import evalkit, lexical, neural
from .corpus import CaseDocument, DatasetSplit, RelevanceLabels
from .encoders import EmbeddingStore
from .graph import CaseLinkGraph


class TrainingDiverged(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 0.0
    epochs: int = 1000
    batch_size: int = 128
    tau: float = 0.1
    lambda_: float = 0.001
    n_easy: int = 1
    n_hard: int = 5
    k_pairs: int = 5
    delta: float = 0.9
    seed: int = 7
    early_stop_metric: str = "NDCG@5"
    patience: int = 20
    validation_fraction: float = 0.1
    hidden_dim: int = 64
    out_dim: int = 64

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")
        if self.n_easy < 0 or self.n_hard < 0:
            raise ValueError("negative sample counts must be >= 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")
        if self.early_stop_metric != "NDCG@5":
            raise ValueError("early stopping is defined on NDCG@5")


def _unit(vec: torch.Tensor, what: str) -> torch.Tensor:
    norm = torch.linalg.vector_norm(vec)
    if float(norm.detach()) == 0.0:
        raise ValueError(f"{what} has zero norm; cosine is undefined")
    return vec / norm


def info_nce(query_vec: torch.Tensor, pos_vec: torch.Tensor,
             easy_negs: list[torch.Tensor], hard_negs: list[torch.Tensor],
             tau: float) -> torch.Tensor:
    """Contrastive loss over one positive and the sampled negatives.

    Equals log(1 + n_easy + n_hard) exactly when all similarities agree.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    q = _unit(query_vec, "query vector")
    sims = [q @ _unit(pos_vec, "positive vector")]
    for i, v in enumerate(easy_negs):
        sims.append(q @ _unit(v, f"easy negative {i}"))
    for i, v in enumerate(hard_negs):
        sims.append(q @ _unit(v, f"hard negative {i}"))
    logits = torch.stack(sims) / tau
    return torch.logsumexp(logits, dim=0) - logits[0]


def deg_reg(case_states: torch.Tensor, row_ids: list[int],
            col_ids: list[int]) -> torch.Tensor:
    """Sum of pairwise cosines between the row states and the column states.

    Rows are the cases being regularized, columns the whole case pool;
    self-pairs are included (each contributes exactly 1).
    """
    norms = torch.linalg.vector_norm(case_states, dim=1)
    needed = sorted(set(row_ids) | set(col_ids))
    if any(float(norms[i].detach()) == 0.0 for i in needed):
        raise ValueError("zero-norm state rows make cosine undefined")
    unit = case_states / norms.unsqueeze(-1)
    rows = unit[torch.tensor(row_ids, dtype=torch.int64)]
    cols = unit[torch.tensor(col_ids, dtype=torch.int64)]
    return (rows @ cols.T).sum()


@dataclass(frozen=True)
class ContrastiveExample:
    query_id: str
    pos_id: str
    easy_ids: tuple[str, ...]
    hard_ids: tuple[str, ...]


@dataclass
class TrainingBatch:
    examples: list[ContrastiveExample]
    degreg_rows: list[str]
    degreg_cols: list[str]


def combined_loss(batch: TrainingBatch, graph: CaseLinkGraph,
                  params: neural.ModelParams, config: TrainConfig) -> torch.Tensor:
    """Batch-mean contrastive loss plus lambda * degree regularization."""
    if not batch.examples:
        raise ValueError("empty batch")
    states = neural.caselink_forward(graph, params)
    losses = []
    for ex in batch.examples:
        q = states[graph.index_of(ex.query_id)]
        pos = states[graph.index_of(ex.pos_id)]
        easy = [states[graph.index_of(i)] for i in ex.easy_ids]
        hard = [states[graph.index_of(i)] for i in ex.hard_ids]
        losses.append(info_nce(q, pos, easy, hard, config.tau))
    loss = torch.stack(losses).mean()
    if config.lambda_ != 0.0:
        rows = [graph.index_of(i) for i in batch.degreg_rows]
        cols = [graph.index_of(i) for i in batch.degreg_cols]
        loss = loss + config.lambda_ * deg_reg(states, rows, cols)
    return loss


def sample_negatives(query: CaseDocument, labels: RelevanceLabels,
                     pool_ids: list[str], n_easy: int, n_hard: int,
                     bm25: lexical.Bm25Index, rng: random.Random,
                     ) -> tuple[list[str], list[str]]:
    """Hard negatives from BM25, easy negatives uniform without replacement.

    Both sets exclude the query and its relevant cases and are disjoint from
    each other. Short pools produce fewer samples plus a warning.
    """
    relevant = labels.get(query.id, frozenset())
    hard = lexical.mine_hard_negatives(bm25, query, labels, n_hard)
    eligible = sorted(set(pool_ids) - {query.id} - set(relevant) - set(hard))
    if len(eligible) < n_easy:
        warnings.warn(
            f"query {query.id!r}: only {len(eligible)} easy-negative candidates "
            f"available for {n_easy} requested"
        )
        n_easy = len(eligible)
    easy = sorted(rng.sample(eligible, n_easy))
    return easy, hard


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_ndcg5: float | None
    lr: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_ndcg5": self.val_ndcg5, "lr": self.lr}


def _rank_by_cosine(states: torch.Tensor, graph: CaseLinkGraph,
                    query_ids: list[str], candidate_ids: list[str],
                    ) -> evalkit.RetrievalRun:
    with torch.no_grad():
        mat = states.detach()
        norms = torch.linalg.vector_norm(mat, dim=1).clamp_min(1e-12)
        unit = (mat / norms.unsqueeze(-1)).cpu().numpy()
    cand_rows = np.stack([unit[graph.index_of(c)] for c in candidate_ids])
    rankings = {}
    for qid in query_ids:
        sims = cand_rows @ unit[graph.index_of(qid)]
        order = sorted(range(len(candidate_ids)), key=lambda i: (-sims[i], candidate_ids[i]))
        rankings[qid] = [(candidate_ids[i], float(sims[i])) for i in order]
    return evalkit.RetrievalRun(rankings)


def train_caselink(train_split: DatasetSplit, train_graph: CaseLinkGraph,
                   init_emb: EmbeddingStore | None, config: TrainConfig,
                   ) -> tuple[neural.ModelParams, list[EpochLog]]:
    """Train the graph model on one split's graph.

    The graph's stored features are the initial node states; when init_emb is
    given it must agree with the graph's case-node features (guards against a
    stale graph artifact). Returns the best-validation parameters and the
    per-epoch log.
    """
    torch.set_num_threads(1)  # keep reductions bit-reproducible
    if init_emb is not None:
        for idx in train_graph.case_indices():
            nid = train_graph.node_ids[idx]
            if not np.array_equal(init_emb.get(nid), train_graph.features[idx]):
                raise ValueError(
                    f"init embeddings disagree with graph features for {nid!r}; "
                    "rebuild the graph from the current embeddings"
                )
    rng = random.Random(config.seed)
    torch.manual_seed(config.seed)

    queries = [q for q in train_split.queries if train_split.relevant(q.id)]
    skipped = len(train_split.queries) - len(queries)
    if skipped:
        warnings.warn(f"{skipped} training query(ies) without labels skipped")
    if not queries:
        raise ValueError("no labeled training queries")

    n_val = int(round(config.validation_fraction * len(queries)))
    if config.validation_fraction > 0 and n_val == 0 and len(queries) >= 2:
        n_val = 1
    val_ids = set(rng.sample(sorted(q.id for q in queries), n_val))
    train_queries = [q for q in queries if q.id not in val_ids]
    val_queries = sorted(val_ids)

    candidates = [c for c in train_split.candidates]
    bm25 = lexical.build_index(candidates)
    pool_ids = [c.id for c in candidates]
    case_node_ids = [train_graph.node_ids[i] for i in train_graph.case_indices()]
    degreg_rows = [c for c in pool_ids if train_graph.has_node(c)]

    params = neural.init_caselink_params(
        train_graph.dim, config.hidden_dim, config.out_dim,
        mode=train_graph.mode, seed=config.seed,
    ).requires_grad_(True)
    optimizer = torch.optim.Adam(params.tensors(), lr=config.lr,
                                 weight_decay=config.weight_decay)

    best = params.clone()
    best_val = -math.inf
    stale = 0
    log: list[EpochLog] = []

    for epoch in range(config.epochs):
        order = list(train_queries)
        rng.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            examples = []
            for q in chunk:
                pos = rng.choice(sorted(train_split.relevant(q.id)))
                easy, hard = sample_negatives(
                    q, train_split.labels, pool_ids, config.n_easy,
                    config.n_hard, bm25, rng,
                )
                examples.append(ContrastiveExample(q.id, pos, tuple(easy), tuple(hard)))
            batch = TrainingBatch(examples=examples, degreg_rows=degreg_rows,
                                  degreg_cols=case_node_ids)
            optimizer.zero_grad()
            loss = combined_loss(batch, train_graph, params, config)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))

        val_ndcg = None
        if val_queries:
            with torch.no_grad():
                states = neural.caselink_forward(train_graph, params)
            run = _rank_by_cosine(states, train_graph, val_queries, pool_ids)
            labels = {q: train_split.labels[q] for q in val_queries}
            val_ndcg = evalkit.evaluate(run, labels, k=5).ndcg
            if val_ndcg > best_val:
                best_val = val_ndcg
                best = params.clone()
                stale = 0
            else:
                stale += 1
        log.append(EpochLog(epoch=epoch, train_loss=float(np.mean(epoch_losses)),
                            val_ndcg5=val_ndcg, lr=config.lr))
        if val_queries and stale >= config.patience:
            break

    final = best if val_queries and best_val > -math.inf else params.clone()
    return final, log


def retrieve(test_graph: CaseLinkGraph, params: neural.ModelParams,
             queries: list[str], candidates: list[str],
             cutoff: int = 5) -> evalkit.RetrievalRun:
    """One forward pass, then per-query cosine ranking of all candidates.

    The full ranking is retained (MAP needs it); ``cutoff`` is recorded on
    the run for the metric-at-k consumers. Ties break by ascending id.
    """
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    torch.set_num_threads(1)  # reduction order must not depend on the host
    for nid in list(queries) + list(candidates):
        if not test_graph.has_node(nid):
            raise KeyError(f"node {nid!r} missing from the test graph")
    with torch.no_grad():
        states = neural.caselink_forward(test_graph, params)
    run = _rank_by_cosine(states, test_graph, list(queries), list(candidates))
    run.cutoff = cutoff
    return run


# ---------------------------------------------------------------------------
# Gradient-check registrations
# ---------------------------------------------------------------------------


@neural.register_grad_check("info_nce")
def _build_info_nce_check(seed: int):
    gen = torch.Generator().manual_seed(seed)

    def vec() -> torch.Tensor:
        return torch.empty(8, dtype=torch.float64).uniform_(-1, 1, generator=gen)

    leaves = {"query": vec(), "pos": vec()}
    easy = [vec()]
    hard = [vec() for _ in range(3)]
    for i, v in enumerate(easy):
        leaves[f"easy{i}"] = v
    for i, v in enumerate(hard):
        leaves[f"hard{i}"] = v

    def loss_fn():
        return info_nce(leaves["query"], leaves["pos"], easy, hard, tau=0.1)

    return leaves, loss_fn


@neural.register_grad_check("deg_reg")
def _build_deg_reg_check(seed: int):
    gen = torch.Generator().manual_seed(seed)
    states = torch.empty(5, 8, dtype=torch.float64).uniform_(-1, 1, generator=gen)

    def loss_fn():
        return deg_reg(states, [0, 1, 2], [0, 1, 2, 3, 4])

    return {"states": states}, loss_fn


@neural.register_grad_check("combined_loss")
def _build_combined_check(seed: int):
    g = neural.random_test_graph(seed, n_case=8, n_charge=2, dim=5)
    params = neural.init_caselink_params(5, 4, 3, g.mode, seed, torch.float64)
    cases = [g.node_ids[i] for i in g.case_indices()]
    rng = random.Random(seed)
    examples = []
    for qid in cases[:3]:
        others = [c for c in cases if c != qid]
        rng.shuffle(others)
        examples.append(ContrastiveExample(
            query_id=qid, pos_id=others[0],
            easy_ids=(others[1],), hard_ids=tuple(others[2:4]),
        ))
    batch = TrainingBatch(examples=examples, degreg_rows=cases, degreg_cols=cases)
    config = TrainConfig(tau=0.1, lambda_=0.1, seed=seed)

    def loss_fn():
        return combined_loss(batch, g, params, config)

    return params.named(), loss_fn
