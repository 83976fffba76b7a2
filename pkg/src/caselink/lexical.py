"""Okapi BM25 over an inverted index.

Used three ways downstream: pairwise case similarity for case-case graph
edges, top-n candidate pre-ranking, and hard-negative mining for the
contrastive objective.

Variant fixed here: idf = ln(1 + (N - df + 0.5) / (df + 0.5)), which is
strictly positive, and tf saturation tf*(k1+1) / (tf + k1*(1 - b + b*dl/avgdl)).
Query term frequency contributes linearly (a term occurring twice in the
query counts twice). Ties anywhere are broken by ascending id.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

from .corpus import CaseDocument, RelevanceLabels, tokenize


class IndexError_(Exception):
    """Raised for invalid index construction or unknown doc lookups."""


@dataclass
class Bm25Index:
    k1: float
    b: float
    n_docs: int
    avgdl: float
    doc_len: dict[str, int]
    postings: dict[str, dict[str, int]]  # term -> {doc_id: tf}
    doc_ids: list[str] = field(default_factory=list)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))


def build_index(docs: list[CaseDocument], k1: float = 1.5, b: float = 0.75) -> Bm25Index:
    if not docs:
        raise IndexError_("cannot build a BM25 index over an empty corpus")
    doc_len: dict[str, int] = {}
    postings: dict[str, dict[str, int]] = {}
    for doc in docs:
        if doc.id in doc_len:
            raise IndexError_(f"duplicate doc id {doc.id!r}")
        tokens = tokenize(doc.text)
        doc_len[doc.id] = len(tokens)
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, {})[doc.id] = tf
    avgdl = sum(doc_len.values()) / len(doc_len)
    return Bm25Index(
        k1=k1,
        b=b,
        n_docs=len(doc_len),
        avgdl=avgdl,
        doc_len=doc_len,
        postings=postings,
        doc_ids=sorted(doc_len),
    )


def _tf_weight(index: Bm25Index, tf: int, dl: int) -> float:
    norm = index.k1 * (1.0 - index.b + index.b * dl / index.avgdl)
    return tf * (index.k1 + 1.0) / (tf + norm)


def score(index: Bm25Index, query_text: str, doc_id: str) -> float:
    """BM25 score of one document against a query text; 0 with no shared term."""
    if doc_id not in index.doc_len:
        raise IndexError_(f"unknown doc id {doc_id!r}")
    dl = index.doc_len[doc_id]
    total = 0.0
    for term in tokenize(query_text):
        tf = index.postings.get(term, {}).get(doc_id)
        if tf:
            total += index.idf(term) * _tf_weight(index, tf, dl)
    return total


def scores_for_query(index: Bm25Index, query_text: str) -> dict[str, float]:
    """Scores for every indexed doc sharing at least one term with the query."""
    acc: dict[str, float] = {}
    for term, qtf in Counter(tokenize(query_text)).items():
        posting = index.postings.get(term)
        if not posting:
            continue
        idf = index.idf(term)
        for doc_id, tf in posting.items():
            acc[doc_id] = acc.get(doc_id, 0.0) + qtf * idf * _tf_weight(
                index, tf, index.doc_len[doc_id]
            )
    return acc


def _ranked(index: Bm25Index, query_text: str, exclude: set[str]) -> list[tuple[str, float]]:
    acc = scores_for_query(index, query_text)
    rows = [(did, acc.get(did, 0.0)) for did in index.doc_ids if did not in exclude]
    rows.sort(key=lambda r: (-r[1], r[0]))
    return rows


def top_k_pairs(index: Bm25Index, pool: list[CaseDocument], k: int) -> set[tuple[str, str]]:
    """Per-case top-k most similar other cases, as deduplicated undirected pairs.

    Each case's own text is the query; self-pairs are excluded. A pool of one
    yields the empty set.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pairs: set[tuple[str, str]] = set()
    for doc in pool:
        for other_id, _ in _ranked(index, doc.text, {doc.id})[:k]:
            pairs.add((min(doc.id, other_id), max(doc.id, other_id)))
    return pairs


def rank_candidates(index: Bm25Index, query: CaseDocument, n: int) -> list[tuple[str, float]]:
    """Top-n indexed docs for the query, score-descending then id-ascending.

    The query's own id is skipped if it happens to be indexed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    return _ranked(index, query.text, {query.id})[:n]


def mine_hard_negatives(index: Bm25Index, query: CaseDocument,
                        labels: RelevanceLabels, n_h: int) -> list[str]:
    """The n_h highest-BM25 indexed docs that are not relevant to the query."""
    if n_h == 0:
        return []
    relevant = labels.get(query.id, frozenset())
    ranked = _ranked(index, query.text, {query.id} | set(relevant))
    if len(ranked) < n_h:
        warnings.warn(
            f"query {query.id!r}: only {len(ranked)} non-relevant candidates "
            f"available for {n_h} hard negatives"
        )
    return [did for did, _ in ranked[:n_h]]
