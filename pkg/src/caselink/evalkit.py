"""Retrieval metrics and subset-based significance testing.

Metric definitions (binary relevance, cutoff k unless noted):

- P@k  = mean over queries of |relevant in top-k| / k
- R@k  = mean over queries of |relevant in top-k| / |relevant|
- Mi-F1: harmonic mean of micro precision and micro recall from pooled
  TP/FP/FN counts at cutoff k
- Ma-F1: harmonic mean of the macro-averaged precision (P@k) and recall (R@k)
- MRR@k: reciprocal rank of the first relevant result within the top k, 0 if
  none, averaged over queries
- MAP: average precision over the *full* ranking, averaged over queries
- NDCG@k: binary gains with log2 discount; ideal DCG places min(|rel|, k)
  ones at the top

Significance: the query set is partitioned into n contiguous blocks of
sorted ids, the metric is computed per block for both runs, and a two-sided
paired t-test (p-value via the regularized incomplete beta function) with a
Bonferroni-corrected threshold decides significance.
"""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import betainc


class EvaluationError(Exception):
    pass


@dataclass
class RetrievalRun:
    """Per-query ranked candidate lists with scores, score-descending."""

    rankings: dict[str, list[tuple[str, float]]]
    cutoff: int | None = None

    def __post_init__(self):
        for qid, ranked in self.rankings.items():
            ids = [c for c, _ in ranked]
            if len(ids) != len(set(ids)):
                raise EvaluationError(f"query {qid!r}: duplicate candidates in ranking")
            scores = [s for _, s in ranked]
            if any(a < b for a, b in zip(scores, scores[1:])):
                raise EvaluationError(f"query {qid!r}: scores are not non-increasing")

    def query_ids(self) -> list[str]:
        return sorted(self.rankings)

    def ranked_ids(self, qid: str) -> list[str]:
        return [c for c, _ in self.rankings[qid]]

    def subset(self, qids: list[str]) -> "RetrievalRun":
        return RetrievalRun({q: self.rankings[q] for q in qids}, cutoff=self.cutoff)

    def save(self, path: str | Path) -> None:
        """JSON Lines: {"query", "ranking", "scores"} per query, sorted by id."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            for qid in sorted(self.rankings):
                ranked = self.rankings[qid]
                row = {
                    "query": qid,
                    "ranking": [c for c, _ in ranked],
                    "scores": [float(s) for _, s in ranked],
                }
                f.write(json.dumps(row) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalRun":
        rankings = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            rankings[row["query"]] = list(zip(row["ranking"], row["scores"]))
        return cls(rankings)


METRIC_KEYS = ("P", "R", "Mi-F1", "Ma-F1", "MRR", "MAP", "NDCG")


@dataclass
class MetricReport:
    k: int
    precision: float
    recall: float
    micro_f1: float
    macro_f1: float
    mrr: float
    mean_ap: float
    ndcg: float
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)

    def value(self, name: str) -> float:
        """Look up a metric by its report name, e.g. "NDCG@5" or "MAP"."""
        base, k = parse_metric_name(name)
        if k is not None and k != self.k:
            raise EvaluationError(f"report was computed at k={self.k}, not k={k}")
        return {
            "P": self.precision,
            "R": self.recall,
            "Mi-F1": self.micro_f1,
            "Ma-F1": self.macro_f1,
            "MRR": self.mrr,
            "MAP": self.mean_ap,
            "NDCG": self.ndcg,
        }[base]

    def to_dict(self, include_per_query: bool = True) -> dict:
        d = {
            "k": self.k,
            f"P@{self.k}": self.precision,
            f"R@{self.k}": self.recall,
            "Mi-F1": self.micro_f1,
            "Ma-F1": self.macro_f1,
            f"MRR@{self.k}": self.mrr,
            "MAP": self.mean_ap,
            f"NDCG@{self.k}": self.ndcg,
        }
        if include_per_query:
            d["per_query"] = self.per_query
        return d

    def to_table(self, label: str = "run") -> str:
        cols = [f"P@{self.k}", f"R@{self.k}", "Mi-F1", "Ma-F1",
                f"MRR@{self.k}", "MAP", f"NDCG@{self.k}"]
        vals = [self.precision, self.recall, self.micro_f1, self.macro_f1,
                self.mrr, self.mean_ap, self.ndcg]
        head = f"{'Method':<16}" + "".join(f"{c:>9}" for c in cols)
        row = f"{label:<16}" + "".join(f"{100 * v:>9.1f}" for v in vals)
        return head + "\n" + row


def parse_metric_name(name: str) -> tuple[str, int | None]:
    m = re.fullmatch(r"(P|R|MRR|NDCG)@(\d+)", name)
    if m:
        return m.group(1), int(m.group(2))
    if name in ("MAP", "Mi-F1", "Ma-F1"):
        return name, None
    raise EvaluationError(f"unknown metric {name!r}")


def _dcg(gains: list[int]) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(gains))


def evaluate(run: RetrievalRun, labels: dict[str, frozenset[str]], k: int = 5) -> MetricReport:
    """Score a run against binary relevance labels at cutoff k."""
    if not run.rankings:
        raise EvaluationError("empty run")
    pooled_tp = pooled_fp = pooled_fn = 0
    per_query: dict[str, dict[str, float]] = {}
    p_sum = r_sum = mrr_sum = ap_sum = ndcg_sum = 0.0
    for qid in sorted(run.rankings):
        if qid not in labels:
            raise EvaluationError(f"query {qid!r} has no relevance labels")
        relevant = labels[qid]
        if not relevant:
            raise EvaluationError(f"query {qid!r} has an empty relevant set")
        ranked = run.ranked_ids(qid)
        top = ranked[:k]
        hits = sum(1 for c in top if c in relevant)

        p = hits / k
        r = hits / len(relevant)
        pooled_tp += hits
        pooled_fp += min(k, len(ranked)) - hits
        pooled_fn += len(relevant) - hits

        mrr = 0.0
        for rank, c in enumerate(top, 1):
            if c in relevant:
                mrr = 1.0 / rank
                break

        n_seen = 0
        ap = 0.0
        for rank, c in enumerate(ranked, 1):
            if c in relevant:
                n_seen += 1
                ap += n_seen / rank
        ap /= len(relevant)

        gains = [1 if c in relevant else 0 for c in top]
        ideal = _dcg([1] * min(len(relevant), k))
        ndcg = _dcg(gains) / ideal if ideal > 0 else 0.0

        per_query[qid] = {"P": p, "R": r, "MRR": mrr, "AP": ap, "NDCG": ndcg}
        p_sum += p
        r_sum += r
        mrr_sum += mrr
        ap_sum += ap
        ndcg_sum += ndcg

    n = len(run.rankings)
    macro_p, macro_r = p_sum / n, r_sum / n
    micro_p = pooled_tp / (pooled_tp + pooled_fp) if pooled_tp + pooled_fp else 0.0
    micro_r = pooled_tp / (pooled_tp + pooled_fn) if pooled_tp + pooled_fn else 0.0
    return MetricReport(
        k=k,
        precision=macro_p,
        recall=macro_r,
        micro_f1=_harmonic(micro_p, micro_r),
        macro_f1=_harmonic(macro_p, macro_r),
        mrr=mrr_sum / n,
        mean_ap=ap_sum / n,
        ndcg=ndcg_sum / n,
        per_query=per_query,
    )


def _harmonic(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def random_baseline(labels: dict[str, frozenset[str]], pool_size: int, k: int,
                    trials: int, seed: int) -> MetricReport:
    """Monte-Carlo expectation of every metric under uniform random rankings.

    Only the positions of relevant ids matter, so the pool is synthesized as
    the relevant ids padded with placeholder ids up to pool_size.
    """
    if trials < 1:
        raise EvaluationError("trials must be >= 1")
    rng = random.Random(seed)
    sums = np.zeros(7)
    for _ in range(trials):
        rankings = {}
        for qid in sorted(labels):
            relevant = sorted(labels[qid])
            if len(relevant) > pool_size:
                raise EvaluationError(f"query {qid!r}: more relevant ids than pool_size")
            pool = relevant + [f"__pad{i}" for i in range(pool_size - len(relevant))]
            rng.shuffle(pool)
            rankings[qid] = [(c, float(pool_size - i)) for i, c in enumerate(pool)]
        rep = evaluate(RetrievalRun(rankings), labels, k)
        sums += np.array([rep.precision, rep.recall, rep.micro_f1, rep.macro_f1,
                          rep.mrr, rep.mean_ap, rep.ndcg])
    means = sums / trials
    return MetricReport(k, *[float(x) for x in means])


@dataclass
class TTestReport:
    t: float
    p: float
    df: int
    mean_diff: float
    degenerate: bool

    def to_dict(self) -> dict:
        return {"t": self.t, "p": self.p, "df": self.df,
                "mean_diff": self.mean_diff, "degenerate": self.degenerate}


def paired_ttest(a: list[float], b: list[float]) -> TTestReport:
    """Two-sided paired t-test on matched samples.

    With (numerically) zero variance of the differences the statistic is
    undefined; the report then carries p = 1.0 and the degenerate flag
    instead of dividing by rounding noise. The threshold is relative to the
    sample scale so constant shifts like 0.2-0.1 = 0.4-0.3 = ... count as
    zero-variance even though float subtraction leaves ~1e-17 residue.
    """
    if len(a) != len(b):
        raise EvaluationError("paired samples must have equal length")
    if len(a) < 2:
        raise EvaluationError("need at least 2 pairs")
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    d = av - bv
    n = len(d)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    scale = max(1.0, float(np.abs(av).max()), float(np.abs(bv).max()))
    if sd <= 1e-12 * scale:
        return TTestReport(t=0.0, p=1.0, df=df, mean_diff=mean, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    # two-sided p for Student's t: I_{df/(df+t^2)}(df/2, 1/2)
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestReport(t=t, p=p, df=df, mean_diff=mean, degenerate=False)


@dataclass
class SubsetTTestReport:
    metric: str
    n_subsets: int
    values_a: list[float]
    values_b: list[float]
    ttest: TTestReport
    alpha: float
    comparisons: int
    significant: bool

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "n_subsets": self.n_subsets,
            "values_a": self.values_a,
            "values_b": self.values_b,
            **self.ttest.to_dict(),
            "alpha": self.alpha,
            "comparisons": self.comparisons,
            "corrected_alpha": self.alpha / self.comparisons,
            "significant": self.significant,
        }


def partition_queries(qids: list[str], n_subsets: int) -> list[list[str]]:
    """Contiguous blocks of sorted query ids, sizes differing by at most one."""
    qids = sorted(qids)
    if len(qids) < n_subsets:
        raise EvaluationError(
            f"cannot split {len(qids)} queries into {n_subsets} subsets"
        )
    base, extra = divmod(len(qids), n_subsets)
    blocks = []
    start = 0
    for i in range(n_subsets):
        size = base + (1 if i < extra else 0)
        blocks.append(qids[start:start + size])
        start += size
    return blocks


def subset_ttest(run_a: RetrievalRun, run_b: RetrievalRun,
                 labels: dict[str, frozenset[str]], metric: str = "NDCG@5",
                 n_subsets: int = 5, alpha: float = 0.05,
                 comparisons: int = 1) -> SubsetTTestReport:
    """Paired t-test over per-subset metric values of two runs.

    Both runs must cover the same query set. Significance uses the
    Bonferroni-corrected threshold alpha / comparisons.
    """
    if run_a.query_ids() != run_b.query_ids():
        raise EvaluationError("runs cover different query sets")
    if comparisons < 1:
        raise EvaluationError("comparisons must be >= 1")
    base, k = parse_metric_name(metric)
    k = k if k is not None else 5
    blocks = partition_queries(run_a.query_ids(), n_subsets)
    values_a = [evaluate(run_a.subset(block), labels, k).value(metric) for block in blocks]
    values_b = [evaluate(run_b.subset(block), labels, k).value(metric) for block in blocks]
    tt = paired_ttest(values_a, values_b)
    significant = (not tt.degenerate) and tt.p < alpha / comparisons
    return SubsetTTestReport(
        metric=metric,
        n_subsets=n_subsets,
        values_a=values_a,
        values_b=values_b,
        ttest=tt,
        alpha=alpha,
        comparisons=comparisons,
        significant=significant,
    )
