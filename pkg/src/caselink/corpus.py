"""Dataset model, on-disk layout, validation, and a synthetic corpus generator.

The on-disk layout is dataset-agnostic::

    <root>/<split>/candidates/*.txt
    <root>/<split>/queries/*.txt
    <root>/<split>/labels.json        {query_id: [candidate_id, ...]}
    <root>/<split>/years.json         optional {case_id: year}
    <root>/charges.tsv                one "name<TAB>description" per line

Case ids are file stems. The synthetic generator emits exactly this layout
with planted cluster structure (relevance = same-cluster membership) so the
whole retrieval pipeline can be exercised and checked at desk scale.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

ROLES = ("query", "candidate", "both")


def tokenize(text: str) -> list[str]:
    """Lowercase tokens: maximal runs of Unicode alphanumerics.

    Shared by dataset statistics and BM25 so token counts stay consistent.
    """
    return TOKEN_RE.findall(text.lower())


def normalize_ws(text: str) -> str:
    """Collapse all whitespace runs to single spaces and strip the ends."""
    return " ".join(text.split())


class DatasetError(Exception):
    """Raised when a dataset directory cannot be loaded at all."""


class ValidationError(Exception):
    """Raised when loaded data violates a dataset invariant."""


@dataclass(frozen=True)
class CaseDocument:
    id: str
    text: str
    year: int | None = None
    role: str = "candidate"

    def __post_init__(self):
        if not self.id:
            raise ValidationError("case id must be non-empty")
        if not normalize_ws(self.text):
            raise ValidationError(f"case {self.id!r}: text is empty")
        if self.role not in ROLES:
            raise ValidationError(f"case {self.id!r}: unknown role {self.role!r}")


@dataclass(frozen=True)
class ChargeEntry:
    """A legal charge: the name matched against case texts plus a description
    used as the charge node's text."""

    name: str
    description: str = ""

    def __post_init__(self):
        if not self.name.strip():
            raise ValidationError("charge name must be non-empty")

    @property
    def node_text(self) -> str:
        return self.description if self.description.strip() else self.name


# query id -> relevant candidate ids
RelevanceLabels = dict[str, frozenset[str]]


@dataclass(frozen=True)
class DatasetSplit:
    name: str
    queries: list[CaseDocument]
    candidates: list[CaseDocument]
    labels: RelevanceLabels

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Check all split invariants; raises ValidationError on the first hole."""
        for pool_name, pool in (("query", self.queries), ("candidate", self.candidates)):
            seen: set[str] = set()
            for doc in pool:
                if doc.id in seen:
                    raise ValidationError(f"duplicate {pool_name} id {doc.id!r}")
                seen.add(doc.id)
        qids = {d.id for d in self.queries}
        cids = {d.id for d in self.candidates}
        offenders = sorted(set(self.labels) - qids)
        offenders += sorted({c for rel in self.labels.values() for c in rel} - cids)
        if offenders:
            raise ValidationError(
                f"labels reference unknown ids: {', '.join(offenders)}"
            )
        for qid, rel in self.labels.items():
            if qid in rel:
                raise ValidationError(f"query {qid!r} is labeled relevant to itself")

    @property
    def query_ids(self) -> list[str]:
        return [d.id for d in self.queries]

    @property
    def candidate_ids(self) -> list[str]:
        return [d.id for d in self.candidates]

    def all_cases(self) -> list[CaseDocument]:
        """Union of queries and candidates, deduplicated by id, sorted by id."""
        by_id: dict[str, CaseDocument] = {}
        for doc in self.queries + self.candidates:
            by_id.setdefault(doc.id, doc)
        return [by_id[i] for i in sorted(by_id)]

    def relevant(self, query_id: str) -> frozenset[str]:
        return self.labels.get(query_id, frozenset())


def _read_pool(pool_dir: Path, role: str, years: dict[str, int]) -> list[CaseDocument]:
    docs = []
    for path in sorted(pool_dir.glob("*.txt")):
        docs.append(
            CaseDocument(
                id=path.stem,
                text=path.read_text(encoding="utf-8"),
                year=years.get(path.stem),
                role=role,
            )
        )
    return docs


def load_dataset(root_path: str | Path, split: str) -> DatasetSplit:
    """Load and validate one split from the standard layout.

    Ids are file stems. A stem present in both pools keeps both records and
    marks each with role "both".
    """
    split_dir = Path(root_path) / split
    for sub in ("queries", "candidates"):
        if not (split_dir / sub).is_dir():
            raise DatasetError(f"missing directory: {split_dir / sub}")
    labels_path = split_dir / "labels.json"
    if not labels_path.is_file():
        raise DatasetError(f"missing labels file: {labels_path}")

    years: dict[str, int] = {}
    years_path = split_dir / "years.json"
    if years_path.is_file():
        years = {k: int(v) for k, v in json.loads(years_path.read_text()).items()}

    queries = _read_pool(split_dir / "queries", "query", years)
    candidates = _read_pool(split_dir / "candidates", "candidate", years)
    if not candidates:
        raise DatasetError(f"empty candidate pool in {split_dir / 'candidates'}")

    shared = {d.id for d in queries} & {d.id for d in candidates}
    if shared:
        queries = [replace(d, role="both") if d.id in shared else d for d in queries]
        candidates = [replace(d, role="both") if d.id in shared else d for d in candidates]

    raw = json.loads(labels_path.read_text(encoding="utf-8"))
    labels: RelevanceLabels = {q: frozenset(rel) for q, rel in raw.items()}
    return DatasetSplit(name=split, queries=queries, candidates=candidates, labels=labels)


def load_charges(path: str | Path) -> list[ChargeEntry]:
    """Read the tab-separated charge list; names must be unique."""
    charges = []
    seen: set[str] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        name, _, description = line.partition("\t")
        name = name.strip()
        if name in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate charge name {name!r}")
        seen.add(name)
        charges.append(ChargeEntry(name=name, description=description.strip()))
    return charges


def filter_by_year(split: DatasetSplit, max_year: int) -> DatasetSplit:
    """Restrict the candidate pool to cases with year <= max_year.

    Candidates without year metadata are kept (with a warning): silently
    dropping data is worse than over-inclusion. Labels are pruned so they
    only reference surviving candidates.
    """
    kept: list[CaseDocument] = []
    missing: list[str] = []
    for doc in split.candidates:
        if doc.year is None:
            missing.append(doc.id)
            kept.append(doc)
        elif doc.year <= max_year:
            kept.append(doc)
    if missing:
        warnings.warn(
            f"{len(missing)} candidate(s) have no year metadata and pass the "
            f"filter unchanged: {', '.join(missing[:5])}"
            + ("..." if len(missing) > 5 else "")
        )
    if not kept:
        warnings.warn(f"year filter <= {max_year} left an empty candidate pool")
    kept_ids = {d.id for d in kept}
    labels = {
        q: frozenset(r for r in rel if r in kept_ids)
        for q, rel in split.labels.items()
    }
    labels = {q: rel for q, rel in labels.items() if rel}
    return DatasetSplit(
        name=split.name, queries=list(split.queries), candidates=kept, labels=labels
    )


@dataclass(frozen=True)
class StatisticsReport:
    split: str
    n_queries: int
    n_candidates: int
    avg_relevant_per_query: float
    avg_case_tokens: float
    max_case_tokens: int

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "n_queries": self.n_queries,
            "n_candidates": self.n_candidates,
            "avg_relevant_per_query": self.avg_relevant_per_query,
            "avg_case_tokens": self.avg_case_tokens,
            "max_case_tokens": self.max_case_tokens,
        }


def dataset_statistics(split: DatasetSplit) -> StatisticsReport:
    """Counts plus token-length statistics under the module tokenizer."""
    lengths = [len(tokenize(d.text)) for d in split.all_cases()]
    n_rel = [len(rel) for rel in split.labels.values()]
    return StatisticsReport(
        split=split.name,
        n_queries=len(split.queries),
        n_candidates=len(split.candidates),
        avg_relevant_per_query=(sum(n_rel) / len(n_rel)) if n_rel else 0.0,
        avg_case_tokens=(sum(lengths) / len(lengths)) if lengths else 0.0,
        max_case_tokens=max(lengths) if lengths else 0,
    )


class ConfigurationError(Exception):
    """Raised for infeasible generator or pipeline configurations."""


@dataclass(frozen=True)
class SynthConfig:
    """Shape of the planted-cluster corpus.

    Every candidate belongs to exactly one cluster; a query is relevant to a
    sample of candidates from its own cluster. Clusters get disjoint topic
    vocabularies so lexical (BM25) similarity tracks cluster membership, and
    charge names are injected into case texts at `charge_injection_rate` so
    the case-charge edge family has something to match.
    """

    clusters: int = 6
    candidates_per_cluster: int = 20
    queries_per_cluster: int = 5
    relevant_per_query: int = 4
    doc_tokens: int = 60
    shared_vocab: int = 120
    cluster_vocab: int = 40
    cluster_token_fraction: float = 0.6
    n_charges: int = 12
    charges_per_cluster: int = 2
    charge_injection_rate: float = 0.3
    year_min: int = 2018
    year_max: int = 2023
    placeholder_rate: float = 0.25

    def __post_init__(self):
        if self.relevant_per_query >= self.candidates_per_cluster:
            raise ConfigurationError(
                "relevant_per_query must be smaller than candidates_per_cluster "
                f"({self.relevant_per_query} >= {self.candidates_per_cluster})"
            )
        if not 0.0 <= self.charge_injection_rate <= 1.0:
            raise ConfigurationError("charge_injection_rate must be in [0, 1]")
        if self.clusters < 1 or self.candidates_per_cluster < 1:
            raise ConfigurationError("need at least one cluster and one candidate")


# Placeholder tokens occasionally embedded in synthetic sentences so the
# issue-extraction stage has material to work with.
SYNTH_PLACEHOLDERS = ("FRAGMENT_SUPPRESSED", "REFERENCE_SUPPRESSED")

_VERB_POOL = ("granted", "dismissed", "affirmed", "reviewed", "considered", "rejected")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def generate_synthetic(config: SynthConfig, seed: int, root_path: str | Path) -> dict:
    """Write a synthetic two-split dataset under root_path; returns bookkeeping.

    Deterministic: the same (config, seed) produces byte-identical files. The
    returned dict (also saved as <root>/meta.json) records every case's
    cluster so tests can use cluster membership as an oracle.
    """
    import random

    rng = random.Random(seed)
    root = Path(root_path)

    shared = [f"base{i:03d}" for i in range(config.shared_vocab)]
    topic = {
        c: [f"c{c}t{i:02d}" for i in range(config.cluster_vocab)]
        for c in range(config.clusters)
    }
    charges = [
        ChargeEntry(
            name=f"offence{i:02d}",
            description=_charge_description(i, rng),
        )
        for i in range(config.n_charges)
    ]
    cluster_charges = {
        c: [charges[(c * config.charges_per_cluster + j) % len(charges)].name
            for j in range(config.charges_per_cluster)]
        for c in range(config.clusters)
    }

    meta = {
        "seed": seed,
        "config": {k: getattr(config, k) for k in config.__dataclass_fields__},
        "clusters": {},
        "cluster_charges": {str(c): v for c, v in cluster_charges.items()},
    }

    for split in ("train", "test"):
        split_dir = root / split
        (split_dir / "candidates").mkdir(parents=True, exist_ok=True)
        (split_dir / "queries").mkdir(parents=True, exist_ok=True)

        cluster_of: dict[str, int] = {}
        years: dict[str, int] = {}
        cand_by_cluster: dict[int, list[str]] = {c: [] for c in range(config.clusters)}

        idx = 0
        for c in range(config.clusters):
            for _ in range(config.candidates_per_cluster):
                cid = f"{split}_c{idx:03d}"
                idx += 1
                text = _case_text(config, rng, shared, topic[c], cluster_charges[c])
                (split_dir / "candidates" / f"{cid}.txt").write_text(text, encoding="utf-8")
                cluster_of[cid] = c
                years[cid] = rng.randint(config.year_min, config.year_max)
                cand_by_cluster[c].append(cid)

        labels: dict[str, list[str]] = {}
        qidx = 0
        for c in range(config.clusters):
            for _ in range(config.queries_per_cluster):
                qid = f"{split}_q{qidx:03d}"
                qidx += 1
                text = _case_text(config, rng, shared, topic[c], cluster_charges[c])
                (split_dir / "queries" / f"{qid}.txt").write_text(text, encoding="utf-8")
                cluster_of[qid] = c
                years[qid] = rng.randint(config.year_min, config.year_max)
                labels[qid] = sorted(
                    rng.sample(cand_by_cluster[c], config.relevant_per_query)
                )

        _write_json(split_dir / "labels.json", labels)
        _write_json(split_dir / "years.json", years)
        meta["clusters"][split] = cluster_of

    charge_lines = [f"{ch.name}\t{ch.description}" for ch in charges]
    (root / "charges.tsv").write_text("\n".join(charge_lines) + "\n", encoding="utf-8")
    _write_json(root / "meta.json", meta)
    return meta


def _charge_description(i: int, rng) -> str:
    # Charges come in pairs (2i, 2i+1) sharing 12 of 13 description tokens:
    # bag-of-tokens cosine 12/13 > 0.9, so paired charges clear the default
    # charge-charge similarity threshold while unrelated ones stay apart.
    group = i // 2
    base = [f"statute{group:02d}w{j}" for j in range(12)]
    extra = f"variant{i:02d}"
    return " ".join(base + [extra])


def _case_text(config: SynthConfig, rng, shared: list[str], topic: list[str],
               charge_names: list[str]) -> str:
    words: list[str] = []
    for _ in range(config.doc_tokens):
        pool = topic if rng.random() < config.cluster_token_fraction else shared
        words.append(rng.choice(pool))
    if rng.random() < config.charge_injection_rate:
        for name in rng.sample(charge_names, rng.randint(1, len(charge_names))):
            words.insert(rng.randrange(len(words) + 1), name)
    # Group into sentences; some sentences carry placeholder tokens and a
    # verb so issue extraction and triplet extraction both find material.
    sentences = []
    step = 8
    for start in range(0, len(words), step):
        chunk = words[start:start + step]
        if len(chunk) >= 3:
            chunk.insert(len(chunk) // 2, rng.choice(_VERB_POOL))
        if rng.random() < config.placeholder_rate:
            chunk.append(rng.choice(SYNTH_PLACEHOLDERS))
        sentences.append(" ".join(chunk) + ".")
    return "\n".join(sentences) + "\n"
