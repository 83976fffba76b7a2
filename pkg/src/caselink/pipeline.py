"""Stage orchestration with a hash-chained run manifest.

Every stage records the sha256 of each file it consumed and produced in
``<run>/manifest.json``. Before a stage runs, all transitive upstream
records are re-verified against the filesystem, so a missing or edited
artifact anywhere upstream stops the run instead of silently flowing
through. All stage randomness derives from the single ``run.seed``.

Artifacts live under the run directory::

    dataset/            synthetic corpus (unless data.root points elsewhere)
    ingest.json         validated split snapshot (ids + labels)
    stats.json          dataset statistics
    summaries/          fact summaries per split (JSONL)
    views/ views_emb/   three-view texts and their embeddings
    casegnn/            per-case encoder params, log, emitted embeddings
    graphs/             train/test case-charge graphs + feature stores
    train/              model params and training log
    retrieval/run.jsonl ranked candidates for the test queries
    metrics/            metric report, random baseline, plain-text table
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

from . import casegnn as casegnn_mod
from . import evalkit, graph as graph_mod, lexical, neural, promptcase, training
from .config import Config
from .corpus import (
    DatasetSplit,
    dataset_statistics,
    filter_by_year,
    generate_synthetic,
    load_charges,
    load_dataset,
)
from .encoders import EmbeddingStore, LlmClient, ToyHashEncoder

STAGE_ORDER = ("synth", "ingest", "stats", "summarize", "views", "casegnn",
               "graph", "train", "retrieve", "evaluate")

DEPS: dict[str, tuple[str, ...]] = {
    "synth": (),
    "ingest": (),
    "stats": ("ingest",),
    "summarize": ("ingest",),
    "views": ("summarize",),
    "casegnn": ("views",),
    "graph": ("casegnn",),
    "train": ("graph",),
    "retrieve": ("train",),
    "evaluate": ("retrieve",),
}


class MissingUpstream(Exception):
    def __init__(self, stage: str):
        super().__init__(f"stage {stage!r} has not run yet; run it first")
        self.stage = stage


class StaleUpstream(Exception):
    def __init__(self, stage: str, path: str):
        super().__init__(
            f"artifact {path!r} no longer matches the hash recorded by stage "
            f"{stage!r}; re-run {stage!r} (and everything downstream)"
        )
        self.stage = stage


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.path = self.run_dir / "manifest.json"
        self.doc: dict = {"artifact_version": "0.1.0", "stages": {}}
        if self.path.is_file():
            self.doc = json.loads(self.path.read_text(encoding="utf-8"))

    def stage(self, name: str) -> dict | None:
        return self.doc["stages"].get(name)

    def record(self, name: str, config_snapshot: dict, seed: int,
               inputs: dict[str, str], outputs: dict[str, str],
               wall_clock_s: float) -> None:
        self.doc["stages"][name] = {
            "config": config_snapshot,
            "seed": seed,
            "inputs": inputs,
            "outputs": outputs,
            "wall_clock_s": wall_clock_s,
        }
        # Anything downstream of a re-run stage is now unverified; drop it.
        order = {s: i for i, s in enumerate(STAGE_ORDER)}
        if name in order:
            for other in list(self.doc["stages"]):
                if other in order and order[other] > order[name]:
                    del self.doc["stages"][other]
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")

    def resolve(self, rel_or_abs: str) -> Path:
        p = Path(rel_or_abs)
        return p if p.is_absolute() else self.run_dir / p


def _relpath(path: Path, run_dir: Path) -> str:
    try:
        return str(path.resolve().relative_to(run_dir.resolve()))
    except ValueError:
        return str(path.resolve())


def _hash_files(paths: list[Path], run_dir: Path) -> dict[str, str]:
    return {_relpath(p, run_dir): _sha256(p) for p in sorted(paths)}


def _hash_tree(root: Path, run_dir: Path) -> dict[str, str]:
    return _hash_files([p for p in root.rglob("*") if p.is_file()], run_dir)


def transitive_deps(stage: str) -> list[str]:
    seen: list[str] = []

    def walk(s: str) -> None:
        for dep in DEPS[s]:
            if dep not in seen:
                walk(dep)
                seen.append(dep)

    walk(stage)
    return seen


def verify_upstream(stage: str, manifest: Manifest) -> None:
    for dep in transitive_deps(stage):
        record = manifest.stage(dep)
        if record is None:
            raise MissingUpstream(dep)
        for group in ("inputs", "outputs"):
            for rel, digest in record[group].items():
                path = manifest.resolve(rel)
                if not path.is_file() or _sha256(path) != digest:
                    raise StaleUpstream(dep, rel)


# ---------------------------------------------------------------------------
# Path helpers
# ---------------------------------------------------------------------------


def data_root(cfg: Config, run_dir: Path) -> Path:
    root = str(cfg.get("data.root"))
    return Path(root) if root else run_dir / "dataset"


def charges_path(cfg: Config, run_dir: Path) -> Path:
    p = str(cfg.get("data.charges"))
    return Path(p) if p else data_root(cfg, run_dir) / "charges.tsv"


def load_split(cfg: Config, run_dir: Path, split_key: str) -> DatasetSplit:
    split = str(cfg.get(split_key))
    ds = load_dataset(data_root(cfg, run_dir), split)
    max_year = int(cfg.get("data.max_year"))
    if max_year > 0:
        ds = filter_by_year(ds, max_year)
    return ds


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip()]


# ---------------------------------------------------------------------------
# Stages: each returns (outputs, extra_inputs) as {relpath: sha256}
# ---------------------------------------------------------------------------


def stage_synth(cfg: Config, run_dir: Path):
    root = data_root(cfg, run_dir)
    generate_synthetic(cfg.synth_config(), int(cfg.get("run.seed")), root)
    return _hash_tree(root, run_dir), {}


def stage_ingest(cfg: Config, run_dir: Path):
    root = data_root(cfg, run_dir)
    doc: dict = {"data_root": str(root), "splits": {}}
    dataset_files: list[Path] = []
    for key in ("data.train_split", "data.test_split"):
        ds = load_split(cfg, run_dir, key)
        doc["splits"][ds.name] = {
            "n_queries": len(ds.queries),
            "n_candidates": len(ds.candidates),
            "query_ids": ds.query_ids,
            "candidate_ids": ds.candidate_ids,
            "labels": {q: sorted(rel) for q, rel in sorted(ds.labels.items())},
        }
        split_dir = root / ds.name
        dataset_files += [p for p in split_dir.rglob("*") if p.is_file()]
    charges = load_charges(charges_path(cfg, run_dir))
    doc["charges"] = [c.name for c in charges]
    dataset_files.append(charges_path(cfg, run_dir))
    out = run_dir / "ingest.json"
    _write_json(out, doc)
    return _hash_files([out], run_dir), _hash_files(dataset_files, run_dir)


def stage_stats(cfg: Config, run_dir: Path):
    doc = {}
    for key in ("data.train_split", "data.test_split"):
        ds = load_split(cfg, run_dir, key)
        doc[ds.name] = dataset_statistics(ds).to_dict()
    out = run_dir / "stats.json"
    _write_json(out, doc)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return _hash_files([out], run_dir), {}


def stage_summarize(cfg: Config, run_dir: Path):
    client = LlmClient(cfg.llm_backend(cache_dir=run_dir / "llm_cache"))
    pattern = str(cfg.get("views.fact_section_pattern")) or None
    word_limit = int(cfg.get("llm.word_limit"))
    outputs: list[Path] = []
    for key in ("data.train_split", "data.test_split"):
        ds = load_split(cfg, run_dir, key)
        items = [(d.id, promptcase.fact_source_text(d.text, pattern))
                 for d in ds.all_cases()]
        summaries = client.summarize_many(items, word_limit)
        path = run_dir / "summaries" / f"{ds.name}.jsonl"
        _write_jsonl(path, [{"id": i, "summary": summaries[i]} for i, _ in items])
        outputs.append(path)
    return _hash_files(outputs, run_dir), {}


def stage_views(cfg: Config, run_dir: Path):
    placeholders = cfg.placeholders()
    truncate = int(cfg.get("views.truncate_tokens")) or None
    encoder = ToyHashEncoder(int(cfg.get("encoder.dim")))
    outputs: list[Path] = []
    for key in ("data.train_split", "data.test_split"):
        ds = load_split(cfg, run_dir, key)
        summaries = {
            row["id"]: row["summary"]
            for row in _read_jsonl(run_dir / "summaries" / f"{ds.name}.jsonl")
        }
        views = []
        vectors = {}
        for doc in ds.all_cases():
            v = promptcase.CaseViews(
                case_id=doc.id,
                fact_text=summaries[doc.id],
                issue_text=promptcase.extract_issues(doc.text, placeholders),
                full_text=promptcase.full_view_text(doc.text, truncate),
            )
            views.append(v)
            vectors[doc.id] = promptcase.encode_views(v, encoder)
        views_path = run_dir / "views" / f"{ds.name}.jsonl"
        promptcase.save_views(views, views_path)
        emb_path = run_dir / "views_emb" / f"{ds.name}.jsonl"
        EmbeddingStore(dim=3 * encoder.dim, vectors=vectors).save(emb_path)
        outputs += [views_path, emb_path]
    return _hash_files(outputs, run_dir), {}


def stage_casegnn(cfg: Config, run_dir: Path):
    out_dir = run_dir / "casegnn"
    encoder_id = str(cfg.get("encoder.id"))
    train_ds = load_split(cfg, run_dir, "data.train_split")
    test_ds = load_split(cfg, run_dir, "data.test_split")
    all_ids = sorted({d.id for ds in (train_ds, test_ds) for d in ds.all_cases()})

    if encoder_id == "external-file":
        # Precomputed case embeddings replace the per-case graph encoder.
        store = EmbeddingStore.load(str(cfg.get("encoder.external_path")))
        vectors = {i: store.get(i) for i in all_ids}
        emb = EmbeddingStore(dim=store.dim, vectors=vectors)
        emb.save(out_dir / "emb.jsonl")
        _write_jsonl(out_dir / "log.jsonl", [{"passthrough": True, "source": "external-file"}])
        return _hash_files([out_dir / "emb.jsonl", out_dir / "log.jsonl"], run_dir), {}

    encoder = ToyHashEncoder(int(cfg.get("encoder.dim")))
    pairs: dict[str, casegnn_mod.CaseGraphPair] = {}
    for ds in (train_ds, test_ds):
        store = EmbeddingStore.load(run_dir / "views_emb" / f"{ds.name}.jsonl")
        for views in promptcase.load_views(run_dir / "views" / f"{ds.name}.jsonl"):
            pairs[views.case_id] = casegnn_mod.build_case_graphs(
                views, store.get(views.case_id), encoder
            )
    bm25 = lexical.build_index(train_ds.candidates, k1=float(cfg.get("bm25.k1")),
                               b=float(cfg.get("bm25.b")))
    params, emb, log = casegnn_mod.train_casegnn(train_ds, pairs,
                                                 cfg.casegnn_config(), bm25)
    casegnn_mod.save_casegnn_params(params, out_dir / "params.json")
    emb.save(out_dir / "emb.jsonl")
    _write_jsonl(out_dir / "log.jsonl", log)
    files = [out_dir / "params.json", out_dir / "emb.jsonl", out_dir / "log.jsonl"]
    return _hash_files(files, run_dir), {}


def stage_graph(cfg: Config, run_dir: Path):
    case_emb = EmbeddingStore.load(run_dir / "casegnn" / "emb.jsonl")
    charges = load_charges(charges_path(cfg, run_dir))
    charge_encoder = ToyHashEncoder(case_emb.dim)
    charge_emb = EmbeddingStore(
        dim=case_emb.dim,
        vectors={c.name: charge_encoder.encode(c.node_text) for c in charges},
    )
    out_dir = run_dir / "graphs"
    outputs: list[Path] = []
    for key in ("data.train_split", "data.test_split"):
        ds = load_split(cfg, run_dir, key)
        g = graph_mod.build_graph(
            pool=ds.all_cases(),
            charges=charges,
            case_emb=case_emb,
            charge_emb=charge_emb,
            k=int(cfg.get("graph.k")),
            delta=float(cfg.get("graph.delta")),
            mode=str(cfg.get("graph.mode")),
            bm25_k1=float(cfg.get("bm25.k1")),
            bm25_b=float(cfg.get("bm25.b")),
        )
        gpath = out_dir / f"{ds.name}.json"
        fpath = out_dir / f"{ds.name}_features.jsonl"
        graph_mod.save_graph(g, gpath, fpath)
        stats_path = out_dir / f"{ds.name}_stats.json"
        _write_json(stats_path, graph_mod.graph_stats(g).to_dict())
        outputs += [gpath, fpath, stats_path]
    charge_path = out_dir / "charge_emb.jsonl"
    charge_emb.save(charge_path)
    outputs.append(charge_path)
    return _hash_files(outputs, run_dir), {}


def stage_train(cfg: Config, run_dir: Path):
    train_ds = load_split(cfg, run_dir, "data.train_split")
    g = graph_mod.load_graph(run_dir / "graphs" / f"{train_ds.name}.json")
    init_emb = EmbeddingStore.load(run_dir / "casegnn" / "emb.jsonl")
    params, log = training.train_caselink(train_ds, g, init_emb, cfg.train_config())
    out_dir = run_dir / "train"
    neural.save_params(params, out_dir / "params.json")
    _write_jsonl(out_dir / "log.jsonl", [e.to_dict() for e in log])
    return _hash_files([out_dir / "params.json", out_dir / "log.jsonl"], run_dir), {}


def stage_retrieve(cfg: Config, run_dir: Path):
    test_ds = load_split(cfg, run_dir, "data.test_split")
    g = graph_mod.load_graph(run_dir / "graphs" / f"{test_ds.name}.json")
    params = neural.load_params(run_dir / "train" / "params.json")
    run = training.retrieve(
        g, params, test_ds.query_ids, test_ds.candidate_ids,
        cutoff=int(cfg.get("retrieve.cutoff")),
    )
    path = run_dir / "retrieval" / "run.jsonl"
    run.save(path)
    return _hash_files([path], run_dir), {}


def stage_evaluate(cfg: Config, run_dir: Path):
    test_ds = load_split(cfg, run_dir, "data.test_split")
    run = evalkit.RetrievalRun.load(run_dir / "retrieval" / "run.jsonl")
    k = int(cfg.get("eval.k"))
    labels = {q: test_ds.labels[q] for q in run.query_ids()}
    report = evalkit.evaluate(run, labels, k)
    baseline = evalkit.random_baseline(
        labels, pool_size=len(test_ds.candidates), k=k,
        trials=int(cfg.get("eval.baseline_trials")), seed=int(cfg.get("run.seed")),
    )
    out_dir = run_dir / "metrics"
    _write_json(out_dir / "metrics.json", {
        "model": report.to_dict(),
        "random_baseline": baseline.to_dict(include_per_query=False),
    })
    table = report.to_table("model") + "\n" + baseline.to_table("random").splitlines()[1]
    (out_dir / "table.txt").write_text(table + "\n", encoding="utf-8")
    return _hash_files([out_dir / "metrics.json", out_dir / "table.txt"], run_dir), {}


STAGE_FNS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "stats": stage_stats,
    "summarize": stage_summarize,
    "views": stage_views,
    "casegnn": stage_casegnn,
    "graph": stage_graph,
    "train": stage_train,
    "retrieve": stage_retrieve,
    "evaluate": stage_evaluate,
}


class RunLock:
    """One stage at a time per run directory."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"run directory is locked ({self.path}); another stage is "
                "running, or remove the stale lock"
            ) from None
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def run_stage(stage: str, run_dir: str | Path, cfg: Config,
              dry_run: bool = False) -> None:
    """Execute one stage under the manifest contract.

    Raises MissingUpstream / StaleUpstream when the hash chain is broken and
    ConfigurationError for bad config; the CLI maps these to exit codes.
    """
    if stage not in STAGE_FNS:
        raise ValueError(f"unknown stage {stage!r}")
    run_dir = Path(run_dir)
    manifest = Manifest(run_dir)
    verify_upstream(stage, manifest)
    if dry_run:
        deps = ", ".join(transitive_deps(stage)) or "none"
        print(f"[dry-run] stage={stage} run_dir={run_dir} deps=({deps})")
        for key, value in sorted(cfg.snapshot().items()):
            print(f"[dry-run]   {key} = {value}")
        return
    with RunLock(run_dir):
        started = time.perf_counter()
        outputs, extra_inputs = STAGE_FNS[stage](cfg, run_dir)
        wall = time.perf_counter() - started
        inputs = dict(extra_inputs)
        for dep in DEPS[stage]:
            record = manifest.stage(dep)
            if record is not None:
                inputs.update(record["outputs"])
        manifest.record(stage, cfg.snapshot(), int(cfg.get("run.seed")),
                        inputs, outputs, wall)
    print(f"[{stage}] done in {wall:.2f}s; {len(outputs)} artifact(s)")


def run_pipeline(run_dir: str | Path, cfg: Config, dry_run: bool = False) -> None:
    for stage in STAGE_ORDER:
        run_stage(stage, run_dir, cfg, dry_run=dry_run)


def compare_runs(run_a: str | Path, run_b: str | Path, metric: str = "NDCG@5",
                 n_subsets: int = 5, alpha: float = 0.05,
                 comparisons: int = 1) -> dict:
    """Metric deltas plus a Bonferroni-corrected subset t-test for two runs.

    Both runs must have retrieval outputs over the same query set and labels.
    """
    run_a, run_b = Path(run_a), Path(run_b)
    runs = []
    labelsets = []
    for rd in (run_a, run_b):
        ingest = json.loads((rd / "ingest.json").read_text(encoding="utf-8"))
        manifest = Manifest(rd)
        record = manifest.stage("retrieve")
        if record is None:
            raise MissingUpstream("retrieve")
        test_split = str(record["config"]["data.test_split"])
        labels = {
            q: frozenset(rel)
            for q, rel in ingest["splits"][test_split]["labels"].items()
        }
        runs.append(evalkit.RetrievalRun.load(rd / "retrieval" / "run.jsonl"))
        labelsets.append(labels)
    if runs[0].query_ids() != runs[1].query_ids():
        raise evalkit.EvaluationError("runs cover different query sets")
    if labelsets[0] != labelsets[1]:
        raise evalkit.EvaluationError("runs were evaluated against different labels")
    labels = labelsets[0]

    _, k = evalkit.parse_metric_name(metric)
    k = k if k is not None else 5
    report_a = evalkit.evaluate(runs[0], labels, k)
    report_b = evalkit.evaluate(runs[1], labels, k)
    deltas = {
        name: report_a.to_dict(False)[name] - report_b.to_dict(False)[name]
        for name in report_a.to_dict(False)
        if name != "k"
    }
    ttest = evalkit.subset_ttest(runs[0], runs[1], labels, metric=metric,
                                 n_subsets=n_subsets, alpha=alpha,
                                 comparisons=comparisons)
    return {
        "run_a": str(run_a),
        "run_b": str(run_b),
        "metrics_a": report_a.to_dict(False),
        "metrics_b": report_b.to_dict(False),
        "deltas": deltas,
        "ttest": ttest.to_dict(),
    }
