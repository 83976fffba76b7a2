"""Layered flat key-value configuration for the pipeline.

Resolution order: built-in defaults, then the config file, then environment
variables (``CASELINK_<KEY>`` with dots as underscores, uppercased), then
command-line ``--set key=value`` overrides. The fully resolved snapshot is
frozen into the run manifest.

File format: one ``key = value`` per line, ``#`` starts a comment.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import ConfigurationError, SynthConfig
from .encoders import LlmBackendConfig
from .promptcase import DEFAULT_PLACEHOLDERS
from .training import TrainConfig

# key -> (type, default, help)
REGISTRY: dict[str, tuple[type, object, str]] = {
    "data.root": (str, "", "dataset root; empty means <run>/dataset"),
    "data.train_split": (str, "train", "name of the training split directory"),
    "data.test_split": (str, "test", "name of the test split directory"),
    "data.charges": (str, "", "charge list file; empty means <root>/charges.tsv"),
    "data.max_year": (int, 0, "drop candidates newer than this year; 0 disables"),

    "synth.clusters": (int, 6, "number of planted clusters"),
    "synth.candidates_per_cluster": (int, 20, "candidates per cluster"),
    "synth.queries_per_cluster": (int, 5, "queries per cluster"),
    "synth.relevant_per_query": (int, 4, "relevant candidates per query"),
    "synth.doc_tokens": (int, 60, "tokens per generated case"),
    "synth.shared_vocab": (int, 120, "size of the shared vocabulary"),
    "synth.cluster_vocab": (int, 40, "size of each cluster vocabulary"),
    "synth.cluster_token_fraction": (float, 0.6, "fraction of cluster-specific tokens"),
    "synth.n_charges": (int, 12, "number of synthetic charges"),
    "synth.charges_per_cluster": (int, 2, "charges associated with each cluster"),
    "synth.charge_injection_rate": (float, 0.3, "probability a case mentions its charges"),
    "synth.year_min": (int, 2018, "earliest case year"),
    "synth.year_max": (int, 2023, "latest case year"),
    "synth.placeholder_rate": (float, 0.25, "probability a sentence carries a placeholder"),

    "llm.mode": (str, "mock", "summarizer backend: mock or remote"),
    "llm.endpoint": (str, "", "chat-completions endpoint URL (remote mode)"),
    "llm.model": (str, "mock-summarizer", "model name sent to the endpoint"),
    "llm.max_retries": (int, 3, "HTTP retry budget"),
    "llm.timeout": (float, 30.0, "per-request timeout in seconds"),
    "llm.parallelism": (int, 4, "bounded-parallel remote requests"),
    "llm.word_limit": (int, 50, "summary word limit"),

    "views.placeholders": (str, ",".join(DEFAULT_PLACEHOLDERS),
                           "comma-separated placeholder tokens for issue extraction"),
    "views.truncate_tokens": (int, 0, "token cap for the full-text view; 0 disables"),
    "views.fact_section_pattern": (str, "", "regex locating the factual section"),

    "encoder.id": (str, "toy-hash", "text encoder: toy-hash or external-file"),
    "encoder.dim": (int, 64, "per-view embedding dimensionality"),
    "encoder.external_path": (str, "", "embedding store for external-file"),

    "casegnn.hidden_dim": (int, 48, "hidden width of the per-case graph encoder"),
    "casegnn.out_dim": (int, 32, "per-view output width (case dim = 2x this)"),
    "casegnn.lr": (float, 0.000005, "learning rate"),
    "casegnn.weight_decay": (float, 0.00005, "weight decay"),
    "casegnn.epochs": (int, 1000, "training epochs"),
    "casegnn.batch_size": (int, 32, "queries per batch"),
    "casegnn.tau": (float, 0.1, "contrastive temperature"),
    "casegnn.n_easy": (int, 1, "random negatives per query"),
    "casegnn.n_hard": (int, 5, "BM25 hard negatives per query"),

    "graph.k": (int, 5, "per-case BM25 top-k for case-case edges"),
    "graph.delta": (float, 0.9, "cosine threshold for charge-charge edges"),
    "graph.mode": (str, "homogeneous", "homogeneous or heterogeneous"),

    "training.lr": (float, 0.00001, "learning rate"),
    "training.weight_decay": (float, 0.0, "weight decay"),
    "training.epochs": (int, 1000, "training epochs"),
    "training.batch_size": (int, 128, "queries per batch"),
    "training.tau": (float, 0.1, "contrastive temperature"),
    "training.lambda": (float, 0.001, "degree-regularization coefficient"),
    "training.n_easy": (int, 1, "random negatives per query"),
    "training.n_hard": (int, 5, "BM25 hard negatives per query"),
    "training.hidden_dim": (int, 64, "hidden layer width"),
    "training.out_dim": (int, 64, "output layer width (before the residual concat)"),
    "training.patience": (int, 20, "early-stopping patience in epochs"),
    "training.validation_fraction": (float, 0.1, "training queries held out for NDCG@5"),

    "retrieve.cutoff": (int, 5, "ranking cutoff recorded on the run"),
    "eval.k": (int, 5, "metric cutoff"),
    "eval.baseline_trials": (int, 200, "Monte-Carlo trials for the random baseline"),
    "eval.subsets": (int, 5, "subsets for the paired t-test"),
    "eval.alpha": (float, 0.05, "significance level before Bonferroni correction"),

    "bm25.k1": (float, 1.5, "BM25 k1"),
    "bm25.b": (float, 0.75, "BM25 b"),

    "run.seed": (int, 7, "the single seed all stage randomness derives from"),
}

ENV_PREFIX = "CASELINK_"


def env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_")


def _coerce(key: str, raw: str):
    typ = REGISTRY[key][0]
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


@dataclass
class Config:
    values: dict[str, object] = field(default_factory=dict)

    def get(self, key: str):
        if key not in REGISTRY:
            raise ConfigurationError(f"unknown config key {key!r}")
        return self.values.get(key, REGISTRY[key][1])

    def snapshot(self) -> dict[str, object]:
        return {key: self.get(key) for key in sorted(REGISTRY)}

    # -- typed views over the flat keys --------------------------------

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            clusters=self.get("synth.clusters"),
            candidates_per_cluster=self.get("synth.candidates_per_cluster"),
            queries_per_cluster=self.get("synth.queries_per_cluster"),
            relevant_per_query=self.get("synth.relevant_per_query"),
            doc_tokens=self.get("synth.doc_tokens"),
            shared_vocab=self.get("synth.shared_vocab"),
            cluster_vocab=self.get("synth.cluster_vocab"),
            cluster_token_fraction=self.get("synth.cluster_token_fraction"),
            n_charges=self.get("synth.n_charges"),
            charges_per_cluster=self.get("synth.charges_per_cluster"),
            charge_injection_rate=self.get("synth.charge_injection_rate"),
            year_min=self.get("synth.year_min"),
            year_max=self.get("synth.year_max"),
            placeholder_rate=self.get("synth.placeholder_rate"),
        )

    def llm_backend(self, cache_dir: Path | None) -> LlmBackendConfig:
        return LlmBackendConfig(
            endpoint=self.get("llm.endpoint"),
            model_name=self.get("llm.model"),
            mode=self.get("llm.mode"),
            max_retries=self.get("llm.max_retries"),
            timeout=self.get("llm.timeout"),
            request_parallelism=self.get("llm.parallelism"),
            cache_dir=cache_dir,
        )

    def placeholders(self) -> list[str]:
        return [p for p in str(self.get("views.placeholders")).split(",") if p]

    def casegnn_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.get("casegnn.lr"),
            weight_decay=self.get("casegnn.weight_decay"),
            epochs=self.get("casegnn.epochs"),
            batch_size=self.get("casegnn.batch_size"),
            tau=self.get("casegnn.tau"),
            lambda_=0.0,
            n_easy=self.get("casegnn.n_easy"),
            n_hard=self.get("casegnn.n_hard"),
            seed=self.get("run.seed"),
            hidden_dim=self.get("casegnn.hidden_dim"),
            out_dim=self.get("casegnn.out_dim"),
            validation_fraction=0.0,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.get("training.lr"),
            weight_decay=self.get("training.weight_decay"),
            epochs=self.get("training.epochs"),
            batch_size=self.get("training.batch_size"),
            tau=self.get("training.tau"),
            lambda_=self.get("training.lambda"),
            n_easy=self.get("training.n_easy"),
            n_hard=self.get("training.n_hard"),
            k_pairs=self.get("graph.k"),
            delta=self.get("graph.delta"),
            seed=self.get("run.seed"),
            patience=self.get("training.patience"),
            validation_fraction=self.get("training.validation_fraction"),
            hidden_dim=self.get("training.hidden_dim"),
            out_dim=self.get("training.out_dim"),
        )


def parse_config_file(path: str | Path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def resolve_config(config_path: str | Path | None = None,
                   overrides: list[str] | None = None) -> Config:
    """Apply defaults, file, environment, then CLI overrides, validating keys.

    Raises ConfigurationError listing every offending key.
    """
    values: dict[str, object] = {}
    bad: list[str] = []

    def apply(source: dict[str, str], origin: str) -> None:
        for key, raw in source.items():
            if key not in REGISTRY:
                bad.append(f"{key} ({origin})")
                continue
            try:
                values[key] = _coerce(key, raw)
            except ConfigurationError as exc:
                bad.append(f"{exc} ({origin})")

    if config_path:
        apply(parse_config_file(config_path), f"file {config_path}")

    env_pairs = {}
    for key in REGISTRY:
        raw = os.environ.get(env_name(key))
        if raw is not None:
            env_pairs[key] = raw
    apply(env_pairs, "environment")

    cli_pairs = {}
    for item in overrides or []:
        if "=" not in item:
            bad.append(f"{item} (--set expects key=value)")
            continue
        key, _, value = item.partition("=")
        cli_pairs[key.strip()] = value.strip()
    apply(cli_pairs, "--set")

    if bad:
        raise ConfigurationError("invalid configuration: " + "; ".join(bad))
    return Config(values)
