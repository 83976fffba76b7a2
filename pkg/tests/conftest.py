import json

import pytest

from caselink.corpus import SynthConfig, generate_synthetic, load_dataset

SMALL_SYNTH = SynthConfig(
    clusters=4,
    candidates_per_cluster=8,
    queries_per_cluster=3,
    relevant_per_query=3,
    doc_tokens=40,
    shared_vocab=60,
    cluster_vocab=24,
    n_charges=8,
)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Small planted-cluster corpus shared by read-only tests."""
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(SMALL_SYNTH, seed=11, root_path=root)
    return root


@pytest.fixture(scope="session")
def synth_meta(synth_root):
    return json.loads((synth_root / "meta.json").read_text())


@pytest.fixture(scope="session")
def train_split(synth_root):
    return load_dataset(synth_root, "train")


@pytest.fixture(scope="session")
def test_split(synth_root):
    return load_dataset(synth_root, "test")


def write_toy_dataset(root, split="train", queries=None, candidates=None,
                      labels=None, years=None):
    """Materialize an explicit tiny dataset layout for loader tests."""
    qdir = root / split / "queries"
    cdir = root / split / "candidates"
    qdir.mkdir(parents=True, exist_ok=True)
    cdir.mkdir(parents=True, exist_ok=True)
    for cid, text in (queries or {}).items():
        (qdir / f"{cid}.txt").write_text(text, encoding="utf-8")
    for cid, text in (candidates or {}).items():
        (cdir / f"{cid}.txt").write_text(text, encoding="utf-8")
    (root / split / "labels.json").write_text(json.dumps(labels or {}))
    if years is not None:
        (root / split / "years.json").write_text(json.dumps(years))
    return root
