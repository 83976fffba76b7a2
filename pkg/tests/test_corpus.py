import hashlib
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from caselink import corpus
from caselink.corpus import (
    CaseDocument,
    ConfigurationError,
    DatasetError,
    DatasetSplit,
    SynthConfig,
    ValidationError,
    dataset_statistics,
    filter_by_year,
    generate_synthetic,
    load_charges,
    load_dataset,
    tokenize,
)

from conftest import SMALL_SYNTH, write_toy_dataset


class TestTokenizer:
    def test_lowercase_alnum_runs(self):
        assert tokenize("The Court, in 2021, held-that X.") == \
            ["the", "court", "in", "2021", "held", "that", "x"]

    def test_unicode_aware(self):
        assert tokenize("Müller façade №42") == ["müller", "façade", "42"]

    def test_underscore_is_a_separator(self):
        assert tokenize("FRAGMENT_SUPPRESSED") == ["fragment", "suppressed"]

    @given(st.text(max_size=200))
    def test_tokens_are_lowercase_and_stable(self, text):
        tokens = tokenize(text)
        assert all(t == t.lower() and "_" not in t for t in tokens)
        assert tokenize(" ".join(tokens)) == tokens


class TestLoadDataset:
    def test_well_formed_toy_layout(self, tmp_path):
        write_toy_dataset(
            tmp_path,
            queries={f"q{i}": f"query text {i}" for i in range(3)},
            candidates={"c1": "alpha", "c2": "beta"},
            labels={"q0": ["c1"], "q1": ["c2"]},
        )
        ds = load_dataset(tmp_path, "train")
        assert len(ds.queries) == 3
        assert len(ds.candidates) == 2
        assert ds.relevant("q0") == frozenset({"c1"})

    def test_label_with_unknown_id_names_offender(self, tmp_path):
        write_toy_dataset(
            tmp_path,
            queries={"q0": "text"},
            candidates={"c1": "text"},
            labels={"q0": ["X99"]},
        )
        with pytest.raises(ValidationError, match="X99"):
            load_dataset(tmp_path, "train")

    def test_empty_candidate_pool(self, tmp_path):
        write_toy_dataset(tmp_path, queries={"q0": "text"}, candidates={}, labels={})
        with pytest.raises(DatasetError, match="empty candidate pool"):
            load_dataset(tmp_path, "train")

    def test_missing_directory_is_fatal(self, tmp_path):
        with pytest.raises(DatasetError, match="missing directory"):
            load_dataset(tmp_path, "train")

    def test_years_sidecar_attaches_metadata(self, tmp_path):
        write_toy_dataset(
            tmp_path,
            queries={"q0": "text"},
            candidates={"c1": "text"},
            labels={"q0": ["c1"]},
            years={"c1": 2020},
        )
        ds = load_dataset(tmp_path, "train")
        assert ds.candidates[0].year == 2020
        assert ds.queries[0].year is None

    def test_shared_stem_marks_role_both(self, tmp_path):
        write_toy_dataset(
            tmp_path,
            queries={"d1": "text", "q0": "text"},
            candidates={"d1": "text", "c1": "text"},
            labels={},
        )
        ds = load_dataset(tmp_path, "train")
        roles = {d.id: d.role for d in ds.queries + ds.candidates}
        assert roles["d1"] == "both"
        assert roles["q0"] == "query"


class TestInvariants:
    def test_self_relevance_rejected(self):
        docs = [CaseDocument("a", "text"), CaseDocument("b", "text")]
        with pytest.raises(ValidationError, match="relevant to itself"):
            DatasetSplit("t", [docs[0]], docs, {"a": frozenset({"a"})})

    def test_duplicate_candidate_ids_rejected(self):
        doc = CaseDocument("a", "text")
        with pytest.raises(ValidationError, match="duplicate"):
            DatasetSplit("t", [], [doc, CaseDocument("a", "other")], {})

    def test_empty_text_rejected(self):
        with pytest.raises(ValidationError):
            CaseDocument("a", "   \n\t ")

    def test_labels_within_pools_exhaustive(self, train_split):
        qids = set(train_split.query_ids)
        cids = set(train_split.candidate_ids)
        for q, rel in train_split.labels.items():
            assert q in qids
            for c in rel:
                assert c in cids


class TestFilterByYear:
    def _split(self, years):
        candidates = [CaseDocument(f"c{i}", f"text {i}", year=y)
                      for i, y in enumerate(years)]
        queries = [CaseDocument("q0", "query")]
        labels = {"q0": frozenset(c.id for c in candidates)}
        return DatasetSplit("t", queries, candidates, labels)

    def test_direct_filter(self):
        out = filter_by_year(self._split([2019, 2021, 2023]), 2021)
        assert out.candidate_ids == ["c0", "c1"]

    def test_max_year_below_all_warns_and_empties(self):
        with pytest.warns(UserWarning, match="empty candidate pool"):
            out = filter_by_year(self._split([2019, 2021]), 2000)
        assert out.candidates == []
        assert out.labels == {}

    def test_filtered_relevant_pair_removed_from_labels(self):
        out = filter_by_year(self._split([2019, 2023]), 2020)
        assert out.labels["q0"] == frozenset({"c0"})

    def test_missing_year_kept_with_warning(self):
        with pytest.warns(UserWarning, match="no year metadata"):
            out = filter_by_year(self._split([2019, None]), 2020)
        assert out.candidate_ids == ["c0", "c1"]

    def test_idempotent(self):
        once = filter_by_year(self._split([2018, 2020, 2022]), 2020)
        twice = filter_by_year(once, 2020)
        assert once.candidate_ids == twice.candidate_ids
        assert once.labels == twice.labels


class TestStatistics:
    def test_avg_relevant(self):
        candidates = [CaseDocument(f"c{i}", "x") for i in range(8)]
        queries = [CaseDocument("q0", "x"), CaseDocument("q1", "x")]
        labels = {
            "q0": frozenset(c.id for c in candidates[:3]),
            "q1": frozenset(c.id for c in candidates[3:8]),
        }
        rep = dataset_statistics(DatasetSplit("t", queries, candidates, labels))
        assert rep.avg_relevant_per_query == 4.0

    def test_single_doc_token_length(self):
        ds = DatasetSplit("t", [], [CaseDocument("c", "a b c")], {})
        rep = dataset_statistics(ds)
        assert rep.avg_case_tokens == 3
        assert rep.max_case_tokens == 3

    def test_synthetic_counts_match_generator_config(self, train_split, synth_meta):
        cfg = synth_meta["config"]
        rep = dataset_statistics(train_split)
        assert rep.n_candidates == cfg["clusters"] * cfg["candidates_per_cluster"]
        assert rep.n_queries == cfg["clusters"] * cfg["queries_per_cluster"]
        assert rep.avg_relevant_per_query == cfg["relevant_per_query"]


def _tree_digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


class TestSyntheticGenerator:
    def test_fixed_seed_is_byte_identical(self, tmp_path):
        generate_synthetic(SMALL_SYNTH, seed=3, root_path=tmp_path / "a")
        generate_synthetic(SMALL_SYNTH, seed=3, root_path=tmp_path / "b")
        assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")

    def test_candidate_count(self, tmp_path):
        cfg = SynthConfig(clusters=6, candidates_per_cluster=20, queries_per_cluster=2)
        generate_synthetic(cfg, seed=5, root_path=tmp_path)
        ds = load_dataset(tmp_path, "test")
        assert len(ds.candidates) == 120

    def test_full_injection_rate_mentions_a_charge_everywhere(self, tmp_path):
        cfg = SynthConfig(clusters=2, candidates_per_cluster=5,
                          queries_per_cluster=2, relevant_per_query=2,
                          charge_injection_rate=1.0)
        generate_synthetic(cfg, seed=9, root_path=tmp_path)
        charges = load_charges(tmp_path / "charges.tsv")
        names = [c.name for c in charges]
        for split in ("train", "test"):
            for doc in load_dataset(tmp_path, split).all_cases():
                assert any(name in doc.text for name in names), doc.id

    def test_infeasible_config_rejected(self):
        with pytest.raises(ConfigurationError, match="relevant_per_query"):
            SynthConfig(candidates_per_cluster=4, relevant_per_query=4)

    def test_roundtrip_every_id_loaded_exactly_once(self, synth_root, synth_meta):
        for split in ("train", "test"):
            ds = load_dataset(synth_root, split)
            loaded = sorted(d.id for d in ds.queries) + sorted(d.id for d in ds.candidates)
            generated = sorted(synth_meta["clusters"][split])
            assert sorted(loaded) == generated
            assert len(loaded) == len(set(loaded))

    def test_relevance_is_same_cluster(self, train_split, synth_meta):
        clusters = synth_meta["clusters"]["train"]
        for q, rel in train_split.labels.items():
            for c in rel:
                assert clusters[c] == clusters[q]

    def test_train_test_ids_disjoint(self, train_split, test_split):
        train_ids = {d.id for d in train_split.all_cases()}
        test_ids = {d.id for d in test_split.all_cases()}
        assert not train_ids & test_ids


class TestCharges:
    def test_load_charge_list(self, tmp_path):
        path = tmp_path / "charges.tsv"
        path.write_text("negligence\tfailure to take care\nfraud\tdeceit\n")
        charges = load_charges(path)
        assert [c.name for c in charges] == ["negligence", "fraud"]
        assert charges[0].node_text == "failure to take care"

    def test_duplicate_name_rejected(self, tmp_path):
        path = tmp_path / "charges.tsv"
        path.write_text("fraud\ta\nfraud\tb\n")
        with pytest.raises(ValidationError, match="duplicate"):
            load_charges(path)

    def test_name_only_falls_back_to_name_text(self):
        assert corpus.ChargeEntry("negligence").node_text == "negligence"
