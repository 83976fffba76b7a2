import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from caselink.corpus import CaseDocument
from caselink.encoders import LlmBackendConfig, LlmClient, ToyHashEncoder
from caselink.promptcase import (
    DEFAULT_PLACEHOLDERS,
    CaseViews,
    build_views,
    encode_views,
    extract_issues,
    load_views,
    save_views,
    split_sentences,
    view_slice,
)

MOCK = LlmBackendConfig(mode="mock")


class TestExtractIssues:
    def test_no_placeholder_yields_empty(self):
        assert extract_issues("The court held. Appeal denied.") == ""

    def test_single_match_verbatim(self):
        text = "First sentence. Cited FRAGMENT_SUPPRESSED in support. Last one."
        assert extract_issues(text) == "Cited FRAGMENT_SUPPRESSED in support."

    def test_three_matches_in_document_order(self):
        matching = [f"Match {i} REFERENCE_SUPPRESSED here." for i in range(3)]
        fillers = [f"Filler sentence {i}." for i in range(5)]
        ordered = [fillers[0], matching[0], fillers[1], fillers[2], matching[1],
                   fillers[3], matching[2], fillers[4]]
        out = extract_issues(" ".join(ordered))
        assert out == " ".join(matching)

    def test_empty_placeholder_list_rejected(self):
        with pytest.raises(ValueError):
            extract_issues("text", [])

    def test_output_is_sentence_subsequence(self):
        rng = random.Random(4)
        sentences = []
        for i in range(30):
            ph = rng.choice(DEFAULT_PLACEHOLDERS) if rng.random() < 0.4 else "plain"
            sentences.append(f"Sentence {i} mentions {ph} today.")
        text = " ".join(sentences)
        out_sentences = split_sentences(extract_issues(text))
        source = split_sentences(text)
        it = iter(source)
        assert all(s in it for s in out_sentences)  # subsequence check

    @given(st.lists(
        st.tuples(st.booleans(), st.integers(0, 999)), min_size=0, max_size=25,
    ))
    def test_exactly_the_placeholder_sentences_survive(self, flags):
        sentences = [
            f"Sentence {i} cites FRAGMENT_SUPPRESSED now." if with_ph
            else f"Sentence {i} tag {tag} is plain."
            for i, (with_ph, tag) in enumerate(flags)
        ]
        out = extract_issues(" ".join(sentences))
        expected = " ".join(s for s, (with_ph, _) in zip(sentences, flags) if with_ph)
        assert out == expected


class TestBuildViews:
    def test_mock_fact_is_first_50_words(self):
        words = [f"w{i}" for i in range(120)]
        case = CaseDocument("c1", " ".join(words))
        views = build_views(case, MOCK)
        assert views.fact_text.split() == words[:50]
        assert views.full_text == " ".join(words)

    def test_placeholderless_case_tolerated(self):
        case = CaseDocument("c1", "No placeholders here. Just text.")
        views = build_views(case, MOCK)
        assert views.issue_text == ""
        assert views.case_id == "c1"

    def test_same_case_twice_identical_with_cache(self, tmp_path):
        cfg = LlmBackendConfig(mode="mock", cache_dir=tmp_path / "cache")
        client = LlmClient(cfg)
        case = CaseDocument("c1", "Some case text. FRAGMENT_SUPPRESSED cited.")
        first = build_views(case, cfg, client=client)
        second = build_views(case, cfg, client=client)
        assert first == second

    def test_fact_section_pattern(self):
        case = CaseDocument("c1", "HEADNOTE stuff. FACTS: the party appealed. END.")
        views = build_views(case, MOCK, fact_section_pattern=r"FACTS:(.*?)END")
        assert views.fact_text == "the party appealed."

    def test_truncate_tokens_caps_full_view(self):
        case = CaseDocument("c1", " ".join(f"w{i}" for i in range(30)))
        views = build_views(case, MOCK, truncate_tokens=10)
        assert len(views.full_text.split()) == 10


class TestEncodeViews:
    def test_length_is_three_times_dim(self):
        enc = ToyHashEncoder(64)
        views = CaseViews("c", "fact words", "issue words", "full words")
        assert encode_views(views, enc).shape == (192,)

    def test_identical_views_identical_vectors(self):
        enc = ToyHashEncoder(32)
        a = CaseViews("a", "x y", "z", "full text")
        b = CaseViews("b", "x y", "z", "full text")
        assert np.array_equal(encode_views(a, enc), encode_views(b, enc))

    def test_view_order_sensitivity(self):
        """Permuting the three views must change the concatenated vector."""
        enc = ToyHashEncoder(32)
        a = CaseViews("a", "first", "second", "third")
        b = CaseViews("a", "second", "third", "first")
        assert not np.array_equal(encode_views(a, enc), encode_views(b, enc))

    def test_empty_view_uses_marker_not_zero_block(self):
        enc = ToyHashEncoder(16)
        views = CaseViews("a", "fact", "", "full")
        vec = encode_views(views, enc)
        issue_block = view_slice(vec, "issue", 16)
        assert np.linalg.norm(issue_block) == pytest.approx(1.0)
        assert issue_block[0] == 1.0

    def test_view_slice_layout(self):
        enc = ToyHashEncoder(8)
        views = CaseViews("a", "f", "i", "u")
        vec = encode_views(views, enc)
        assert np.array_equal(view_slice(vec, "fact", 8), enc.encode("f"))
        assert np.array_equal(view_slice(vec, "issue", 8), enc.encode("i"))
        assert np.array_equal(view_slice(vec, "full", 8), enc.encode("u"))


def test_views_persist_roundtrip(tmp_path):
    views = [CaseViews(f"c{i}", f"fact {i}", "", f"full {i}") for i in range(3)]
    path = tmp_path / "views.jsonl"
    save_views(views, path)
    assert load_views(path) == sorted(views, key=lambda v: v.case_id)
