"""Three-view case representations: fact summary, issue extract, full text.

The fact view is an LLM summary (50 words by default), the issue view is the
concatenation of all sentences containing a placeholder token, and the full
view is the whitespace-normalized case text. The three views are embedded
separately and concatenated into one vector of length 3 * dim.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import CaseDocument, normalize_ws
from .encoders import LlmBackendConfig, LlmClient, ToyHashEncoder

DEFAULT_PLACEHOLDERS = (
    "FRAGMENT_SUPPRESSED",
    "REFERENCE_SUPPRESSED",
    "CITATION_SUPPRESSED",
    "DATE_SUPPRESSED",
)

# Sentence boundary: '.', '?' or '!' followed by whitespace.
_SENTENCE_SPLIT = re.compile(r"(?<=[.?!])\s+")

VIEW_ORDER = ("fact", "issue", "full")


@dataclass(frozen=True)
class CaseViews:
    case_id: str
    fact_text: str
    issue_text: str
    full_text: str

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "fact_text": self.fact_text,
            "issue_text": self.issue_text,
            "full_text": self.full_text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaseViews":
        return cls(d["case_id"], d["fact_text"], d["issue_text"], d["full_text"])


def split_sentences(text: str) -> list[str]:
    return [s for s in _SENTENCE_SPLIT.split(text) if s.strip()]


def extract_issues(text: str, placeholders: list[str] | tuple[str, ...] = DEFAULT_PLACEHOLDERS) -> str:
    """Concatenate, in document order, every sentence containing a placeholder."""
    if not placeholders:
        raise ValueError("placeholder list must be non-empty")
    matched = [
        s for s in split_sentences(text) if any(p in s for p in placeholders)
    ]
    return " ".join(matched)


def fact_source_text(case_text: str, fact_section_pattern: str | None = None) -> str:
    """The text handed to the summarizer: the whole normalized case, or the
    first match of the section regex when one is configured and found."""
    normalized = normalize_ws(case_text)
    if fact_section_pattern:
        m = re.search(fact_section_pattern, normalized, re.IGNORECASE | re.DOTALL)
        if m:
            return normalize_ws(m.group(1) if m.groups() else m.group(0))
    return normalized


def full_view_text(case_text: str, truncate_tokens: int | None = None) -> str:
    full = normalize_ws(case_text)
    if truncate_tokens is not None and truncate_tokens > 0:
        words = full.split()
        if len(words) > truncate_tokens:
            full = " ".join(words[:truncate_tokens])
    return full


def build_views(case: CaseDocument, backend: LlmBackendConfig,
                placeholders=DEFAULT_PLACEHOLDERS, *,
                fact_section_pattern: str | None = None,
                truncate_tokens: int | None = None,
                client: LlmClient | None = None) -> CaseViews:
    """Assemble the three views for one case.

    By default the whole case text is fed to the summarizer; when
    fact_section_pattern is given (a regex with one capture group) the first
    match is used as the factual section instead. truncate_tokens caps the
    full view's token count for encoders with a hard input budget.
    """
    if client is None:
        client = LlmClient(backend)
    return CaseViews(
        case_id=case.id,
        fact_text=client.summarize(fact_source_text(case.text, fact_section_pattern), 50),
        issue_text=extract_issues(case.text, placeholders),
        full_text=full_view_text(case.text, truncate_tokens),
    )


def encode_views(views: CaseViews, encoder: ToyHashEncoder) -> np.ndarray:
    """[emb(fact) || emb(issue) || emb(full)], length 3 * encoder.dim.

    An empty view encodes to the encoder's bias bucket (a fixed unit vector)
    rather than a zero block, so norms stay comparable across cases.
    """
    parts = [
        encoder.encode(views.fact_text),
        encoder.encode(views.issue_text),
        encoder.encode(views.full_text),
    ]
    out = np.concatenate(parts)
    if out.shape != (3 * encoder.dim,):
        raise ValueError(f"bad view embedding shape {out.shape}")
    return out


def view_slice(view_vector: np.ndarray, tag: str, dim: int) -> np.ndarray:
    """The per-view block of a concatenated 3*dim view embedding."""
    idx = VIEW_ORDER.index(tag)
    return view_vector[idx * dim:(idx + 1) * dim]


def save_views(views: list[CaseViews], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for v in sorted(views, key=lambda v: v.case_id):
            f.write(json.dumps(v.to_dict(), sort_keys=True) + "\n")


def load_views(path: str | Path) -> list[CaseViews]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(CaseViews.from_dict(json.loads(line)))
    return out
