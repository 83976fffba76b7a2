"""Graph-based legal case retrieval at desk scale.

Pipeline stages: synthetic/ingested corpora -> three-view case texts ->
per-case text-graph embeddings -> the case-charge graph -> contrastive
graph-attention training -> cosine retrieval -> metrics and significance
tests. See the CLI (``caselink --help``) for stage-by-stage orchestration.
"""

__version__ = "0.1.0"
