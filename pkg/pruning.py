"""
tf-idf pruning of surrogate documents.

Queries (BSTR tfidf) or both queries and indexed documents (BSTR tfidf^2)
keep only the terms with the largest weight * ln(N/df).
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Sequence

from joblib import Parallel, delayed

from inverted_index import IndexStats, InvertedIndex, build_index
from permutation_codec import SurrogateDocument
from utils import ConfigError

logger = logging.getLogger(__name__)

PRUNE_QUERY = "query"
PRUNE_DOCUMENT = "document"
PRUNE_TARGETS = (PRUNE_QUERY, PRUNE_DOCUMENT)


@dataclass(frozen=True)
class PruneSpec:
    """Keep the top `keep` tf-idf terms of documents encoded at depth source_k."""
    target: str
    keep: int
    source_k: int

    def __post_init__(self):
        if self.target not in PRUNE_TARGETS:
            raise ConfigError(f"prune target must be one of {PRUNE_TARGETS}, got {self.target!r}")
        if self.keep < 1:
            raise ConfigError(f"keep must be >= 1, got {self.keep}")
        if self.source_k < 1:
            raise ConfigError(f"source_k must be >= 1, got {self.source_k}")

    def prune(self, doc: SurrogateDocument, stats: IndexStats) -> SurrogateDocument:
        return prune_by_tfidf(doc, stats, self.keep)

    def build_index(self, docs: Sequence[SurrogateDocument], n_jobs: int = 1) -> InvertedIndex:
        if self.target != PRUNE_DOCUMENT:
            raise ConfigError(f"only document pruning builds an index, got target {self.target!r}")
        logger.debug("Document pruning: keep %d terms of depth-%d documents", self.keep, self.source_k)
        return build_pruned_index(docs, self.keep, n_jobs=n_jobs)


def tfidf(doc: SurrogateDocument, stats: IndexStats) -> Dict[str, float]:
    """weight * ln(N/df); terms unknown to the index get the maximal idf ln(N)."""
    n = stats.doc_count
    return {term: w * math.log(n / stats.df.get(term, 1)) for term, w in doc.terms.items()}


def prune_by_tfidf(doc: SurrogateDocument, stats: IndexStats, keep: int) -> SurrogateDocument:
    if keep < 1:
        raise ConfigError(f"keep must be >= 1, got {keep}")
    if keep >= len(doc.terms):
        return doc
    scores = tfidf(doc, stats)
    # larger tf-idf, then larger weight, then lexicographic term
    ranked = sorted(doc.terms, key=lambda t: (-scores[t], -doc.terms[t], t))
    kept = set(ranked[:keep])
    return SurrogateDocument(doc_id=doc.doc_id, terms={t: w for t, w in doc.terms.items() if t in kept})


def build_pruned_index(docs: Sequence[SurrogateDocument], keep: int, n_jobs: int = 1) -> InvertedIndex:
    """Two passes: index everything for df statistics, then prune every document and index again."""
    if keep < 1:
        raise ConfigError(f"keep must be >= 1, got {keep}")
    stats = build_index(list(docs)).stats
    logger.info("Pruning %d documents to %d terms (unpruned postings=%d)", len(docs), keep, stats.postings_count)
    if n_jobs == 1:
        pruned = [prune_by_tfidf(doc, stats, keep) for doc in docs]
    else:
        pruned = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(prune_by_tfidf)(doc, stats, keep) for doc in docs)
    return build_index(pruned)
