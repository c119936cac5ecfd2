"""
Inverted index over surrogate documents.

Posting lists hold (doc ordinal, integer weight) pairs. Queries are scored
term-at-a-time into an int64 accumulator, so every score is the exact dot
product of the query and document weight maps.
"""

import heapq
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from config import INDEX_MAGIC, INDEX_VERSION
from permutation_codec import SurrogateDocument
from utils import (
    BinaryReader,
    ConfigError,
    DataFormatError,
    IndexStateError,
    deinterleave,
    interleave,
    pack_string,
    pack_u32,
    pack_u64,
    varint_decode,
    varint_encode,
    write_file,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PostingList:
    term: str
    ordinals: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.ordinals)


@dataclass(frozen=True)
class IndexStats:
    doc_count: int
    df: Dict[str, int]
    postings_count: int

    @property
    def term_count(self) -> int:
        return len(self.df)


@dataclass(frozen=True)
class ScoredHit:
    doc_id: str
    score: int
    ordinal: int


class InvertedIndex:
    """Single-writer build phase, then sealed and read-only."""

    def __init__(self):
        self._doc_ids: List[str] = []
        self._ordinal_of: Dict[str, int] = {}
        self._pending = defaultdict(lambda: ([], []))
        self._postings: Dict[str, PostingList] = {}
        self._stats = None

    def __len__(self) -> int:
        return len(self._doc_ids)

    @property
    def sealed(self) -> bool:
        return self._stats is not None

    @property
    def stats(self) -> IndexStats:
        if not self.sealed:
            raise IndexStateError("index is not sealed")
        return self._stats

    @property
    def doc_ids(self) -> List[str]:
        return list(self._doc_ids)

    @property
    def max_weight(self) -> int:
        """Largest posting weight: the encoding depth k_x, unless document pruning removed every rank-1 term."""
        return max((int(pl.weights.max()) for pl in self._postings.values()), default=0)

    def ordinal(self, doc_id: str) -> int:
        return self._ordinal_of[doc_id]

    def posting(self, term: str) -> PostingList:
        return self._postings[term]

    def add_document(self, doc: SurrogateDocument) -> int:
        if self.sealed:
            raise IndexStateError("cannot add documents to a sealed index")
        if doc.doc_id in self._ordinal_of:
            raise IndexStateError(f"duplicate doc_id {doc.doc_id!r}")
        ordinal = len(self._doc_ids)
        self._doc_ids.append(doc.doc_id)
        self._ordinal_of[doc.doc_id] = ordinal
        for term, weight in doc.terms.items():
            if weight < 1:
                raise IndexStateError(f"{doc.doc_id}: non-positive weight {weight} for term {term!r}")
            ordinals, weights = self._pending[term]
            ordinals.append(ordinal)
            weights.append(weight)
        return ordinal

    def seal(self) -> IndexStats:
        if self.sealed:
            return self._stats
        if not self._doc_ids:
            raise IndexStateError("cannot seal an empty index")
        for term in sorted(self._pending):
            ordinals, weights = self._pending[term]
            self._postings[term] = PostingList(
                term=term,
                ordinals=np.asarray(ordinals, dtype=np.int64),
                weights=np.asarray(weights, dtype=np.int64),
            )
        self._pending.clear()
        self._stats = self._compute_stats()
        logger.info("Sealed index: N=%d, terms=%d, postings=%d",
                    self._stats.doc_count, self._stats.term_count, self._stats.postings_count)
        return self._stats

    def _compute_stats(self) -> IndexStats:
        df = {term: len(pl) for term, pl in self._postings.items()}
        return IndexStats(doc_count=len(self._doc_ids), df=df, postings_count=sum(df.values()))

    def score_query(self, q: SurrogateDocument, c: int) -> List[ScoredHit]:
        """Top-c hits by descending score, ascending ordinal on ties; zero scores are dropped."""
        if not self.sealed:
            raise IndexStateError("index must be sealed before querying")
        if c < 1:
            raise ConfigError(f"c must be positive, got {c}")
        acc = np.zeros(len(self._doc_ids), dtype=np.int64)
        for term, weight in q.terms.items():
            pl = self._postings.get(term)
            if pl is None:
                continue
            acc[pl.ordinals] += weight * pl.weights
        hits = np.flatnonzero(acc)
        top = heapq.nsmallest(c, zip((-acc[hits]).tolist(), hits.tolist()))
        return [ScoredHit(doc_id=self._doc_ids[o], score=-neg, ordinal=o) for neg, o in top]

    def idf(self, term: str) -> float:
        stats = self.stats
        if term not in stats.df:
            raise IndexStateError(f"unknown term {term!r}")
        return math.log(stats.doc_count / stats.df[term])

    # ==========================================
    # Persistence
    # ==========================================

    def save(self, path: str) -> int:
        """Write the sealed index; returns the file size in bytes."""
        stats = self.stats
        terms = sorted(self._postings)
        blobs = []
        dictionary = []
        offset = 0
        for term in terms:
            pl = self._postings[term]
            blob = bytes(varint_encode(interleave(pl.ordinals.tolist(), pl.weights.tolist())))
            dictionary.append(pack_string(term) + pack_u32(len(pl)) + pack_u64(offset) + pack_u64(len(blob)))
            blobs.append(blob)
            offset += len(blob)
        parts = [
            INDEX_MAGIC,
            pack_u32(INDEX_VERSION),
            pack_u64(stats.doc_count),
            pack_u64(len(terms)),
            pack_u64(stats.postings_count),
            *dictionary,
            pack_u64(offset),
            *blobs,
            *(pack_string(doc_id) for doc_id in self._doc_ids),
        ]
        size = write_file(path, b"".join(parts))
        logger.info("Saved index to %s (%d bytes)", path, size)
        return size

    @classmethod
    def load(cls, path: str) -> "InvertedIndex":
        reader = BinaryReader.from_file(path)
        reader.expect_header(INDEX_MAGIC, INDEX_VERSION)
        n_docs = reader.read_u64()
        n_terms = reader.read_u64()
        postings_count = reader.read_u64()

        dictionary = []
        for _ in range(n_terms):
            term = reader.read_string()
            df = reader.read_u32()
            dictionary.append((term, df, reader.read_u64(), reader.read_u64()))
        region = reader.read_bytes(reader.read_u64())

        index = cls()
        total = 0
        for term, df, offset, length in dictionary:
            if offset + length > len(region):
                raise DataFormatError(f"{path}: posting list of {term!r} runs past the postings region")
            values = varint_decode(region[offset:offset + length], source=path)
            ordinals, weights = deinterleave(values, source=path)
            if len(ordinals) != df:
                raise DataFormatError(f"{path}: df mismatch for {term!r} ({len(ordinals)} != {df})")
            if any(o >= n_docs for o in ordinals) or any(w < 1 for w in weights):
                raise DataFormatError(f"{path}: invalid posting in {term!r}")
            index._postings[term] = PostingList(
                term=term,
                ordinals=np.asarray(ordinals, dtype=np.int64),
                weights=np.asarray(weights, dtype=np.int64),
            )
            total += df
        if total != postings_count:
            raise DataFormatError(f"{path}: postings count {total} != header {postings_count}")

        for ordinal in range(n_docs):
            doc_id = reader.read_string()
            index._doc_ids.append(doc_id)
            index._ordinal_of[doc_id] = ordinal
        reader.expect_end()
        index._stats = index._compute_stats()
        return index


def build_index(docs: List[SurrogateDocument]) -> InvertedIndex:
    index = InvertedIndex()
    for doc in docs:
        index.add_document(doc)
    index.seal()
    return index
