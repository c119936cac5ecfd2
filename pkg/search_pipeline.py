"""
End-to-end k-NN search: STR, rSTR (STR + reordering of the top-c candidates
with the original inner product), BSTR and BSTR tfidf. BSTR tfidf^2 is
BSTR tfidf run against an index built with document pruning.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from config import (
    DEFAULT_K_Q,
    DEFAULT_K_X,
    DEFAULT_RERANK_C,
    DEFAULT_TOP_K,
    MODE_BSTR_TFIDF,
    MODE_RSTR,
    MODE_STR,
    PIPELINE_MODES,
    REF_BLOCKWISE,
    REF_WHOLE,
    STORE_MAGIC,
    STORE_VERSION,
)
from inverted_index import InvertedIndex, ScoredHit
from permutation_codec import ReferenceSet, encode
from pruning import PRUNE_QUERY, PruneSpec
from utils import (
    BinaryReader,
    ConfigError,
    DimensionMismatchError,
    IndexStateError,
    MissingVectorError,
    pack_f32,
    pack_string,
    pack_u32,
    pack_u64,
    write_file,
)
from vlad_encoder import VladVector, as_float32_exact

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = MODE_STR
    k_x: int = DEFAULT_K_X
    k_q: int = DEFAULT_K_Q
    c: int = DEFAULT_RERANK_C
    k: int = DEFAULT_TOP_K
    prune_query: Optional[int] = None
    prune_docs: Optional[int] = None

    @property
    def ref_mode(self) -> str:
        return REF_WHOLE if self.mode in (MODE_STR, MODE_RSTR) else REF_BLOCKWISE

    @property
    def query_pruning(self) -> Optional[PruneSpec]:
        if self.prune_query is None:
            return None
        return PruneSpec(target=PRUNE_QUERY, keep=self.prune_query, source_k=self.k_q)

    def validate(self, m: Optional[int] = None) -> "PipelineConfig":
        if self.mode not in PIPELINE_MODES:
            raise ConfigError(f"mode must be one of {PIPELINE_MODES}, got {self.mode!r}")
        for name in ("k_x", "k_q", "k", "c"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if m is not None and (self.k_x > m or self.k_q > m):
            raise ConfigError(f"k_x={self.k_x} and k_q={self.k_q} must not exceed m={m}")
        if self.mode == MODE_RSTR and self.c < self.k:
            raise ConfigError(f"rSTR needs c >= k (c={self.c}, k={self.k})")
        if self.mode == MODE_BSTR_TFIDF and self.prune_query is None:
            raise ConfigError("BSTR_tfidf needs a query prune level (--prune-query)")
        if self.prune_query is not None and self.mode != MODE_BSTR_TFIDF:
            raise ConfigError("--prune-query only applies to BSTR_tfidf")
        if self.prune_docs is not None and self.ref_mode != REF_BLOCKWISE:
            raise ConfigError("--prune-docs only applies to the blockwise modes")
        for name in ("prune_query", "prune_docs"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        return self


@dataclass(frozen=True)
class RerankedHit:
    doc_id: str
    score: float
    ordinal: int


@dataclass
class SearchResult:
    hits: List[Union[ScoredHit, RerankedHit]] = field(default_factory=list)
    latency: float = 0.0
    candidates_scanned: int = 0

    @property
    def doc_ids(self) -> List[str]:
        return [h.doc_id for h in self.hits]


# ==========================================
# Original-vector store
# ==========================================

class VladStore:
    """Normalized VLADs by doc_id, kept in insertion order (ordinal = position)."""

    def __init__(self, K: int, d: int):
        self.K = K
        self.d = d
        self._ids: List[str] = []
        self._ordinal_of: Dict[str, int] = {}
        self._rows: List[np.ndarray] = []
        self._matrix = None

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._ordinal_of

    @property
    def doc_ids(self) -> List[str]:
        return list(self._ids)

    def doc_id_at(self, ordinal: int) -> str:
        return self._ids[ordinal]

    def ordinal(self, doc_id: str) -> int:
        try:
            return self._ordinal_of[doc_id]
        except KeyError:
            raise MissingVectorError(f"no stored vector for {doc_id!r}") from None

    def add(self, v: VladVector, doc_id: Optional[str] = None) -> int:
        doc_id = v.image_id if doc_id is None else doc_id
        if v.blocks.shape != (self.K, self.d):
            raise DimensionMismatchError(f"{doc_id}: shape {v.blocks.shape} != ({self.K}, {self.d})")
        if doc_id in self._ordinal_of:
            raise IndexStateError(f"duplicate doc_id {doc_id!r} in store")
        self._ordinal_of[doc_id] = len(self._ids)
        self._ids.append(doc_id)
        self._rows.append(as_float32_exact(v.flat))
        self._matrix = None
        return self._ordinal_of[doc_id]

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.vstack(self._rows) if self._rows else np.zeros((0, self.K * self.d))
        return self._matrix

    def get(self, doc_id: str) -> VladVector:
        blocks = self.matrix[self.ordinal(doc_id)].reshape(self.K, self.d).copy()
        return VladVector(blocks=blocks, zero_flags=~blocks.any(axis=1), image_id=doc_id, normalized=True)

    def similarities(self, query: VladVector, ordinals: Sequence[int]) -> np.ndarray:
        """Inner products, one row at a time so a row's score never depends on which rows are asked for."""
        if query.blocks.shape != (self.K, self.d):
            raise DimensionMismatchError(f"query shape {query.blocks.shape} != ({self.K}, {self.d})")
        q = np.ascontiguousarray(query.flat, dtype=np.float64)
        matrix = self.matrix
        return np.fromiter((np.dot(matrix[o], q) for o in ordinals), dtype=np.float64, count=len(ordinals))

    def save(self, path: str) -> int:
        parts = [STORE_MAGIC, pack_u32(STORE_VERSION), pack_u32(self.K), pack_u32(self.d), pack_u64(len(self))]
        for doc_id, row in zip(self._ids, self._rows):
            parts.append(pack_string(doc_id))
            parts.append(pack_f32(row))
        return write_file(path, b"".join(parts))

    @classmethod
    def load(cls, path: str) -> "VladStore":
        reader = BinaryReader.from_file(path)
        reader.expect_header(STORE_MAGIC, STORE_VERSION)
        K = reader.read_u32()
        d = reader.read_u32()
        count = reader.read_u64()
        store = cls(K, d)
        for _ in range(count):
            doc_id = reader.read_string()
            blocks = reader.read_f32(K * d).reshape(K, d)
            store.add(VladVector(blocks=blocks, zero_flags=~blocks.any(axis=1), image_id=doc_id, normalized=True))
        reader.expect_end()
        return store


def build_store(vectors: Sequence[VladVector]) -> VladStore:
    if not vectors:
        raise ConfigError("cannot build a store from no vectors")
    store = VladStore(vectors[0].K, vectors[0].d)
    for v in vectors:
        store.add(v)
    return store


# ==========================================
# Search
# ==========================================

def rerank(candidates: Sequence[str], query: VladVector, store: VladStore, k: int) -> List[RerankedHit]:
    """Reorder candidates by descending inner product with the query; ties by ascending ordinal."""
    ordinals = [store.ordinal(doc_id) for doc_id in candidates]
    scores = store.similarities(query, ordinals)
    ranked = sorted(zip((-scores).tolist(), ordinals))[:k]
    return [RerankedHit(doc_id=store.doc_id_at(o), score=-neg, ordinal=o) for neg, o in ranked]


def search(
    query: VladVector,
    index: InvertedIndex,
    refs: ReferenceSet,
    config: PipelineConfig,
    store: Optional[VladStore] = None,
) -> SearchResult:
    config.validate(refs.m)
    if refs.mode != config.ref_mode:
        raise ConfigError(f"{config.mode} needs a {config.ref_mode} reference set, got {refs.mode}")
    if config.mode == MODE_RSTR and store is None:
        raise ConfigError("rSTR needs a VladStore for reordering")

    start = time.perf_counter()
    qdoc = encode(query, refs, config.k_q)
    pruning = config.query_pruning
    if pruning is not None:
        qdoc = pruning.prune(qdoc, index.stats)

    if config.mode == MODE_RSTR:
        candidates = index.score_query(qdoc, max(config.k, config.c))
        hits = rerank([h.doc_id for h in candidates], query, store, config.k)
    else:
        candidates = index.score_query(qdoc, config.k)
        hits = candidates
    latency = time.perf_counter() - start
    logger.debug("%s: %d candidates, %.4fs", query.image_id, len(candidates), latency)
    return SearchResult(hits=hits, latency=latency, candidates_scanned=len(candidates))
