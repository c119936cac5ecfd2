"""
Permutation encoding of VLAD vectors.

Objects are represented by the order in which they see a fixed set of
reference objects. Truncating that order at depth k and turning ranks into
integer weights (k+1-rank) gives a surrogate document whose term-frequency
dot product ranks objects exactly as the location-parameter Spearman Rho
distance does. Blockwise mode applies the same encoding to every VLAD block
against one shared reference set, with keys r<i>_b<j>.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.spatial.distance import cdist

from config import REF_BLOCKWISE, REF_WHOLE, REFERENCE_MAGIC, REFERENCE_VERSION
from utils import (
    BinaryReader,
    ConfigError,
    DataFormatError,
    DimensionMismatchError,
    InsufficientDataError,
    UnindexableObjectError,
    pack_f32,
    pack_u8,
    pack_u32,
    pack_u64,
    write_file,
)
from vlad_encoder import VladVector, as_float32_exact

logger = logging.getLogger(__name__)

_MODE_CODES = {REF_WHOLE: 0, REF_BLOCKWISE: 1}
_BATCH_ROWS = 1024


@dataclass(frozen=True)
class ReferenceSet:
    refs: np.ndarray
    mode: str
    seed: int = 0

    @property
    def m(self) -> int:
        return self.refs.shape[0]

    @property
    def dim(self) -> int:
        return self.refs.shape[1]


@dataclass(frozen=True)
class PermutationVector:
    """Dense ranks 1..m, ranks[i] is the position of reference i."""
    ranks: np.ndarray


@dataclass(frozen=True)
class TruncatedPermutation:
    """Ranks <= k only; every absent reference implicitly holds rank k+1."""
    entries: Dict[int, int]
    k: int
    m: int

    def rank(self, i: int) -> int:
        return self.entries.get(i, self.k + 1)

    def dense(self) -> np.ndarray:
        ranks = np.full(self.m, self.k + 1, dtype=np.int64)
        for i, r in self.entries.items():
            ranks[i] = r
        return ranks


@dataclass
class SurrogateDocument:
    doc_id: str
    terms: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.terms)

    def to_text(self) -> str:
        """doc_id TAB space-separated term:weight pairs sorted by term."""
        pairs = " ".join(f"{t}:{w}" for t, w in sorted(self.terms.items()))
        return f"{self.doc_id}\t{pairs}"

    def to_surrogate_text(self, names: Optional[Dict[str, str]] = None) -> str:
        """Literal text a term-frequency engine would index: each key repeated weight times."""
        names = names or {}
        ordered = sorted(self.terms.items(), key=lambda tw: (-tw[1], tw[0]))
        return " ".join(" ".join([names.get(t, t)] * w) for t, w in ordered)


def ref_key(i: int, block: Optional[int] = None) -> str:
    return f"r{i}" if block is None else f"r{i}_b{block}"


# ==========================================
# Reference selection
# ==========================================

def _candidates(dataset: Sequence[VladVector], mode: str) -> np.ndarray:
    if mode == REF_WHOLE:
        rows = [v.flat for v in dataset if not v.degenerate]
    elif mode == REF_BLOCKWISE:
        rows = [v.blocks[j] for v in dataset for j in v.nonzero_blocks]
    else:
        raise ConfigError(f"unknown reference mode {mode!r}")
    if not rows:
        return np.zeros((0, 0))
    return as_float32_exact(np.vstack(rows))


def select_references(dataset: Sequence[VladVector], m: int, mode: str, seed: int) -> ReferenceSet:
    """m distinct objects sampled uniformly without replacement (whole vectors or nonzero blocks)."""
    if m < 1:
        raise ConfigError(f"m must be positive, got {m}")
    cands = _candidates(dataset, mode)
    if len(cands) == 0:
        raise InsufficientDataError(f"no {mode} candidates to sample references from")
    _, first = np.unique(cands, axis=0, return_index=True)
    first.sort()
    if len(first) < m:
        raise InsufficientDataError(f"insufficient distinct candidates: {len(first)} distinct {mode} objects for m={m}")
    rng = np.random.default_rng(seed)
    picked = first[rng.choice(len(first), size=m, replace=False)]
    logger.info("Selected %d %s references out of %d distinct candidates", m, mode, len(first))
    return ReferenceSet(refs=cands[picked], mode=mode, seed=seed)


# ==========================================
# Permutations
# ==========================================

def _check_object_dim(dim: int, refs: ReferenceSet) -> None:
    if dim != refs.dim:
        raise DimensionMismatchError(f"object dimension {dim} != reference dimension {refs.dim} ({refs.mode} mode)")


def compute_permutation(o, refs: ReferenceSet) -> PermutationVector:
    """Ranks by ascending Euclidean distance; equal distances go to the lower reference index."""
    o = np.asarray(o, dtype=np.float64)
    _check_object_dim(o.shape[-1], refs)
    dist = cdist(o.reshape(1, -1), refs.refs)[0]
    order = np.argsort(dist, kind="stable")
    ranks = np.empty(refs.m, dtype=np.int64)
    ranks[order] = np.arange(1, refs.m + 1)
    return PermutationVector(ranks=ranks)


def nearest_references(objects: np.ndarray, refs: ReferenceSet, k: int) -> np.ndarray:
    """(n, k) reference indices in rank order; same ordering rule as compute_permutation."""
    objects = np.atleast_2d(np.asarray(objects, dtype=np.float64))
    _check_object_dim(objects.shape[1], refs)
    _check_depth(k, refs.m)
    out = np.empty((len(objects), k), dtype=np.int64)
    for start in range(0, len(objects), _BATCH_ROWS):
        dist = cdist(objects[start:start + _BATCH_ROWS], refs.refs)
        out[start:start + _BATCH_ROWS] = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return out


def _check_depth(k: int, m: int) -> None:
    if not 1 <= k <= m:
        raise ConfigError(f"truncation depth k={k} outside 1..{m}")


def truncate(p: PermutationVector, k: int) -> TruncatedPermutation:
    m = len(p.ranks)
    _check_depth(k, m)
    kept = np.flatnonzero(p.ranks <= k)
    return TruncatedPermutation(entries={int(i): int(p.ranks[i]) for i in kept}, k=k, m=m)


def _from_order(order_row: np.ndarray, k: int, m: int) -> TruncatedPermutation:
    return TruncatedPermutation(entries={int(i): r + 1 for r, i in enumerate(order_row)}, k=k, m=m)


def surrogate_weights(t: TruncatedPermutation) -> Dict[int, int]:
    return {i: t.k + 1 - r for i, r in t.entries.items()}


def spearman_rho_loc(o: TruncatedPermutation, q: TruncatedPermutation) -> int:
    """Squared location-parameter Spearman Rho, computed over the union of stored entries."""
    if o.m != q.m:
        raise DimensionMismatchError(f"permutations over different reference sets: m={o.m} vs m={q.m}")
    union = set(o.entries) | set(q.entries)
    total = sum((o.rank(i) - q.rank(i)) ** 2 for i in union)
    # references absent from both hold k_x+1 and k_q+1
    total += (o.m - len(union)) * (o.k - q.k) ** 2
    return total


# ==========================================
# Surrogate documents
# ==========================================

def encode_str(v: VladVector, refs: ReferenceSet, k: int, doc_id: Optional[str] = None) -> SurrogateDocument:
    if refs.mode != REF_WHOLE:
        raise ConfigError("encode_str needs a whole-vector reference set")
    if v.degenerate:
        raise UnindexableObjectError(f"unindexable object {v.image_id!r}: all-zero VLAD")
    order = nearest_references(v.flat, refs, k)[0]
    terms = {ref_key(int(i)): k - r for r, i in enumerate(order)}
    return SurrogateDocument(doc_id=v.image_id if doc_id is None else doc_id, terms=terms)


def encode_bstr(v: VladVector, refs: ReferenceSet, k: int, doc_id: Optional[str] = None) -> SurrogateDocument:
    """Per-block encoding; zero blocks contribute no terms."""
    if refs.mode != REF_BLOCKWISE:
        raise ConfigError("encode_bstr needs a blockwise reference set")
    nonzero = v.nonzero_blocks
    if v.degenerate or not nonzero:
        raise UnindexableObjectError(f"unindexable object {v.image_id!r}: all blocks are zero")
    orders = nearest_references(v.blocks[nonzero], refs, k)
    terms = {}
    for j, order in zip(nonzero, orders):
        for r, i in enumerate(order):
            terms[ref_key(int(i), j)] = k - r
    return SurrogateDocument(doc_id=v.image_id if doc_id is None else doc_id, terms=terms)


def encode(v: VladVector, refs: ReferenceSet, k: int) -> SurrogateDocument:
    if refs.mode == REF_WHOLE:
        return encode_str(v, refs, k)
    return encode_bstr(v, refs, k)


def encode_corpus(
    vectors: Sequence[VladVector], refs: ReferenceSet, k: int, n_jobs: int = 1
) -> Tuple[List[SurrogateDocument], List[str]]:
    """Encode every vector; degenerate ones are skipped and their ids returned."""
    def _safe(v):
        try:
            return encode(v, refs, k)
        except UnindexableObjectError:
            return None

    if n_jobs == 1:
        encoded = [_safe(v) for v in vectors]
    else:
        encoded = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(_safe)(v) for v in vectors)
    docs = [doc for doc in encoded if doc is not None]
    skipped = [v.image_id for v, doc in zip(vectors, encoded) if doc is None]
    if skipped:
        logger.warning("Skipped %d unindexable (all-zero) images", len(skipped))
    return docs, skipped


def block_permutations(v: VladVector, refs: ReferenceSet, k: int) -> List[TruncatedPermutation]:
    """Truncated permutation per block; zero blocks get no entries (all ranks k+1, weights 0)."""
    if refs.mode != REF_BLOCKWISE:
        raise ConfigError("block permutations need a blockwise reference set")
    perms = [TruncatedPermutation(entries={}, k=k, m=refs.m) for _ in range(v.K)]
    nonzero = v.nonzero_blocks
    if nonzero:
        for j, order in zip(nonzero, nearest_references(v.blocks[nonzero], refs, k)):
            perms[j] = _from_order(order, k, refs.m)
    return perms


def whole_permutation(v: VladVector, refs: ReferenceSet, k: int) -> TruncatedPermutation:
    if refs.mode != REF_WHOLE:
        raise ConfigError("whole permutation needs a whole-vector reference set")
    return _from_order(nearest_references(v.flat, refs, k)[0], k, refs.m)


def blockwise_distance(V: VladVector, W: VladVector, refs: ReferenceSet, k_x: int, k_q: int) -> int:
    """Sum over blocks of the squared Spearman Rho between block permutations."""
    if V.blocks.shape != W.blocks.shape:
        raise DimensionMismatchError(f"shape mismatch: {V.blocks.shape} vs {W.blocks.shape}")
    return sum(
        spearman_rho_loc(o, q)
        for o, q in zip(block_permutations(V, refs, k_x), block_permutations(W, refs, k_q))
    )


# ==========================================
# Files
# ==========================================

def write_reference_file(path: str, refs: ReferenceSet) -> int:
    payload = b"".join([
        REFERENCE_MAGIC,
        pack_u32(REFERENCE_VERSION),
        pack_u8(_MODE_CODES[refs.mode]),
        pack_u32(refs.m),
        pack_u32(refs.dim),
        pack_u64(refs.seed),
        pack_f32(refs.refs),
    ])
    return write_file(path, payload)


def read_reference_file(path: str) -> ReferenceSet:
    reader = BinaryReader.from_file(path)
    reader.expect_header(REFERENCE_MAGIC, REFERENCE_VERSION)
    code = reader.read_u8()
    modes = {v: k for k, v in _MODE_CODES.items()}
    if code not in modes:
        raise DataFormatError(f"{path}: unknown reference mode code {code}")
    m = reader.read_u32()
    dim = reader.read_u32()
    seed = reader.read_u64()
    refs = reader.read_f32(m * dim).reshape(m, dim)
    reader.expect_end()
    return ReferenceSet(refs=refs, mode=modes[code], seed=seed)
