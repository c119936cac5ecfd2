"""
Evaluation: ground truth, exact oracles (inner-product scan and exhaustive
permutation-distance scan), AP / mAP / recall@k, synthetic clustered data and
the per-configuration report.
"""

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from config import REF_WHOLE
from inverted_index import InvertedIndex
from permutation_codec import (
    ReferenceSet,
    TruncatedPermutation,
    block_permutations,
    spearman_rho_loc,
    whole_permutation,
)
from search_pipeline import PipelineConfig, VladStore, search
from utils import ConfigError, DataFormatError, MissingResultError
from vlad_encoder import LocalDescriptorSet, VladVector

logger = logging.getLogger(__name__)


# ==========================================
# Ground truth
# ==========================================

@dataclass
class GroundTruth:
    relevant: Dict[str, FrozenSet[str]] = field(default_factory=dict)

    def __post_init__(self):
        for qid, rel in self.relevant.items():
            if not rel:
                raise ConfigError(f"query {qid!r} has an empty relevant set")
        self.relevant = {qid: frozenset(rel) for qid, rel in self.relevant.items()}

    @property
    def queries(self) -> List[str]:
        return sorted(self.relevant)

    def __len__(self) -> int:
        return len(self.relevant)

    def write(self, path: str) -> None:
        """One line per query: query_id TAB comma-separated relevant ids."""
        with open(path, "w") as f:
            for qid in self.queries:
                f.write(f"{qid}\t{','.join(sorted(self.relevant[qid]))}\n")

    @classmethod
    def read(cls, path: str) -> "GroundTruth":
        relevant = {}
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                qid, sep, ids = line.partition("\t")
                if not sep:
                    raise DataFormatError(f"{path}:{lineno}: expected query_id TAB relevant ids")
                rel = frozenset(i for i in ids.split(",") if i)
                if not rel:
                    raise DataFormatError(f"{path}:{lineno}: query {qid!r} has an empty relevant set")
                relevant[qid] = rel
        return cls(relevant)


# ==========================================
# Metrics
# ==========================================

def average_precision(ranked: Sequence[str], relevant) -> float:
    """Non-interpolated AP; relevant docs that are never retrieved count as zero."""
    relevant = set(relevant)
    if not relevant:
        raise ConfigError("average precision needs a nonempty relevant set")
    hits = 0
    total = 0.0
    for r, doc_id in enumerate(ranked, 1):
        if doc_id in relevant:
            hits += 1
            total += hits / r
    return total / len(relevant)


def mean_ap(results: Mapping[str, Sequence[str]], gt: GroundTruth) -> float:
    missing = [qid for qid in gt.queries if qid not in results]
    if missing:
        raise MissingResultError(f"no result list for queries: {', '.join(missing)}")
    if not len(gt):
        raise ConfigError("mean AP over an empty ground truth")
    return float(np.mean([average_precision(results[qid], gt.relevant[qid]) for qid in gt.queries]))


def recall_at(approx: Sequence[str], exact: Sequence[str], k: int) -> float:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    return len(set(approx[:k]) & set(exact[:k])) / k


# ==========================================
# Exact oracles
# ==========================================

def exact_scan(query: VladVector, store: VladStore, k: int) -> List[str]:
    """Sequential inner-product scan; descending score, ascending ordinal on ties."""
    scores = store.similarities(query, range(len(store)))
    ranked = sorted(zip((-scores).tolist(), range(len(store))))[:k]
    return [store.doc_id_at(o) for _, o in ranked]


@dataclass
class PermutationCorpus:
    """Truncated permutations of every indexable corpus vector, one per block (one in whole mode)."""
    doc_ids: List[str]
    perms: List[List[TruncatedPermutation]]
    refs: ReferenceSet
    k_x: int

    @classmethod
    def build(cls, vectors: Sequence[VladVector], refs: ReferenceSet, k_x: int) -> "PermutationCorpus":
        doc_ids, perms = [], []
        for v in vectors:
            if v.degenerate:
                continue
            doc_ids.append(v.image_id)
            perms.append(_permutations(v, refs, k_x))
        return cls(doc_ids=doc_ids, perms=perms, refs=refs, k_x=k_x)


def _permutations(v: VladVector, refs: ReferenceSet, k: int) -> List[TruncatedPermutation]:
    if refs.mode == REF_WHOLE:
        return [whole_permutation(v, refs, k)]
    return block_permutations(v, refs, k)


def permutation_distances(query: VladVector, corpus: PermutationCorpus, k_q: int) -> List[int]:
    qperms = _permutations(query, corpus.refs, k_q)
    return [sum(spearman_rho_loc(o, q) for o, q in zip(operms, qperms)) for operms in corpus.perms]


def permutation_scan(query: VladVector, corpus: PermutationCorpus, k_q: int, k: int) -> List[str]:
    """Exhaustive ascending squared Spearman Rho (blockwise sum in BSTR mode), ascending ordinal on ties."""
    distances = permutation_distances(query, corpus, k_q)
    ranked = sorted(zip(distances, range(len(distances))))[:k]
    return [corpus.doc_ids[o] for _, o in ranked]


# ==========================================
# Synthetic data
# ==========================================

def synth_dataset(
    n_images: int,
    clusters: int,
    d: int,
    K: int,
    noise: float,
    seed: int,
    descriptors_per_image: int = 32,
) -> Tuple[List[LocalDescriptorSet], GroundTruth]:
    """
    Clustered images: each cluster has a base descriptor set drawn around K
    latent visual words; its images are noisy copies. Image i belongs to
    cluster i % clusters; the first image of every cluster is its query and
    the other members are relevant.
    """
    if min(n_images, clusters, d, K, descriptors_per_image) < 1 or noise < 0:
        raise ConfigError("synthetic dataset parameters must be positive (noise >= 0)")
    rng = np.random.default_rng(seed)
    words = rng.normal(scale=4.0, size=(K, d))
    bases = [
        words[rng.integers(K, size=descriptors_per_image)] + rng.normal(size=(descriptors_per_image, d))
        for _ in range(clusters)
    ]
    images = []
    members: Dict[int, List[str]] = {}
    for i in range(n_images):
        c = i % clusters
        descriptors = bases[c] + noise * rng.normal(size=bases[c].shape)
        image_id = f"img{i:06d}"
        images.append(LocalDescriptorSet(image_id=image_id, descriptors=descriptors))
        members.setdefault(c, []).append(image_id)
    relevant = {ids[0]: frozenset(ids[1:]) for ids in members.values() if len(ids) > 1}
    return images, GroundTruth(relevant)


# ==========================================
# Report
# ==========================================

@dataclass
class EvalReport:
    config: Dict[str, object]
    n_queries: int
    mAP: float
    recall: Dict[int, float] = field(default_factory=dict)
    exact_mAP: Optional[float] = None
    latency_mean: Optional[float] = None
    latency_p95: Optional[float] = None
    postings_count: int = 0
    index_bytes: int = 0
    store_bytes: int = 0

    def to_row(self) -> Dict[str, object]:
        row = dict(self.config)
        row.update({"n_queries": self.n_queries, "mAP": round(self.mAP, 6)})
        for k in sorted(self.recall):
            row[f"recall@{k}"] = round(self.recall[k], 6)
        if self.exact_mAP is not None:
            row["exact_mAP"] = round(self.exact_mAP, 6)
        if self.latency_mean is not None:
            row["latency_mean_s"] = round(self.latency_mean, 6)
            row["latency_p95_s"] = round(self.latency_p95, 6)
        row.update({
            "postings_count": self.postings_count,
            "index_bytes": self.index_bytes,
            "store_bytes": self.store_bytes,
            "space_bytes": self.index_bytes + self.store_bytes,
        })
        return row

    def to_text(self) -> str:
        """key=value lines, in a fixed order."""
        return "".join(f"{key}={value}\n" for key, value in self.to_row().items())


def write_report(report: EvalReport, path: str) -> None:
    with open(path, "w") as f:
        f.write(report.to_text())


def write_sweep_csv(reports: Sequence[EvalReport], path: str) -> pd.DataFrame:
    df = pd.DataFrame([r.to_row() for r in reports])
    df.to_csv(path, index=False)
    return df


# ==========================================
# Running a configuration
# ==========================================

def run_queries(
    queries: Mapping[str, VladVector],
    index: InvertedIndex,
    refs: ReferenceSet,
    config: PipelineConfig,
    store: Optional[VladStore] = None,
    exclude_self: bool = True,
    measure_latency: bool = False,
    n_jobs: int = 1,
) -> Tuple[Dict[str, List[str]], List[float]]:
    """Ranked doc ids per query (query itself dropped when exclude_self) and per-query latencies."""
    if exclude_self:
        config = replace(config, k=config.k + 1, c=max(config.c, config.k + 1))

    def _one(qid):
        result = search(queries[qid], index, refs, config, store)
        ranked = [doc_id for doc_id in result.doc_ids if not (exclude_self and doc_id == qid)]
        return ranked[:config.k - 1] if exclude_self else ranked, result.latency

    qids = sorted(queries)
    if measure_latency or n_jobs == 1:
        outcomes = [_one(qid) for qid in qids]
    else:
        outcomes = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(_one)(qid) for qid in qids)
    results = {qid: ranked for qid, (ranked, _) in zip(qids, outcomes)}
    return results, [latency for _, latency in outcomes]


def exact_results(queries: Mapping[str, VladVector], store: VladStore, k: int, exclude_self: bool = True) -> Dict[str, List[str]]:
    results = {}
    for qid in sorted(queries):
        ranked = exact_scan(queries[qid], store, k + 1 if exclude_self else k)
        results[qid] = [doc_id for doc_id in ranked if not (exclude_self and doc_id == qid)][:k]
    return results


def evaluate(
    queries: Mapping[str, VladVector],
    gt: GroundTruth,
    index: InvertedIndex,
    refs: ReferenceSet,
    config: PipelineConfig,
    store: Optional[VladStore] = None,
    recall_ks: Sequence[int] = (1, 10),
    exclude_self: bool = True,
    measure_latency: bool = False,
    index_bytes: int = 0,
    store_bytes: int = 0,
    n_jobs: int = 1,
) -> EvalReport:
    """Run every ground-truth query through one pipeline configuration."""
    missing = [qid for qid in gt.queries if qid not in queries]
    if missing:
        raise MissingResultError(f"ground-truth queries without a query vector: {', '.join(missing)}")
    queries = {qid: queries[qid] for qid in gt.queries}

    logger.info("Evaluating %s over %d queries", config.mode, len(queries))
    results, latencies = run_queries(queries, index, refs, config, store, exclude_self, measure_latency, n_jobs)

    report = EvalReport(
        config=config_echo(config),
        n_queries=len(queries),
        mAP=mean_ap(results, gt),
        postings_count=index.stats.postings_count,
        index_bytes=index_bytes,
        store_bytes=store_bytes,
    )
    if store is not None:
        exact = exact_results(queries, store, max(config.k, max(recall_ks)), exclude_self)
        report.exact_mAP = mean_ap(exact, gt)
        report.recall = {
            k: float(np.mean([recall_at(results[qid], exact[qid], k) for qid in gt.queries]))
            for k in recall_ks
        }
    if measure_latency:
        report.latency_mean = float(np.mean(latencies))
        report.latency_p95 = float(np.percentile(latencies, 95))
    return report


def config_echo(config: PipelineConfig) -> Dict[str, object]:
    return {
        "mode": config.mode,
        "k_x": config.k_x,
        "k_q": config.k_q,
        "c": config.c,
        "k": config.k,
        "prune_query": config.prune_query if config.prune_query is not None else "",
        "prune_docs": config.prune_docs if config.prune_docs is not None else "",
    }


def artifact_size(path: Optional[str]) -> int:
    return os.path.getsize(path) if path and os.path.exists(path) else 0

