"""
VLAD encoding: k-means codebook training, nearest-codeword assignment,
residual aggregation and power + L2 normalization.
Also reads/writes the descriptor (PDSC) and codebook (PCBK) files.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans
from threadpoolctl import threadpool_limits

from config import (
    CODEBOOK_MAGIC,
    CODEBOOK_VERSION,
    DESCRIPTOR_MAGIC,
    DESCRIPTOR_VERSION,
    KMEANS_MAX_ITER,
)
from utils import (
    BinaryReader,
    DimensionMismatchError,
    InsufficientDataError,
    pack_f32,
    pack_string,
    pack_u32,
    pack_u64,
    write_file,
)

logger = logging.getLogger(__name__)


def as_float32_exact(values) -> np.ndarray:
    """float64 array holding float32-representable values, so artifacts persist losslessly."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)


@dataclass
class LocalDescriptorSet:
    """Local descriptors (n x d) extracted from one image. n may be 0."""
    image_id: str
    descriptors: np.ndarray

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2 or self.descriptors.shape[1] == 0:
            raise DimensionMismatchError(
                f"{self.image_id}: descriptors must be an (n, d) array with d > 0, got shape {self.descriptors.shape}"
            )

    @property
    def d(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self) -> int:
        return self.descriptors.shape[0]


@dataclass
class Codebook:
    centroids: np.ndarray
    n_iter: int = 0

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


@dataclass
class VladVector:
    """K residual blocks of dimension d. zero_flags[i] marks blocks that are exactly zero."""
    blocks: np.ndarray
    zero_flags: np.ndarray
    image_id: str = ""
    normalized: bool = False

    @property
    def K(self) -> int:
        return self.blocks.shape[0]

    @property
    def d(self) -> int:
        return self.blocks.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.blocks.reshape(-1)

    @property
    def degenerate(self) -> bool:
        return not np.any(self.blocks)

    @property
    def nonzero_blocks(self) -> List[int]:
        return [j for j in range(self.K) if not self.zero_flags[j] and self.blocks[j].any()]


# ==========================================
# Codebook
# ==========================================

def train_codebook(training, K: int, seed: int) -> Codebook:
    """
    k-means++ seeding followed by Lloyd iterations (at most KMEANS_MAX_ITER,
    stopping early once no assignment changes). Single-threaded so that the
    same (training, K, seed) always yields the same centroids.
    """
    # centroids are stored as float32, so distinctness is judged at that precision
    X = as_float32_exact(training)
    if X.ndim != 2 or X.shape[1] == 0:
        raise DimensionMismatchError(f"training set must be an (n, d) array, got shape {X.shape}")
    if K < 1:
        raise InsufficientDataError(f"K must be positive, got {K}")

    n_distinct = len(np.unique(X, axis=0)) if len(X) else 0
    if n_distinct < K:
        raise InsufficientDataError(
            f"insufficient distinct points: {n_distinct} distinct training vectors for K={K}"
        )

    logger.info("Training codebook: %d vectors, d=%d, K=%d, seed=%d", len(X), X.shape[1], K, seed)
    with threadpool_limits(limits=1):
        km = KMeans(
            n_clusters=K,
            init="k-means++",
            n_init=1,
            max_iter=KMEANS_MAX_ITER,
            tol=0.0,
            algorithm="lloyd",
            random_state=seed,
        ).fit(X)
    logger.debug("k-means finished after %d iterations", km.n_iter_)
    centroids = as_float32_exact(km.cluster_centers_)
    n_centroids = len(np.unique(centroids, axis=0))
    if n_centroids < K:
        raise InsufficientDataError(
            f"insufficient distinct points: k-means left {n_centroids} distinct centroids for K={K}"
        )
    return Codebook(centroids=centroids, n_iter=int(km.n_iter_))


def _check_dim(X: np.ndarray, codebook: Codebook) -> None:
    if X.shape[-1] != codebook.d:
        raise DimensionMismatchError(f"descriptor dimension {X.shape[-1]} != codebook dimension {codebook.d}")


def assign_batch(X: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest codeword for each row; argmin keeps the smallest index on ties."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_dim(X, codebook)
    if len(X) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(cdist(X, codebook.centroids), axis=1)


def assign_nn(x, codebook: Codebook) -> int:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatchError(f"expected a single vector, got shape {x.shape}")
    return int(assign_batch(x[None, :], codebook)[0])


# ==========================================
# Aggregation and normalization
# ==========================================

def aggregate(image: LocalDescriptorSet, codebook: Codebook) -> VladVector:
    """Unnormalized VLAD: per-codeword sum of residuals, in descriptor order."""
    _check_dim(image.descriptors, codebook)
    blocks = np.zeros((codebook.K, codebook.d), dtype=np.float64)
    labels = assign_batch(image.descriptors, codebook)
    if len(labels):
        residuals = image.descriptors - codebook.centroids[labels]
        # unbuffered, accumulates in descriptor order
        np.add.at(blocks, labels, residuals)
    counts = np.bincount(labels, minlength=codebook.K)
    # residuals that cancel out leave a zero block, the same as no assignment
    zero_flags = (counts == 0) | ~blocks.any(axis=1)
    return VladVector(blocks=blocks, zero_flags=zero_flags, image_id=image.image_id)


def normalize(v: VladVector) -> VladVector:
    """Signed square root of every component, then global L2. All-zero input is returned unchanged."""
    blocks = np.sign(v.blocks) * np.sqrt(np.abs(v.blocks))
    norm = np.linalg.norm(blocks)
    if norm == 0.0:
        logger.debug("%s: degenerate all-zero VLAD", v.image_id)
        return VladVector(blocks=np.zeros_like(v.blocks), zero_flags=v.zero_flags.copy(),
                          image_id=v.image_id, normalized=True)
    blocks = blocks / norm
    return VladVector(blocks=blocks, zero_flags=v.zero_flags.copy(), image_id=v.image_id, normalized=True)


def inner_product(a: VladVector, b: VladVector) -> float:
    if a.blocks.shape != b.blocks.shape:
        raise DimensionMismatchError(f"shape mismatch: {a.blocks.shape} vs {b.blocks.shape}")
    return float(np.dot(a.flat, b.flat))


def encode_image(image: LocalDescriptorSet, codebook: Codebook) -> VladVector:
    return normalize(aggregate(image, codebook))


def encode_images(images: Sequence[LocalDescriptorSet], codebook: Codebook, n_jobs: int = 1) -> List[VladVector]:
    """Normalized VLADs for many images, in input order."""
    if n_jobs == 1:
        return [encode_image(img, codebook) for img in images]
    return Parallel(n_jobs=n_jobs, prefer="threads")(delayed(encode_image)(img, codebook) for img in images)


# ==========================================
# Files
# ==========================================

def write_descriptor_file(path: str, images: Sequence[LocalDescriptorSet], d: int = None) -> int:
    if d is None:
        if not images:
            raise DimensionMismatchError("cannot infer descriptor dimension from an empty image list")
        d = images[0].d
    parts = [DESCRIPTOR_MAGIC, pack_u32(DESCRIPTOR_VERSION), pack_u32(d), pack_u64(len(images))]
    for img in images:
        if img.d != d:
            raise DimensionMismatchError(f"{img.image_id}: dimension {img.d} != {d}")
        parts.append(pack_string(img.image_id))
        parts.append(pack_u32(len(img)))
        parts.append(pack_f32(img.descriptors))
    return write_file(path, b"".join(parts))


def read_descriptor_file(path: str) -> List[LocalDescriptorSet]:
    reader = BinaryReader.from_file(path)
    reader.expect_header(DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION)
    d = reader.read_u32()
    count = reader.read_u64()
    images = []
    for _ in range(count):
        image_id = reader.read_string()
        n = reader.read_u32()
        images.append(LocalDescriptorSet(image_id=image_id, descriptors=reader.read_f32(n * d).reshape(n, d)))
    reader.expect_end()
    logger.debug("Read %d images (d=%d) from %s", len(images), d, path)
    return images


def write_codebook_file(path: str, codebook: Codebook) -> int:
    payload = b"".join([
        CODEBOOK_MAGIC,
        pack_u32(CODEBOOK_VERSION),
        pack_u32(codebook.K),
        pack_u32(codebook.d),
        pack_f32(codebook.centroids),
    ])
    return write_file(path, payload)


def read_codebook_file(path: str) -> Codebook:
    reader = BinaryReader.from_file(path)
    reader.expect_header(CODEBOOK_MAGIC, CODEBOOK_VERSION)
    K = reader.read_u32()
    d = reader.read_u32()
    centroids = reader.read_f32(K * d).reshape(K, d)
    reader.expect_end()
    return Codebook(centroids=centroids)
