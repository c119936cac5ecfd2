import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import REF_BLOCKWISE, REF_WHOLE
from permutation_codec import ReferenceSet
from vlad_encoder import VladVector, as_float32_exact


def make_vlad(blocks, image_id="", normalized=True) -> VladVector:
    blocks = as_float32_exact(blocks)
    return VladVector(blocks=blocks, zero_flags=~blocks.any(axis=1), image_id=image_id, normalized=normalized)


def random_vlads(rng, n, K, d, prefix="doc", zero_blocks=0):
    """n random unit VLADs; every vector gets exactly `zero_blocks` zeroed blocks at random positions."""
    vectors = []
    for i in range(n):
        blocks = rng.normal(size=(K, d))
        if zero_blocks:
            blocks[rng.choice(K, size=zero_blocks, replace=False)] = 0.0
        blocks /= np.linalg.norm(blocks)
        vectors.append(make_vlad(blocks, image_id=f"{prefix}{i:04d}"))
    return vectors


@pytest.fixture
def rng():
    return np.random.default_rng(42)


# Two objects and a query seeing five references A..E (indices 0..4) in the
# orders o1: E B A, o2: D C E, q: E A.
TOY_NAMES = {"r0": "A", "r1": "B", "r2": "C", "r3": "D", "r4": "E"}


@pytest.fixture
def two_objects():
    refs = ReferenceSet(
        refs=np.array([[2.0, 0.0], [3.0, 1.5], [8.0, 0.0], [9.0, 1.0], [4.0, 0.0]]),
        mode=REF_WHOLE,
    )
    o1 = make_vlad(np.array([[3.6, 0.3]]), image_id="o1", normalized=False)
    o2 = make_vlad(np.array([[8.6, 0.6]]), image_id="o2", normalized=False)
    q = make_vlad(np.array([[3.4, -0.3]]), image_id="q", normalized=False)
    return refs, [o1, o2], q


@pytest.fixture
def blockwise_refs(rng):
    return ReferenceSet(refs=as_float32_exact(rng.normal(size=(40, 4))), mode=REF_BLOCKWISE, seed=0)
