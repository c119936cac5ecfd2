"""Reference selection, permutations, truncation, surrogate documents and the PREF file."""

import numpy as np
import pytest

from config import REF_BLOCKWISE, REF_WHOLE
from permutation_codec import (
    PermutationVector,
    ReferenceSet,
    SurrogateDocument,
    TruncatedPermutation,
    block_permutations,
    blockwise_distance,
    compute_permutation,
    encode_bstr,
    encode_corpus,
    encode_str,
    read_reference_file,
    ref_key,
    select_references,
    spearman_rho_loc,
    surrogate_weights,
    truncate,
    write_reference_file,
)
from search_pipeline import build_store
from utils import ConfigError, InsufficientDataError, UnindexableObjectError
from vlad_encoder import Codebook, LocalDescriptorSet, encode_image

from conftest import TOY_NAMES, make_vlad, random_vlads


def dense_rho(o: TruncatedPermutation, q: TruncatedPermutation) -> int:
    return int(np.sum((o.dense() - q.dense()) ** 2))


# -----------------------------------------------------------------------
# Reference selection
# -----------------------------------------------------------------------

class TestSelectReferences:

    def test_exactly_m_candidates_returns_all(self, rng):
        vectors = random_vlads(rng, 6, 2, 3)
        refs = select_references(vectors, 6, REF_WHOLE, seed=0)
        assert sorted(map(tuple, refs.refs)) == sorted(tuple(v.flat) for v in vectors)

    def test_same_seed_same_references(self, rng):
        vectors = random_vlads(rng, 50, 2, 3)
        a = select_references(vectors, 10, REF_WHOLE, seed=5)
        b = select_references(vectors, 10, REF_WHOLE, seed=5)
        np.testing.assert_array_equal(a.refs, b.refs)

    def test_blockwise_samples_nonzero_blocks(self, rng):
        vectors = random_vlads(rng, 30, 4, 3, zero_blocks=2)
        refs = select_references(vectors, 20, REF_BLOCKWISE, seed=1)
        assert refs.refs.shape == (20, 3)
        assert refs.refs.any(axis=1).all()

    def test_duplicates_do_not_count(self, rng):
        v = random_vlads(rng, 1, 2, 2)[0]
        with pytest.raises(InsufficientDataError, match="insufficient distinct candidates"):
            select_references([v] * 5, 2, REF_WHOLE, seed=0)

    def test_unknown_mode(self, rng):
        with pytest.raises(ConfigError):
            select_references(random_vlads(rng, 3, 1, 2), 1, "sideways", seed=0)


# -----------------------------------------------------------------------
# Permutations and truncation
# -----------------------------------------------------------------------

class TestPermutation:

    def test_coincident_reference_ranks_first(self, rng):
        refs = ReferenceSet(refs=rng.normal(size=(6, 3)), mode=REF_WHOLE)
        assert compute_permutation(refs.refs[2], refs).ranks[2] == 1

    def test_equidistant_lower_index_wins(self):
        refs = ReferenceSet(refs=np.array([[5.0, 0.0], [-1.0, 0.0], [1.0, 0.0]]), mode=REF_WHOLE)
        ranks = compute_permutation(np.zeros(2), refs).ranks
        assert ranks.tolist() == [3, 1, 2]

    def test_matches_sort_oracle(self, rng):
        refs = ReferenceSet(refs=rng.normal(size=(10, 4)), mode=REF_WHOLE)
        o = rng.normal(size=4)
        order = sorted(range(10), key=lambda i: np.linalg.norm(o - refs.refs[i]))
        ranks = compute_permutation(o, refs).ranks
        assert [int(ranks[i]) for i in order] == list(range(1, 11))

    def test_truncate_identity(self):
        p = PermutationVector(ranks=np.array([2, 1, 3]))
        assert truncate(p, 3).dense().tolist() == [2, 1, 3]

    def test_truncate_depth_one(self):
        t = truncate(PermutationVector(ranks=np.array([2, 1, 3])), 1)
        assert t.entries == {1: 1}

    def test_truncate_example(self):
        t = truncate(PermutationVector(ranks=np.array([3, 2, 5, 4, 1])), 3)
        assert t.entries == {0: 3, 1: 2, 4: 1}
        assert t.rank(2) == 4 and t.rank(3) == 4

    def test_truncate_bad_depth(self):
        with pytest.raises(ConfigError):
            truncate(PermutationVector(ranks=np.array([1, 2])), 3)


class TestSurrogateWeights:

    def test_two_object_object(self, two_objects):
        refs, (o1, _), _ = two_objects
        t = truncate(compute_permutation(o1.flat, refs), 3)
        named = {TOY_NAMES[ref_key(i)]: w for i, w in surrogate_weights(t).items()}
        assert named == {"E": 3, "B": 2, "A": 1}

    def test_two_object_query(self, two_objects):
        refs, _, q = two_objects
        t = truncate(compute_permutation(q.flat, refs), 2)
        named = {TOY_NAMES[ref_key(i)]: w for i, w in surrogate_weights(t).items()}
        assert named == {"E": 2, "A": 1}

    def test_depth_one(self, two_objects):
        refs, (o1, _), _ = two_objects
        assert surrogate_weights(truncate(compute_permutation(o1.flat, refs), 1)) == {4: 1}


class TestSpearmanRho:

    def test_identical(self):
        t = TruncatedPermutation(entries={0: 1, 3: 2}, k=2, m=5)
        assert spearman_rho_loc(t, t) == 0

    def test_worked_example(self):
        o = TruncatedPermutation(entries={0: 1, 1: 2}, k=2, m=4)
        q = TruncatedPermutation(entries={2: 1, 3: 2}, k=2, m=4)
        assert spearman_rho_loc(o, q) == 10

    @pytest.mark.parametrize("k", [1, 3, 7])
    def test_disjoint_top_k(self, k):
        m = 3 * k
        o = TruncatedPermutation(entries={i: i + 1 for i in range(k)}, k=k, m=m)
        q = TruncatedPermutation(entries={k + i: i + 1 for i in range(k)}, k=k, m=m)
        assert spearman_rho_loc(o, q) == 2 * sum((k + 1 - r) ** 2 for r in range(1, k + 1))

    def test_matches_dense_loop_with_different_depths(self, rng):
        m = 30
        for _ in range(50):
            k_x, k_q = rng.integers(1, m + 1, size=2)
            o = truncate(PermutationVector(ranks=rng.permutation(m) + 1), int(k_x))
            q = truncate(PermutationVector(ranks=rng.permutation(m) + 1), int(k_q))
            assert spearman_rho_loc(o, q) == dense_rho(o, q)

    def test_two_object_distances(self, two_objects):
        refs, (o1, o2), q = two_objects
        tq = truncate(compute_permutation(q.flat, refs), 2)
        d1 = spearman_rho_loc(truncate(compute_permutation(o1.flat, refs), 3), tq)
        d2 = spearman_rho_loc(truncate(compute_permutation(o2.flat, refs), 3), tq)
        assert (d1, d2) == (4, 14)


# -----------------------------------------------------------------------
# Surrogate documents
# -----------------------------------------------------------------------

class TestEncodeStr:

    def test_two_object_texts(self, two_objects):
        refs, (o1, o2), q = two_objects
        assert encode_str(o1, refs, 3).to_surrogate_text(TOY_NAMES) == "E E E B B A"
        assert encode_str(o2, refs, 3).to_surrogate_text(TOY_NAMES) == "D D D C C E"
        assert encode_str(q, refs, 2).to_surrogate_text(TOY_NAMES) == "E E A"

    def test_depth_one(self, two_objects):
        refs, (o1, _), _ = two_objects
        assert encode_str(o1, refs, 1).terms == {"r4": 1}

    def test_weight_multiset(self, rng):
        vectors = random_vlads(rng, 25, 2, 3)
        refs = select_references(vectors, 20, REF_WHOLE, seed=0)
        doc = encode_str(random_vlads(rng, 1, 2, 3, prefix="q")[0], refs, 5)
        assert len(doc) == 5
        assert sorted(doc.terms.values()) == [1, 2, 3, 4, 5]

    def test_degenerate_is_unindexable(self, two_objects):
        refs, _, _ = two_objects
        with pytest.raises(UnindexableObjectError):
            encode_str(make_vlad(np.zeros((1, 2))), refs, 2)

    def test_needs_whole_references(self, two_objects, blockwise_refs):
        _, (o1, _), _ = two_objects
        with pytest.raises(ConfigError):
            encode_str(o1, blockwise_refs, 2)


class TestEncodeBstr:

    def test_single_block_matches_str(self, two_objects):
        refs, (o1, _), _ = two_objects
        block_refs = ReferenceSet(refs=refs.refs, mode=REF_BLOCKWISE)
        bstr = encode_bstr(o1, block_refs, 3)
        assert {t.split("_")[0]: w for t, w in bstr.terms.items()} == encode_str(o1, refs, 3).terms
        assert all(t.endswith("_b0") for t in bstr.terms)

    def test_zero_blocks_emit_no_terms(self, rng, blockwise_refs):
        blocks = rng.normal(size=(4, 4))
        blocks[[1, 2]] = 0.0
        doc = encode_bstr(make_vlad(blocks, "v"), blockwise_refs, 5)
        assert {t.split("_")[1] for t in doc.terms} == {"b0", "b3"}
        assert len(doc) == 10

    def test_per_block_multisets(self, rng):
        vectors = random_vlads(rng, 20, 8, 3)
        refs = select_references(vectors, 30, REF_BLOCKWISE, seed=2)
        doc = encode_bstr(vectors[0], refs, 10)
        assert len(doc) == 80
        for j in range(8):
            weights = sorted(w for t, w in doc.terms.items() if t.endswith(f"_b{j}"))
            assert weights == list(range(1, 11))

    def test_all_zero_is_unindexable(self, blockwise_refs):
        with pytest.raises(UnindexableObjectError):
            encode_bstr(make_vlad(np.zeros((3, 4))), blockwise_refs, 2)

    def test_block_on_its_codeword_encodes_like_the_stored_vector(self):
        cb = Codebook(centroids=np.array([[0.0, 0.0], [10.0, 10.0]]))
        v = encode_image(LocalDescriptorSet("on", np.array([[10.0, 10.0], [1.0, 0.0]])), cb)
        refs = ReferenceSet(refs=np.array([[1.0, 0.0], [0.0, 1.0]]), mode=REF_BLOCKWISE)
        doc = encode_bstr(v, refs, 2)
        assert all(t.endswith("_b0") for t in doc.terms)
        assert encode_bstr(build_store([v]).get("on"), refs, 2).terms == doc.terms

    @pytest.mark.parametrize("k", [1, 5, 40])
    def test_block_norm_identity(self, rng, blockwise_refs, k):
        for v in random_vlads(rng, 30, 3, 4):
            doc = encode_bstr(v, blockwise_refs, k)
            for j in range(3):
                norm = sum(w * w for t, w in doc.terms.items() if t.endswith(f"_b{j}"))
                assert norm == k * (k + 1) * (2 * k + 1) // 6


class TestBlockwiseDistance:

    def test_identical_is_zero(self, rng, blockwise_refs):
        v = random_vlads(rng, 1, 4, 4)[0]
        assert blockwise_distance(v, v, blockwise_refs, 6, 6) == 0

    def test_single_block_equals_rho(self, rng, blockwise_refs):
        v, w = random_vlads(rng, 2, 1, 4)
        expected = spearman_rho_loc(
            truncate(compute_permutation(v.blocks[0], blockwise_refs), 7),
            truncate(compute_permutation(w.blocks[0], blockwise_refs), 4),
        )
        assert blockwise_distance(v, w, blockwise_refs, 7, 4) == expected

    def test_sum_of_block_distances(self, rng, blockwise_refs):
        v, w = random_vlads(rng, 2, 3, 4)
        expected = sum(
            dense_rho(truncate(compute_permutation(v.blocks[j], blockwise_refs), 8),
                      truncate(compute_permutation(w.blocks[j], blockwise_refs), 5))
            for j in range(3)
        )
        assert blockwise_distance(v, w, blockwise_refs, 8, 5) == expected

    def test_zero_block_holds_implicit_ranks(self, rng, blockwise_refs):
        blocks = rng.normal(size=(2, 4))
        blocks[1] = 0.0
        perms = block_permutations(make_vlad(blocks), blockwise_refs, 3)
        assert perms[1].entries == {}
        assert set(perms[1].dense()) == {4}


# -----------------------------------------------------------------------
# Corpus encoding and files
# -----------------------------------------------------------------------

def test_encode_corpus_skips_degenerate(rng, blockwise_refs):
    vectors = random_vlads(rng, 5, 2, 4)
    vectors.insert(2, make_vlad(np.zeros((2, 4)), image_id="blank"))
    docs, skipped = encode_corpus(vectors, blockwise_refs, 4)
    assert skipped == ["blank"]
    assert [d.doc_id for d in docs] == [v.image_id for v in vectors if v.image_id != "blank"]
    threaded, _ = encode_corpus(vectors, blockwise_refs, 4, n_jobs=3)
    assert [d.terms for d in threaded] == [d.terms for d in docs]


def test_surrogate_document_text():
    doc = SurrogateDocument("img1", {"r4_b0": 3, "r10_b2": 1})
    assert doc.to_text() == "img1\tr10_b2:1 r4_b0:3"
    assert doc.to_surrogate_text() == "r4_b0 r4_b0 r4_b0 r10_b2"


def test_reference_file_round_trip(tmp_path, blockwise_refs):
    path = str(tmp_path / "refs.pref")
    write_reference_file(path, blockwise_refs)
    back = read_reference_file(path)
    assert back.mode == REF_BLOCKWISE and back.seed == blockwise_refs.seed
    np.testing.assert_array_equal(back.refs, blockwise_refs.refs)
