"""Pipeline configuration, the vector store, reordering and end-to-end search."""

import numpy as np
import pytest

from config import MODE_BSTR, MODE_BSTR_TFIDF, MODE_RSTR, MODE_STR, REF_BLOCKWISE, REF_WHOLE
from eval_harness import exact_scan
from inverted_index import build_index
from permutation_codec import encode_corpus, select_references
from search_pipeline import PipelineConfig, VladStore, build_store, rerank, search
from utils import ConfigError, DataFormatError, DimensionMismatchError, IndexStateError, MissingVectorError

from conftest import make_vlad, random_vlads


@pytest.fixture
def whole_setup(rng):
    vectors = random_vlads(rng, 150, 4, 4)
    refs = select_references(vectors, 24, REF_WHOLE, seed=0)
    docs, _ = encode_corpus(vectors, refs, 24)
    return vectors, refs, build_index(docs), build_store(vectors)


class TestPipelineConfig:

    def test_defaults_validate(self):
        assert PipelineConfig().validate(m=4000).ref_mode == REF_WHOLE

    @pytest.mark.parametrize("kwargs", [
        dict(mode="LSH"),
        dict(k=0),
        dict(k_x=60, k_q=10),
        dict(mode=MODE_RSTR, c=5, k=10),
        dict(mode=MODE_BSTR_TFIDF),
        dict(mode=MODE_BSTR, prune_query=5),
        dict(mode=MODE_STR, prune_docs=5),
        dict(mode=MODE_BSTR_TFIDF, prune_query=0),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            PipelineConfig(**kwargs).validate(m=50)

    def test_blockwise_modes(self):
        assert PipelineConfig(mode=MODE_BSTR).ref_mode == REF_BLOCKWISE
        assert PipelineConfig(mode=MODE_BSTR_TFIDF, prune_query=5, prune_docs=10).validate(50).ref_mode == REF_BLOCKWISE

    def test_query_pruning_follows_prune_level(self):
        assert PipelineConfig(mode=MODE_BSTR).query_pruning is None
        pruning = PipelineConfig(mode=MODE_BSTR_TFIDF, k_q=12, prune_query=5).query_pruning
        assert (pruning.target, pruning.keep, pruning.source_k) == ("query", 5, 12)


class TestVladStore:

    def test_lookup(self, rng):
        vectors = random_vlads(rng, 5, 2, 3)
        store = build_store(vectors)
        assert len(store) == 5 and "doc0003" in store
        assert store.ordinal("doc0003") == 3
        np.testing.assert_array_equal(store.get("doc0003").blocks, vectors[3].blocks)
        with pytest.raises(MissingVectorError):
            store.ordinal("nope")

    def test_rejects_bad_shapes_and_duplicates(self, rng):
        store = build_store(random_vlads(rng, 2, 2, 3))
        with pytest.raises(DimensionMismatchError):
            store.add(make_vlad(np.ones((3, 3)), "x"))
        with pytest.raises(IndexStateError):
            store.add(make_vlad(np.ones((2, 3)), "doc0000"))

    def test_round_trip(self, tmp_path, rng):
        vectors = random_vlads(rng, 20, 3, 4)
        store = build_store(vectors)
        path = str(tmp_path / "s.pvst")
        size = store.save(path)
        assert size == (tmp_path / "s.pvst").stat().st_size
        back = VladStore.load(path)
        assert back.doc_ids == store.doc_ids
        np.testing.assert_array_equal(back.matrix, store.matrix)

    def test_truncated_file(self, tmp_path, rng):
        path = str(tmp_path / "s.pvst")
        build_store(random_vlads(rng, 3, 2, 2)).save(path)
        raw = (tmp_path / "s.pvst").read_bytes()
        (tmp_path / "s.pvst").write_bytes(raw[:-3])
        with pytest.raises(DataFormatError):
            VladStore.load(path)


class TestRerank:

    def test_single_candidate(self, rng):
        vectors = random_vlads(rng, 10, 2, 3)
        hits = rerank(["doc0004"], vectors[0], build_store(vectors), 5)
        assert [h.doc_id for h in hits] == ["doc0004"]

    def test_matches_sort_oracle(self, rng):
        vectors = random_vlads(rng, 300, 4, 4)
        store = build_store(vectors)
        q = random_vlads(rng, 1, 4, 4, prefix="q")[0]
        candidates = [vectors[i].image_id for i in rng.permutation(len(vectors))[:100]]
        expected = sorted(candidates, key=lambda i: -float(np.dot(store.get(i).flat, q.flat)))[:20]
        assert [h.doc_id for h in rerank(candidates, q, store, 20)] == expected

    def test_exact_order_preserved(self, rng):
        vectors = random_vlads(rng, 30, 2, 3)
        store = build_store(vectors)
        ordered = exact_scan(vectors[0], store, 30)
        assert [h.doc_id for h in rerank(ordered, vectors[0], store, 30)] == ordered

    def test_missing_vector(self, rng):
        vectors = random_vlads(rng, 3, 2, 3)
        with pytest.raises(MissingVectorError):
            rerank(["ghost"], vectors[0], build_store(vectors), 1)


class TestSearch:

    def test_self_is_rank_one(self, whole_setup):
        vectors, refs, index, store = whole_setup
        config = PipelineConfig(mode=MODE_STR, k_x=24, k_q=24, k=5)
        for v in vectors[:10]:
            hits = search(v, index, refs, config).hits
            assert hits[0].score == 24 * 25 * 49 // 6
            assert v.image_id in [h.doc_id for h in hits if h.score == hits[0].score]

    def test_rstr_with_full_c_is_exact(self, whole_setup, rng):
        vectors, refs, index, store = whole_setup
        config = PipelineConfig(mode=MODE_RSTR, k_x=24, k_q=24, c=len(vectors), k=10)
        for q in random_vlads(rng, 20, 4, 4, prefix="q"):
            assert search(q, index, refs, config, store).doc_ids == exact_scan(q, store, 10)

    def test_two_object_ranking(self, two_objects):
        refs, objects, q = two_objects
        docs, _ = encode_corpus(objects, refs, 3)
        result = search(q, build_index(docs), refs, PipelineConfig(mode=MODE_STR, k_x=3, k_q=2, k=10))
        assert result.doc_ids == ["o1", "o2"]

    def test_rstr_needs_store(self, whole_setup):
        vectors, refs, index, _ = whole_setup
        with pytest.raises(ConfigError):
            search(vectors[0], index, refs, PipelineConfig(mode=MODE_RSTR, k_x=24, k_q=10, c=50))

    def test_reference_mode_mismatch(self, whole_setup):
        vectors, refs, index, _ = whole_setup
        with pytest.raises(ConfigError):
            search(vectors[0], index, refs, PipelineConfig(mode=MODE_BSTR, k_x=24, k_q=10))

    def test_bstr_tfidf_prunes_the_query(self, rng):
        vectors = random_vlads(rng, 80, 4, 3)
        refs = select_references(vectors, 30, REF_BLOCKWISE, seed=4)
        docs, _ = encode_corpus(vectors, refs, 10)
        config = PipelineConfig(mode=MODE_BSTR_TFIDF, k_x=10, k_q=10, k=5, prune_query=8)
        result = search(vectors[3], build_index(docs), refs, config)
        assert 1 <= len(result.hits) <= 5
        assert result.hits[0].score <= 8 * 10 * 10
        scores = [h.score for h in result.hits]
        assert scores == sorted(scores, reverse=True)

    def test_k_larger_than_corpus(self, two_objects):
        refs, objects, q = two_objects
        docs, _ = encode_corpus(objects, refs, 3)
        result = search(q, build_index(docs), refs, PipelineConfig(mode=MODE_STR, k_x=3, k_q=2, k=50))
        assert len(result.hits) <= 2
