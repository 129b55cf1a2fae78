import numpy as np
import pytest

from lsast.corpus import ReportCorpus
from lsast.errors import (
    CorpusError,
    DerivationError,
    EmbedderMismatchError,
    IndexIntegrityError,
    SearchError,
)
from lsast.gateway import MockGateway
from lsast.index import (
    DerivationCache,
    IndexEntry,
    IndexKind,
    OfflineEmbedder,
    VectorIndex,
    abstract_code,
    correlate,
    summarize_functionality,
)


def brute_force_topk(vectors: np.ndarray, sequences: list[int], query: np.ndarray,
                     k: int) -> list[tuple[int, float]]:
    """Reference ranking: exact cosine over unit vectors, ties by sequence."""
    sims = vectors @ query
    order = sorted(range(len(sequences)), key=lambda i: (-sims[i], sequences[i]))
    return [(sequences[i], float(sims[i])) for i in order[:k]]


def random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def make_index(vectors, sequences, kind=IndexKind.FUNCTIONALITY,
               embedder_id="test-embedder", corpus_digest="d"):
    entries = [
        IndexEntry(sequence=seq, kind=kind, derived_text=f"entry {seq}",
                   embedding=np.asarray(vec, dtype=np.float64))
        for vec, seq in zip(vectors, sequences)
    ]
    return VectorIndex(kind=kind, dimension=len(vectors[0]),
                       embedder_id=embedder_id, corpus_digest=corpus_digest,
                       entries=entries)


class TestSearchOracle:
    def test_matches_brute_force_on_random_corpora(self):
        rng = np.random.default_rng(2024_08)
        for _ in range(30):
            dim = int(rng.integers(8, 65))
            n = int(rng.integers(1, 201))
            vectors = np.stack([random_unit(rng, dim) for _ in range(n)])
            sequences = list(range(1, n + 1))
            shuffle = rng.permutation(n)
            index = make_index(vectors[shuffle], [sequences[i] for i in shuffle])
            query = random_unit(rng, dim)
            for k in (1, 3, 10, n + 5):
                hits = index.search_embedded(query, k)
                got = [(h.entry.sequence, h.similarity) for h in hits]
                expected = brute_force_topk(vectors, sequences, query, k)
                assert [g[0] for g in got] == [e[0] for e in expected]
                np.testing.assert_allclose([g[1] for g in got],
                                           [e[1] for e in expected], atol=1e-12)

    def test_exact_ties_resolve_by_ascending_sequence(self):
        rng = np.random.default_rng(7)
        dim = 16
        base = random_unit(rng, dim)
        other = random_unit(rng, dim)
        # sequences 5, 2, 9 share one vector; insertion order must not matter
        vectors = [base, other, base, base]
        sequences = [5, 1, 2, 9]
        index = make_index(vectors, sequences)
        hits = index.search_embedded(base, 3)
        assert [h.entry.sequence for h in hits] == [2, 5, 9]

    def test_k_larger_than_corpus_returns_everything(self):
        rng = np.random.default_rng(3)
        vectors = [random_unit(rng, 8) for _ in range(4)]
        index = make_index(vectors, [1, 2, 3, 4])
        assert len(index.search_embedded(vectors[0], 99)) == 4

    def test_empty_index_returns_no_hits(self):
        index = VectorIndex(kind=IndexKind.FUNCTIONALITY, dimension=8,
                            embedder_id="e", corpus_digest="d", entries=[])
        assert index.search_embedded(np.ones(8) / np.sqrt(8), 3) == []

    def test_similarity_clipped_to_cosine_range(self):
        vectors = [np.ones(4) / 2.0]
        index = make_index(vectors, [1])
        hits = index.search_embedded(np.ones(4) / 2.0, 1)
        assert -1.0 <= hits[0].similarity <= 1.0


class TestOfflineEmbedder:
    def test_deterministic(self):
        a = OfflineEmbedder().embed("select * from users")
        b = OfflineEmbedder().embed("select * from users")
        np.testing.assert_array_equal(a, b)

    def test_unit_norm(self):
        vec = OfflineEmbedder().embed("some text here")
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-12

    def test_different_texts_differ(self):
        embedder = OfflineEmbedder()
        assert not np.array_equal(embedder.embed("alpha"), embedder.embed("beta"))

    def test_dimension_respected(self):
        assert OfflineEmbedder(dimension=32).embed("x").shape == (32,)

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            OfflineEmbedder().embed("")

    def test_short_text_still_unit(self):
        # shorter than one ngram: falls back to the whole text as a gram
        vec = OfflineEmbedder().embed("ab")
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-12

    def test_identity_encodes_parameters(self):
        assert OfflineEmbedder().identity != OfflineEmbedder(seed=1).identity
        assert OfflineEmbedder().identity != OfflineEmbedder(dimension=64).identity


class TestDerivations:
    def test_summarize_functionality(self):
        summary = summarize_functionality("var x = 1", MockGateway())
        assert summary.startswith("Perform the operation identified by")

    def test_summarize_rejects_empty_code(self):
        with pytest.raises(ValueError):
            summarize_functionality("", MockGateway())

    def test_abstract_code(self):
        pattern = abstract_code("var count = total + 1", MockGateway())
        assert pattern is not None
        assert "count" not in pattern

    def test_abstract_code_no_code(self):
        class NoCode:
            def complete(self, prompt):
                return "Code-Pattern:[no code]"

        assert abstract_code("prose only", NoCode()) is None

    def test_abstract_code_bad_response(self):
        class Garbled:
            def complete(self, prompt):
                return "I refuse."

        with pytest.raises(DerivationError):
            abstract_code("var x = 1", Garbled())

    def test_cache_avoids_repeat_calls(self):
        gateway = MockGateway()
        cache = DerivationCache()
        first = cache.derive(IndexKind.ABSTRACTION, "var x = 1", gateway)
        second = cache.derive(IndexKind.ABSTRACTION, "var x = 1", gateway)
        assert first == second
        assert len(gateway.calls) == 1

    def test_cache_distinguishes_kinds(self):
        gateway = MockGateway()
        cache = DerivationCache()
        cache.derive(IndexKind.ABSTRACTION, "var x = 1", gateway)
        cache.derive(IndexKind.FUNCTIONALITY, "var x = 1", gateway)
        assert len(gateway.calls) == 2


class TestBuildAndPersist:
    def test_build_covers_catalog(self, corpus, embedder):
        index, summary = VectorIndex.build(corpus, IndexKind.FUNCTIONALITY,
                                           llm=MockGateway(), embedder=embedder)
        assert summary.entries == 3
        assert summary.failures == []
        assert index.corpus_digest == corpus.digest()
        assert sorted(e.sequence for e in index.entries) == [1, 2, 3]

    def test_build_requires_fresh_catalog(self, corpus, embedder, tmp_path,
                                          report_dicts):
        import json
        extra = dict(report_dicts[0], id=50, title="new one")
        source = tmp_path / "extra.json"
        source.write_text(json.dumps([extra]))
        corpus.ingest_reports(source)
        with pytest.raises(CorpusError):
            VectorIndex.build(corpus, IndexKind.FUNCTIONALITY,
                              llm=MockGateway(), embedder=embedder)

    def test_save_load_round_trip(self, corpus, embedder, tmp_path):
        index, _ = VectorIndex.build(corpus, IndexKind.ABSTRACTION,
                                     llm=MockGateway(), embedder=embedder)
        path = tmp_path / "abs.jsonl"
        index.save(path)
        loaded = VectorIndex.load(path)
        assert loaded.kind is IndexKind.ABSTRACTION
        assert loaded.embedder_id == index.embedder_id
        assert loaded.corpus_digest == index.corpus_digest
        for original, restored in zip(index.entries, loaded.entries):
            assert original.sequence == restored.sequence
            assert original.derived_text == restored.derived_text
            np.testing.assert_array_equal(original.embedding, restored.embedding)

    def test_loaded_index_searches_identically(self, corpus, embedder, tmp_path):
        index, _ = VectorIndex.build(corpus, IndexKind.FUNCTIONALITY,
                                     llm=MockGateway(), embedder=embedder)
        path = tmp_path / "f.jsonl"
        index.save(path)
        loaded = VectorIndex.load(path)
        query = embedder.embed("look up a user by name in the database")
        before = [(h.entry.sequence, h.similarity) for h in index.search_embedded(query, 3)]
        after = [(h.entry.sequence, h.similarity) for h in loaded.search_embedded(query, 3)]
        assert before == after

    def test_truncated_file_refused(self, corpus, embedder, tmp_path):
        index, _ = VectorIndex.build(corpus, IndexKind.FUNCTIONALITY,
                                     llm=MockGateway(), embedder=embedder)
        path = tmp_path / "f.jsonl"
        index.save(path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(IndexIntegrityError):
            VectorIndex.load(path)

    def test_missing_file_refused(self, tmp_path):
        with pytest.raises(IndexIntegrityError):
            VectorIndex.load(tmp_path / "absent.jsonl")

    def test_dimension_mismatch_rejected(self):
        entries = [IndexEntry(sequence=1, kind=IndexKind.FUNCTIONALITY,
                              derived_text="t", embedding=np.ones(4))]
        with pytest.raises(IndexIntegrityError):
            VectorIndex(kind=IndexKind.FUNCTIONALITY, dimension=8,
                        embedder_id="e", corpus_digest="d", entries=entries)


class TestTextSearch:
    def test_wrong_embedder_refused(self, corpus):
        embedder = OfflineEmbedder()
        index, _ = VectorIndex.build(corpus, IndexKind.FUNCTIONALITY,
                                     llm=MockGateway(), embedder=embedder)
        with pytest.raises(EmbedderMismatchError):
            index.search("query text", 3, llm=MockGateway(),
                         embedder=OfflineEmbedder(seed=999))

    def test_abstraction_query_without_code(self, corpus, embedder):
        index, _ = VectorIndex.build(corpus, IndexKind.ABSTRACTION,
                                     llm=MockGateway(), embedder=embedder)

        class NoCode:
            def complete(self, prompt):
                return "Code-Pattern:[no code]"

        with pytest.raises(SearchError):
            index.search("nothing but prose", 3, llm=NoCode(), embedder=embedder)

    def test_correlate_maps_and_dedupes(self, corpus, embedder):
        index, _ = VectorIndex.build(corpus, IndexKind.FUNCTIONALITY,
                                     llm=MockGateway(), embedder=embedder)
        hits = index.search("find user rows by login name", 3,
                            llm=MockGateway(), embedder=embedder)
        reports = correlate(hits, corpus)
        ids = [r.id for r in reports]
        assert len(ids) == len(set(ids))
        assert set(ids) <= {1, 2, 3}

    def test_correlate_rejects_unknown_sequence(self, corpus):
        entry = IndexEntry(sequence=999, kind=IndexKind.FUNCTIONALITY,
                           derived_text="t", embedding=np.ones(4) / 2.0)
        from lsast.index import SearchHit
        with pytest.raises(IndexIntegrityError):
            correlate([SearchHit(entry=entry, similarity=1.0)], corpus)
