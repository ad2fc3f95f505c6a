import numpy as np
import pytest

from drop_reid.errors import DataError, DimensionError
from drop_reid.index_store import EmbeddingIndexStore
from drop_reid.retrieval import EmbeddingIndex


def make_index(n=5, k=8, c=64, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingIndex(
        global_emb=rng.normal(size=(n, c)).astype(np.float32),
        foreground_emb=rng.normal(size=(n, c)).astype(np.float32),
        part_embs=rng.normal(size=(n, k, c)).astype(np.float32),
        visibility=rng.random((n, k)) > 0.5,
        identities=rng.integers(0, 10, size=n),
        cameras=rng.integers(0, 2, size=n),
        image_paths=[f"images/query/{i}.png" for i in range(n)],
    )


def test_round_trip_is_exact(tmp_path):
    index = make_index()
    store = EmbeddingIndexStore(tmp_path / "index.db")
    store.append(index, "query")
    loaded = store.load("query")
    for name in ("global_emb", "foreground_emb", "part_embs", "visibility", "identities", "cameras"):
        assert np.array_equal(getattr(loaded, name), getattr(index, name))
    assert loaded.image_paths == index.image_paths


def test_header_and_payload_width(tmp_path):
    store = EmbeddingIndexStore(tmp_path / "index.db")
    assert store.header() is None
    store.append(make_index(n=3), "gallery")
    header = store.header()
    assert header == {"format_version": 1, "embed_dim": 64, "num_parts": 8, "count": 3}
    with store.get_connection() as conn:
        blob = conn.execute("SELECT vectors FROM embeddings LIMIT 1").fetchone()[0]
    assert len(blob) == (2 + 8) * 64 * 4


def test_split_filter_and_append_count(tmp_path):
    store = EmbeddingIndexStore(tmp_path / "index.db")
    store.append(make_index(n=3, seed=1), "query")
    total = store.append(make_index(n=4, seed=2), "gallery")
    assert total == 7
    assert len(store.load("query")) == 3
    assert len(store.load("gallery")) == 4
    assert len(store.load()) == 7


def test_width_mismatch_on_append(tmp_path):
    store = EmbeddingIndexStore(tmp_path / "index.db")
    store.append(make_index(c=64), "query")
    with pytest.raises(DimensionError):
        store.append(make_index(c=32), "query")


def test_merge_two_exports(tmp_path):
    a = EmbeddingIndexStore(tmp_path / "a.db")
    b = EmbeddingIndexStore(tmp_path / "b.db")
    a.append(make_index(n=3, seed=1), "query")
    b.append(make_index(n=4, seed=2), "query")
    b.append(make_index(n=2, seed=3), "gallery")
    assert a.merge_from(b) == 9
    merged = a.load("query")
    assert len(merged) == 7
    assert np.array_equal(merged.global_emb[3:], b.load("query").global_emb)


def test_load_empty(tmp_path):
    store = EmbeddingIndexStore(tmp_path / "index.db")
    with pytest.raises(DataError):
        store.load()
    store.append(make_index(), "query")
    with pytest.raises(DataError):
        store.load("gallery")
