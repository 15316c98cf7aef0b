import numpy as np
import pytest

from sidkit.data import (
    ingest_embeddings,
    read_embeddings,
    read_metadata,
    read_user_logs,
    write_embeddings,
    write_metadata,
    write_user_logs,
)
from sidkit.errors import DataError


def test_embeddings_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    matrix = rng.normal(size=(100, 7)).astype(np.float32).astype(np.float64)
    path = tmp_path / "m.semb"
    write_embeddings(path, matrix)
    back = read_embeddings(path)
    assert np.array_equal(back, matrix)
    # Second round trip is byte-identical on disk.
    path2 = tmp_path / "m2.semb"
    write_embeddings(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_embeddings_bad_magic(tmp_path):
    path = tmp_path / "bad.semb"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError, match="magic"):
        read_embeddings(path)


def test_embeddings_truncated(tmp_path):
    path = tmp_path / "m.semb"
    write_embeddings(path, np.zeros((4, 3)))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(DataError, match="bytes"):
        read_embeddings(path)


def test_ingest_matches_counts(tmp_path):
    rng = np.random.default_rng(1)
    a = rng.normal(size=(100, 4))
    b = rng.normal(size=(100, 3))
    write_embeddings(tmp_path / "a.semb", a)
    write_embeddings(tmp_path / "b.semb", b)
    meta = [(f"item_{i:03d}", float(i) / 100, 1000 + i) for i in range(100)]
    write_metadata(tmp_path / "meta.tsv", meta)
    corpus = ingest_embeddings(
        {"a": tmp_path / "a.semb", "b": tmp_path / "b.semb"}, tmp_path / "meta.tsv"
    )
    assert len(corpus) == 100
    rec = corpus["item_042"]
    assert rec.relevance == 0.42
    assert rec.freshness == 1042
    assert np.array_equal(rec.vectors["a"], a.astype(np.float32).astype(np.float64)[42])


def test_ingest_count_mismatch_lists_counts(tmp_path):
    write_embeddings(tmp_path / "a.semb", np.zeros((100, 2)))
    write_embeddings(tmp_path / "b.semb", np.zeros((99, 2)))
    write_metadata(tmp_path / "meta.tsv", [(f"i{i}", 0.0, 0) for i in range(100)])
    with pytest.raises(DataError, match="a=100.*b=99|b=99.*a=100"):
        ingest_embeddings(
            {"a": tmp_path / "a.semb", "b": tmp_path / "b.semb"}, tmp_path / "meta.tsv"
        )


def test_metadata_malformed_row_has_line_number(tmp_path):
    path = tmp_path / "meta.tsv"
    path.write_text("a\t0.5\t100\nbroken line\n")
    with pytest.raises(DataError, match=":2"):
        read_metadata(path)


def test_user_logs_round_trip_and_sorting(tmp_path):
    events = [
        ("u2", "i1", 30),
        ("u1", "i5", 20),
        ("u1", "i3", 10),
        ("u1", "i9", 20),  # same ts as i5: stable order keeps file order
    ]
    path = tmp_path / "logs.tsv"
    write_user_logs(path, events)
    logs = read_user_logs(path)
    assert list(logs) == ["u1", "u2"]
    assert logs["u1"] == [("i3", 10), ("i5", 20), ("i9", 20)]


def test_user_logs_bad_timestamp(tmp_path):
    path = tmp_path / "logs.tsv"
    path.write_text("u1\ti1\tnot_a_ts\n")
    with pytest.raises(DataError, match="timestamp"):
        read_user_logs(path)
