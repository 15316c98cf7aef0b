"""Corpus ingestion and the on-disk interchange formats.

Embeddings travel as "SEMB" binary files (one per modality): magic, format
version, row count, dim, then float32 rows, all little-endian. Metadata and
user logs are tab-separated text. Vectors are stored as float32 on disk and
upcast to float64 in memory, so a write/ingest round trip is bit-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

SEMB_MAGIC = b"SEMB"
SEMB_VERSION = 1


@dataclass
class EmbeddingRecord:
    """One item: per-modality dense vectors plus resolution metadata."""

    item_id: str
    vectors: dict[str, np.ndarray]
    relevance: float = 0.0
    freshness: int = 0


@dataclass
class Corpus:
    """Items keyed by id, ordered by ascending item_id."""

    records: dict[str, EmbeddingRecord] = field(default_factory=dict)

    def __post_init__(self):
        self.records = dict(sorted(self.records.items()))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records.values())

    def __getitem__(self, item_id: str) -> EmbeddingRecord:
        return self.records[item_id]

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.records

    @property
    def ids(self) -> list[str]:
        return list(self.records)

    @property
    def modalities(self) -> list[str]:
        first = next(iter(self.records.values()))
        return list(first.vectors)

    def modality_dim(self, name: str) -> int:
        first = next(iter(self.records.values()))
        return int(first.vectors[name].shape[0])

    def matrix(self, modality: str) -> np.ndarray:
        """Stacked (N, d) float64 matrix in item_id order."""
        return np.stack([r.vectors[modality] for r in self])

    def concat_matrix(self) -> np.ndarray:
        """All modalities concatenated per item, in declared modality order."""
        mods = self.modalities
        return np.concatenate([self.matrix(m) for m in mods], axis=1)

    def subset(self, ids: list[str]) -> "Corpus":
        return Corpus({i: self.records[i] for i in ids})


def write_embeddings(path: str | Path, matrix: np.ndarray) -> None:
    """Write an (N, d) matrix as a SEMB file (float32 rows)."""
    m = np.ascontiguousarray(np.asarray(matrix, dtype=np.float32))
    if m.ndim != 2:
        raise DataError(f"embedding matrix wants 2 dims, got shape {m.shape}")
    with open(path, "wb") as f:
        f.write(SEMB_MAGIC)
        f.write(struct.pack("<IQI", SEMB_VERSION, m.shape[0], m.shape[1]))
        f.write(m.astype("<f4").tobytes())


def read_embeddings(path: str | Path) -> np.ndarray:
    """Read a SEMB file into an (N, d) float64 matrix."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != SEMB_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, want {SEMB_MAGIC!r}")
    version, rows, dim = struct.unpack_from("<IQI", blob, 4)
    if version != SEMB_VERSION:
        raise DataError(f"{path}: unsupported SEMB version {version}")
    expected = 4 + 16 + 4 * rows * dim
    if len(blob) != expected:
        raise DataError(f"{path}: file is {len(blob)} bytes, header implies {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=20).reshape(rows, dim)
    return data.astype(np.float64)


def write_metadata(path: str | Path, rows: list[tuple[str, float, int]]) -> None:
    """Write item metadata lines: item_id <tab> relevance <tab> freshness."""
    with open(path, "w") as f:
        for item_id, relevance, freshness in rows:
            f.write(f"{item_id}\t{relevance!r}\t{freshness}\n")


def read_metadata(path: str | Path) -> list[tuple[str, float, int]]:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"{path}:{lineno}: want 3 tab-separated fields, got {len(parts)}"
                )
            try:
                rows.append((parts[0], float(parts[1]), int(parts[2])))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return rows


def ingest_embeddings(
    embedding_paths: dict[str, str | Path], metadata_path: str | Path
) -> Corpus:
    """Load per-modality SEMB files plus metadata into a Corpus.

    Row i of every modality file belongs to the item on metadata line i+1.
    Row counts must agree across all files and the metadata.
    """
    if not embedding_paths:
        raise DataError("no modality embedding files given")
    matrices = {name: read_embeddings(p) for name, p in embedding_paths.items()}
    meta = read_metadata(metadata_path)
    counts = {name: m.shape[0] for name, m in matrices.items()}
    counts["metadata"] = len(meta)
    if len(set(counts.values())) != 1:
        listing = ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
        raise DataError(f"row counts disagree across inputs: {listing}")
    seen: set[str] = set()
    records = {}
    for i, (item_id, relevance, freshness) in enumerate(meta):
        if item_id in seen:
            raise DataError(f"duplicate item_id {item_id!r} in metadata")
        seen.add(item_id)
        records[item_id] = EmbeddingRecord(
            item_id=item_id,
            vectors={name: matrices[name][i] for name in matrices},
            relevance=relevance,
            freshness=freshness,
        )
    return Corpus(records)


def write_user_logs(path: str | Path, events: list[tuple[str, str, int]]) -> None:
    """Write interaction lines: user_id <tab> item_id <tab> timestamp."""
    with open(path, "w") as f:
        for user_id, item_id, ts in events:
            f.write(f"{user_id}\t{item_id}\t{ts}\n")


def read_user_logs(path: str | Path) -> dict[str, list[tuple[str, int]]]:
    """Group log lines by user, each user's events sorted by timestamp.

    The sort is stable, so events sharing a timestamp keep file order.
    """
    per_user: dict[str, list[tuple[str, int]]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"{path}:{lineno}: want 3 tab-separated fields, got {len(parts)}"
                )
            try:
                ts = int(parts[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad timestamp {parts[2]!r}") from exc
            per_user.setdefault(parts[0], []).append((parts[1], ts))
    for user in per_user:
        per_user[user].sort(key=lambda e: e[1])
    return dict(sorted(per_user.items()))
